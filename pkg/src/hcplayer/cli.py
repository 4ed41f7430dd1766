"""Command line entry point: ``hcplayer {train,sample,analyze,eval,make-fixture}``.

Exit codes: 0 success, 2 usage or validation error, 3 incompatible
checkpoint, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image

from . import __version__
from .exceptions import CompatibilityError, HcPError, NumericalError, ValidationError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_COMPATIBILITY = 3
EXIT_NUMERICAL = 4

TOOL_ID = f"hcplayer {__version__}"
log = logging.getLogger("hcplayer")


def _write_run_record(out: Path, command: str, seed: int, config: dict, extra: Optional[dict] = None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    record = {"tool": TOOL_ID, "command": command, "seed": seed, "config": config}
    record.update(extra or {})
    path = out / "run.json"
    path.write_text(json.dumps(record, indent=1, sort_keys=True), encoding="utf-8")
    return path


def cmd_train(args) -> int:
    from .config import load_config
    from .training import run_training

    cfg = load_config(args.config)
    if args.out:
        cfg.paths.out_dir = str(Path(args.out).resolve())
    if cfg.paths.manifest is None:
        raise ValidationError("invalid config: paths.manifest: required for train")
    if not Path(cfg.paths.manifest).is_file():
        raise ValidationError(f"invalid config: paths.manifest: file {cfg.paths.manifest} does not exist")
    out = Path(cfg.paths.out_dir)
    _write_run_record(out, "train", cfg.seed, cfg.resolved())
    ckpt, history, _ = run_training(cfg.training_config(), cfg.paths.manifest, out, backbone_seed=cfg.backbone.seed)
    print(json.dumps({"checkpoint": str(ckpt), "steps": len(history),
                      "final_total": history[-1].total if history else None}))
    return EXIT_OK


def _read_prompts(path) -> List[str]:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"prompt file {path} does not exist")
    prompts = [l.strip() for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]
    if not prompts:
        raise ValidationError(f"prompt file {path} contains no prompts")
    return prompts


def cmd_sample(args) -> int:
    from .analysis import TraceRecorder
    from .backbone import toy_backbone
    from .config import load_config
    from .sampling import attach_hcp, generate
    from .training import load_checkpoint

    cfg = load_config(args.config)
    if args.gamma is not None:
        cfg.sampler.gamma = args.gamma
    if args.trace:
        cfg.trace.enabled = True
    prompts = _read_prompts(args.prompts)
    out = Path(args.out or cfg.paths.out_dir)
    sampler = cfg.sampler_config()
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.is_file():
        raise ValidationError(f"checkpoint {ckpt_path} does not exist")
    checkpoint = load_checkpoint(ckpt_path)
    backbone = toy_backbone(checkpoint.descriptor, seed=cfg.backbone.seed) if args.descriptor_from_checkpoint \
        else toy_backbone(seed=cfg.backbone.seed)
    attach_hcp(backbone, checkpoint, gamma=sampler.gamma)
    _write_run_record(out, "sample", cfg.seed, cfg.resolved(),
                      {"checkpoint": str(ckpt_path.resolve()), "prompts": prompts})
    for i, prompt in enumerate(prompts):
        pdir = out / f"prompt_{i:03d}"
        pdir.mkdir(parents=True, exist_ok=True)
        recorder = None
        if cfg.trace.enabled:
            recorder = TraceRecorder(cfg.trace.layers, cfg.trace.timesteps, pdir / "trace")
        result = generate(prompt, sampler, backbone, recorder=recorder)
        for k, img in enumerate(result["images"]):
            Image.fromarray(img).save(pdir / f"image_{k:02d}.png")
        Image.fromarray(result["grid"]).save(pdir / "grid.png")
        (pdir / "prompt.txt").write_text(prompt + "\n", encoding="utf-8")
    print(json.dumps({"out_dir": str(out), "prompts": len(prompts)}))
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .analysis import AttentionTrace, average_over_timesteps, export_heatmaps, grid_by_scale_and_step
    from .tokens import PromptBundle, ToyTokenizer, _WORD_RE

    trace = AttentionTrace.load(args.trace)
    text = trace.prompt.get("text")
    if text is None:
        raise ValidationError(f"trace {args.trace} records no prompt; cannot resolve words")
    bundle = PromptBundle(text, trace.prompt["token_ids"], None, [], None)
    indices = bundle.token_index_for_word(args.token, ToyTokenizer())
    if not indices:
        words = sorted({m.group(0).lower() for m in _WORD_RE.finditer(text)})
        raise ValidationError(f"word {args.token!r} not in prompt {text!r}; available words: {', '.join(words)}")
    token = indices[0]
    out = Path(args.out)
    _write_run_record(out, "analyze", int(trace.sampler.get("seed", 0)),
                      {"trace": str(Path(args.trace).resolve()), "word": args.token, "token_index": token})
    grid = grid_by_scale_and_step(trace, token)
    grid.save(out / "grid")
    averaged = average_over_timesteps(trace, token)
    export_heatmaps(averaged, out / "averaged")
    cells = {f"t{t:04d}_{stage}_{side}": grid.cells[i, j]
             for i, t in enumerate(grid.timesteps) for j, (stage, side) in enumerate(grid.groups)}
    export_heatmaps(cells, out / "grid_png")
    print(json.dumps({"token_index": token, "grid_shape": list(grid.cells.shape), "out_dir": str(out)}))
    return EXIT_OK


def _read_features(path):
    from .archive import Archive
    from .metrics import FeatureSet

    arc = Archive(path)
    if "features" not in arc:
        raise ValidationError(f"feature archive {path} has no 'features' array")
    return FeatureSet(arc["features"].astype(np.float64), arc.meta.get("source", "unknown"),
                      arc.meta.get("embedder", "unknown"))


def cmd_eval(args) -> int:
    from .archive import Archive
    from .metrics import clip_score, fid, kid

    a, b = _read_features(args.features_a), _read_features(args.features_b)
    subset = args.kid_subset_size or min(100, a.features.shape[0], b.features.shape[0])
    k_mean, k_std = kid(a, b, subset, args.kid_subsets, args.seed)
    result = {"tool": TOOL_ID, "fid": fid(a, b), "kid_mean": k_mean, "kid_std": k_std,
              "kid_subset_size": subset, "kid_subsets": args.kid_subsets, "seed": args.seed,
              "embedders": [a.embedder, b.embedder]}
    if args.clip_pairs:
        arc = Archive(args.clip_pairs)
        result["clip_score"] = clip_score(arc["image"].astype(np.float64), arc["text"].astype(np.float64))
        result["clip_score_convention"] = "mean of 100*max(0, cos)"
    print(json.dumps(result, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_make_fixture(args) -> int:
    from .fixtures import make_synthetic_fixture

    manifest = make_synthetic_fixture(args.out, n_records=args.records, seed=args.seed)
    print(json.dumps({"manifest": str(manifest)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hcplayer", description="Human-centric prior attention fine-tuning toolkit")
    p.add_argument("--version", action="version", version=TOOL_ID)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fine-tune HcP layers from a JSON run config")
    t.add_argument("config")
    t.add_argument("--out", help="override paths.out_dir")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="text-only sampling with a trained checkpoint")
    s.add_argument("config")
    s.add_argument("--prompts", required=True, help="newline-delimited prompt file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out")
    s.add_argument("--gamma", type=float, help="override the combination weight (1 disables HcP)")
    s.add_argument("--trace", action="store_true", help="record attention traces")
    s.add_argument("--descriptor-from-checkpoint", action="store_true",
                   help="build the toy backbone from the checkpoint's descriptor")
    s.set_defaults(func=cmd_sample)

    a = sub.add_parser("analyze", help="averaged maps and step-by-scale grid for one prompt word")
    a.add_argument("trace")
    a.add_argument("--token", required=True, help="word of the traced prompt")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)

    e = sub.add_parser("eval", help="FID / KID between two feature archives")
    e.add_argument("features_a")
    e.add_argument("features_b")
    e.add_argument("--kid-subset-size", type=int)
    e.add_argument("--kid-subsets", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--clip-pairs", help="archive holding row-aligned 'image' and 'text' embeddings")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("make-fixture", help="write the synthetic training fixture")
    f.add_argument("out")
    f.add_argument("--records", type=int, default=16)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_make_fixture)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPATIBILITY
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, HcPError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
