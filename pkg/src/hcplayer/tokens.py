"""Human-centric word selection and token-index mapping for prompts."""
from __future__ import annotations

import re
import zlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import torch
from torch import nn

from .exceptions import ValidationError

Span = Tuple[int, int]

_WORD_RE = re.compile(r"[A-Za-z0-9']+")

# -ing words that are not human actions
_ING_STOPWORDS = frozenset(
    """doing being having during something nothing anything everything morning evening
    building ceiling ring king thing string spring wing sing bring clothing wedding
    setting lighting painting background including according featuring wearing holding
    showing looking""".split()
)


def load_lexicon(path=None) -> frozenset:
    """Read a lexicon file (UTF-8, one term per line, ``#`` comments).

    Without ``path`` the packaged default lexicon is used.
    """
    if path is None:
        text = resources.files("hcplayer").joinpath("data/lexicon.txt").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    terms = set()
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip().lower()
        if line:
            terms.add(line)
    return frozenset(terms)


class RuleBasedSelector:
    """Pick person and action words using a lexicon plus a gerund heuristic."""

    def __init__(self, lexicon: Optional[Iterable[str]] = None, gerunds: bool = True,
                 stopwords: Iterable[str] = _ING_STOPWORDS):
        self.lexicon = frozenset(w.lower() for w in lexicon) if lexicon is not None else load_lexicon()
        self.gerunds = gerunds
        self.stopwords = frozenset(stopwords)

    def is_human_centric(self, word: str) -> bool:
        w = word.lower()
        if w in self.lexicon:
            return True
        if w.endswith("s") and w[:-1] in self.lexicon:
            return True
        return self.gerunds and len(w) > 4 and w.endswith("ing") and w not in self.stopwords

    def __call__(self, text: str) -> List[Tuple[str, Span]]:
        return [(m.group(0), m.span()) for m in _WORD_RE.finditer(text)
                if self.is_human_centric(m.group(0))]


def extract_human_centric_words(text: str, extractor=None) -> List[Tuple[str, Span]]:
    """Return ``(word, (start, end))`` pairs for person/action words in ``text``."""
    if not isinstance(text, str) or not text.strip():
        raise ValidationError("prompt text must be a non-empty string")
    extractor = extractor if extractor is not None else RuleBasedSelector()
    return list(extractor(text))


@dataclass(frozen=True)
class Token:
    id: int
    text: str
    start: int
    end: int

    @property
    def is_special(self) -> bool:
        return self.start < 0


class ToyTokenizer:
    """Deterministic word-piece tokenizer with character offsets.

    Words longer than ``piece_len`` characters are split into consecutive
    pieces.  Sequences are ``[BOS] pieces... [EOS] [PAD]...`` of fixed length.
    """

    BOS, EOS, PAD = 0, 1, 2

    def __init__(self, max_length: int = 16, vocab_size: int = 4096, piece_len: int = 6):
        if max_length < 3:
            raise ValidationError("max_length must be at least 3")
        self.max_length = max_length
        self.vocab_size = vocab_size
        self.piece_len = piece_len

    def piece_id(self, piece: str) -> int:
        return 3 + zlib.crc32(piece.encode("utf-8")) % (self.vocab_size - 3)

    def tokenize(self, text: str) -> List[Token]:
        tokens = [Token(self.BOS, "<bos>", -1, -1)]
        budget = self.max_length - 2
        for m in _WORD_RE.finditer(text):
            word = m.group(0).lower()
            for off in range(0, len(word), self.piece_len):
                if len(tokens) - 1 >= budget:
                    break
                piece = word[off:off + self.piece_len]
                start = m.start() + off
                tokens.append(Token(self.piece_id(piece), piece, start, start + len(piece)))
        tokens.append(Token(self.EOS, "<eos>", -1, -1))
        while len(tokens) < self.max_length:
            tokens.append(Token(self.PAD, "<pad>", -1, -1))
        return tokens

    def __call__(self, text: str) -> List[int]:
        return [t.id for t in self.tokenize(text)]


def map_words_to_token_indices(tokens: Sequence[Token], spans: Sequence[Span], text: str) -> List[int]:
    """Indices of every token whose character span overlaps one of ``spans``."""
    indices = set()
    for start, end in spans:
        if not (0 <= start < end <= len(text)):
            raise ValidationError(f"span {(start, end)} lies outside the text (length {len(text)})")
        for i, tok in enumerate(tokens):
            if not tok.is_special and tok.start < end and start < tok.end:
                indices.add(i)
    return sorted(indices)


class ToyTextEncoder(nn.Module):
    """Frozen token + position embedding table producing ``[N, D]`` conditions."""

    def __init__(self, vocab_size: int = 4096, embed_dim: int = 32, max_length: int = 16, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.register_buffer("table", torch.randn(vocab_size, embed_dim, generator=gen))
        self.register_buffer("positions", 0.1 * torch.randn(max_length, embed_dim, generator=gen))
        self.embed_dim = embed_dim
        self.max_length = max_length

    def forward(self, token_ids) -> torch.Tensor:
        ids = torch.as_tensor(token_ids, dtype=torch.long)
        return self.table[ids] + self.positions[: ids.shape[-1]]


@dataclass
class PromptBundle:
    raw_text: str
    token_ids: List[int]
    embeddings: torch.Tensor
    human_indices: List[int]
    words: Optional[List[Tuple[str, Span]]] = None

    def __post_init__(self):
        n = len(self.token_ids)
        idx = sorted(set(int(i) for i in self.human_indices))
        if any(i < 0 or i >= n for i in idx):
            raise ValidationError(f"human indices {idx} out of range for {n} tokens")
        self.human_indices = idx

    def token_index_for_word(self, word: str, tokenizer: "ToyTokenizer") -> List[int]:
        spans = [m.span() for m in _WORD_RE.finditer(self.raw_text) if m.group(0).lower() == word.lower()]
        if not spans:
            return []
        return map_words_to_token_indices(tokenizer.tokenize(self.raw_text), spans, self.raw_text)


class PromptEncoder:
    """Bundles tokenizer, text encoder and word selector into one handle."""

    def __init__(self, tokenizer=None, text_encoder=None, selector=None):
        self.tokenizer = tokenizer or ToyTokenizer()
        self.text_encoder = text_encoder or ToyTextEncoder(max_length=self.tokenizer.max_length)
        self.selector = selector or RuleBasedSelector()

    def encode(self, text: str, require_human: bool = False) -> PromptBundle:
        if not isinstance(text, str):
            raise ValidationError("prompt must be a string")
        tokens = self.tokenizer.tokenize(text)
        ids = [t.id for t in tokens]
        words = extract_human_centric_words(text, self.selector) if text.strip() else []
        idx = map_words_to_token_indices(tokens, [s for _, s in words], text)
        if require_human and not idx:
            raise ValidationError(f"prompt {text!r} has no human-centric tokens")
        with torch.no_grad():
            emb = self.text_encoder(ids)
        return PromptBundle(text, ids, emb, idx, words)

    def empty_embedding(self) -> torch.Tensor:
        with torch.no_grad():
            return self.text_encoder(self.tokenizer(""))
