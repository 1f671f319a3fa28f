"""Fixed symbolic vocabulary for the synthetic code-review world."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import DataError

PAD, EOS = "<PAD>", "<EOS>"
PATCH_OPEN, PATCH_CLOSE = "<PATCH>", "</PATCH>"
ASK_REVIEW = "<Q:REVIEW?>"
YES, NO = "YES", "NO"
GEN_COMMENT = "<GEN:COMMENT>"
COMMENT_OPEN, COMMENT_CLOSE = "<COMMENT>", "</COMMENT>"
GEN_REFINED = "<GEN:REFINED>"

SPECIAL_TOKENS = (
    PAD,
    EOS,
    PATCH_OPEN,
    PATCH_CLOSE,
    ASK_REVIEW,
    YES,
    NO,
    GEN_COMMENT,
    COMMENT_OPEN,
    COMMENT_CLOSE,
    GEN_REFINED,
)
PAD_ID, EOS_ID = 0, 1
YES_ID, NO_ID = SPECIAL_TOKENS.index(YES), SPECIAL_TOKENS.index(NO)

# Natural-language words used by review comments.
COMMENT_WORDS = ("use", "instead", "of", "here", "please")


def default_code_symbols(vocab_size: int = 64) -> tuple[str, ...]:
    n = vocab_size - len(SPECIAL_TOKENS) - len(COMMENT_WORDS)
    return tuple(f"c{i:02d}" for i in range(n))


@dataclass(frozen=True)
class Vocabulary:
    symbols: tuple[str, ...]

    def __post_init__(self):
        if self.symbols[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise DataError("vocabulary must start with the reserved special tokens")
        if len(set(self.symbols)) != len(self.symbols):
            raise DataError("vocabulary symbols must be unique")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.symbols)})

    @classmethod
    def build(cls, code_symbols: Iterable[str] | None = None, size: int = 64) -> Vocabulary:
        code = tuple(code_symbols) if code_symbols is not None else default_code_symbols(size)
        return cls(SPECIAL_TOKENS + COMMENT_WORDS + code)

    def __len__(self) -> int:
        return len(self.symbols)

    def id(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise DataError(f"symbol {symbol!r} is not in the vocabulary") from None

    def encode(self, text: str | Sequence[str]) -> list[int]:
        parts = text.split() if isinstance(text, str) else text
        return [self.id(p) for p in parts]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.symbols[i] for i in ids]
