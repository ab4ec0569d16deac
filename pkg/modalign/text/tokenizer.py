import hashlib
import re
from dataclasses import dataclass
from typing import Tuple

from modalign import get_logger
from modalign.exceptions import InvalidInput

__all__ = ["CLS_ID", "TokenSequence", "stable_hash", "tokenize"]

logger = get_logger()

CLS_ID = 0

# runs of letters and digits, underscores count as separators
_WORD = re.compile(r"[^\W_]+")


@dataclass(frozen=True)
class TokenSequence:
    ids: Tuple[int, ...]
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.ids)


def stable_hash(token: str) -> int:
    """
    Hash a token the same way on every run and platform, unlike `hash()`
    which is salted per process.
    """
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def tokenize(
    report: str, max_len: int = 64, vocab_size: int = 8192
) -> TokenSequence:
    """
    Lowercase the report, split it on whitespace and punctuation and hash
    each word into `[0, vocab_size)`. The CLS id is prepended, so an empty
    report gives `(0,)`. Sequences longer than `max_len` are cut and
    flagged as truncated.
    """
    if max_len < 1:
        raise InvalidInput(f"max_len must be at least 1, got {max_len}")
    if vocab_size < 2:
        raise InvalidInput(f"vocab_size must be at least 2, got {vocab_size}")

    words = _WORD.findall(report.lower())
    ids = [CLS_ID] + [stable_hash(w) % vocab_size for w in words]

    truncated = len(ids) > max_len
    if truncated:
        logger.warning(
            f"Report of {len(ids)} tokens truncated to {max_len} tokens"
        )
        ids = ids[:max_len]
    return TokenSequence(ids=tuple(ids), truncated=truncated)
