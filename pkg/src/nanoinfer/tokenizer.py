"""Byte-level tokenizer: ids 0..255 are raw bytes, 256+ are control tokens."""

from __future__ import annotations

from .errors import DomainError

EOS_ID = 256
SEP_ID = 257
N_CONTROL = 4
VOCAB_SIZE = 256 + N_CONTROL

CONTROL_IDS = frozenset(range(256, VOCAB_SIZE))


def tokenize(text) -> list[int]:
    """Map a byte string (str is UTF-8 encoded first) to token ids."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    return list(text)


def detokenize(ids) -> bytes:
    """Map token ids back to bytes; control ids are dropped."""
    out = bytearray()
    for i in ids:
        i = int(i)
        if 0 <= i < 256:
            out.append(i)
        elif i not in CONTROL_IDS:
            raise DomainError(f"token id {i} outside [0, {VOCAB_SIZE})")
    return bytes(out)
