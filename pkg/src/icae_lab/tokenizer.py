"""Byte-level tokenizer with a small block of special tokens."""

from __future__ import annotations

from typing import Iterable, Sequence

N_BYTES = 256

AE = 256
LM = 257
QA = 258
ACT = 259
END_RECON = 260
MEM_SENTINEL = 261
EOS = 262

SPECIAL_NAMES = {
    AE: "AE",
    LM: "LM",
    QA: "QA",
    ACT: "ACT",
    END_RECON: "END_RECON",
    MEM_SENTINEL: "MEM",
    EOS: "EOS",
}
N_SPECIAL = len(SPECIAL_NAMES)
N_TOKENS = N_BYTES + N_SPECIAL


class DecodeError(ValueError):
    pass


def glyph(token_id: int) -> str:
    """Display form of a special token, e.g. ``<|AE|>``."""
    return f"<|{SPECIAL_NAMES[token_id]}|>"


def encode_bytes(data: bytes) -> list[int]:
    return list(data)


def decode_bytes(ids: Iterable[int]) -> bytes:
    out = bytearray()
    for i in ids:
        i = int(i)
        if not 0 <= i < N_BYTES:
            raise DecodeError(f"token {i} is not a byte token")
        out.append(i)
    return bytes(out)


def tokenize(text: str | bytes) -> list[int]:
    """Encode text as UTF-8 bytes (surrogate-escaped bytes pass through)."""
    if isinstance(text, bytes):
        return list(text)
    return list(text.encode("utf-8", errors="surrogateescape"))


def detokenize(ids: Sequence[int], specials: bool = True) -> str:
    """Inverse of :func:`tokenize`; special ids render as their glyphs.

    With ``specials=False`` any special id is a decode error.
    """
    parts: list[str] = []
    buf = bytearray()
    for i in ids:
        i = int(i)
        if 0 <= i < N_BYTES:
            buf.append(i)
            continue
        if i not in SPECIAL_NAMES:
            raise DecodeError(f"token id {i} is outside the vocabulary")
        if not specials:
            raise DecodeError(f"unexpected special token {glyph(i)}")
        parts.append(buf.decode("utf-8", errors="surrogateescape"))
        buf.clear()
        parts.append(glyph(i))
    parts.append(buf.decode("utf-8", errors="surrogateescape"))
    return "".join(parts)


def token_len(text: str) -> int:
    return len(text.encode("utf-8", errors="surrogateescape"))
