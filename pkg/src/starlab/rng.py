"""Counter-based random streams.

Every random draw in this package comes from a Philox generator whose key is
derived from an experiment seed plus a tuple of stream labels (strings or
integers). Streams are independent of each other and of the order in which
they are opened, so parallel rollouts reproduce bit for bit.
"""

from __future__ import annotations

import hashlib
import threading

import numpy as np

__all__ = ["key_words", "derive_seed", "stream", "scratch_stream"]


def _encode(parts: tuple) -> bytes:
    chunks = []
    for part in parts:
        if isinstance(part, (bool, np.bool_)):
            raise TypeError("stream labels must be ints or strings")
        if isinstance(part, (int, np.integer)):
            chunks.append(b"i" + int(part).to_bytes(16, "little", signed=True))
        elif isinstance(part, str):
            raw = part.encode("utf-8")
            chunks.append(b"s" + len(raw).to_bytes(4, "little") + raw)
        else:
            raise TypeError(f"unsupported stream label type: {type(part)!r}")
    return b"".join(chunks)


def key_words(*parts: int | str) -> tuple[int, int]:
    """Hash stream labels to the two 64-bit words of a Philox key."""
    digest = hashlib.blake2b(_encode(parts), digest_size=16).digest()
    return (
        int.from_bytes(digest[:8], "little"),
        int.from_bytes(digest[8:], "little"),
    )


def derive_seed(*parts: int | str) -> int:
    """Collapse stream labels to a single unsigned 64-bit seed."""
    return key_words(*parts)[0]


def stream(*parts: int | str) -> np.random.Generator:
    """Open the deterministic generator addressed by the given labels."""
    return np.random.Generator(np.random.Philox(key=np.array(key_words(*parts), dtype=np.uint64)))


_SCRATCH = threading.local()


def scratch_stream(*parts: int | str) -> np.random.Generator:
    """stream(*parts) on shared per-thread scratch space.

    Draws match stream bit for bit, but the bit generator underneath is
    recycled: consume the returned generator before the next scratch_stream
    call on the same thread and never store it. Meant for hot loops that open
    thousands of short-lived streams.
    """
    w0, w1 = key_words(*parts)
    pack = getattr(_SCRATCH, "pack", None)
    if pack is None:
        bit = np.random.Philox(key=np.zeros(2, dtype=np.uint64))
        pack = (bit, bit.state)
        _SCRATCH.pack = pack
    bit, state = pack
    counters = state["state"]
    counters["key"][0] = w0
    counters["key"][1] = w1
    counters["counter"][:] = 0
    state["buffer_pos"] = 4
    state["has_uint32"] = 0
    state["uinteger"] = 0
    bit.state = state
    return np.random.Generator(bit)
