import hashlib


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from any sequence of ints/strings.

    Independent of ``PYTHONHASHSEED`` and of call order, so per-stage and
    per-tree seeds do not depend on scheduling.
    """
    text = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")
