"""Deterministic seed derivation.

A single user-facing seed fans out into independent sub-seeds for every
stochastic component (split, shuffle, augmentation, init, dropout). Each
sub-seed is a stable hash of the base seed plus a role string, so adding
or reordering consumers never shifts the streams of the others.
"""

import hashlib

_MASK = (1 << 63) - 1


def derive_seed(base_seed: int, *roles) -> int:
    """Derive a sub-seed from `base_seed` and a sequence of role tokens.

    Tokens may be strings or integers (e.g. ``derive_seed(s, "augment",
    epoch, index)``). The result is a non-negative 63-bit integer suitable
    for seeding ``numpy.random.default_rng`` or keras layer seeds.
    """
    key = ":".join([str(base_seed)] + [str(r) for r in roles])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & _MASK
