"""Counter-based random streams keyed by (seed, *tags).

Every source of randomness in the package draws from a named stream rather
than a shared sequential generator, so per-sample randomness does not depend
on evaluation order or worker scheduling. Streams are Philox generators whose
128-bit key is a SHA-256 digest of the canonical tag string, which is stable
across platforms and Python versions.
"""

import hashlib

import numpy as np


def stream(*parts) -> np.random.Generator:
    """Return an independent, deterministic generator for the given key parts.

    Parts are canonicalized with str(); pass the run seed first by convention,
    e.g. ``stream(seed, "aug", shape_id, view, epoch, "a")``.
    """
    canon = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(canon.encode("utf-8")).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(*parts) -> int:
    """Collapse key parts into a stable 63-bit integer seed."""
    canon = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(canon.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)
