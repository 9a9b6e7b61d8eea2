"""Seeded splitmix64 random stream; the only randomness source in the package."""

import hashlib

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def derive_seed(seed: int, label: str) -> int:
    """Derive a sub-stream seed from (seed, purpose-label) by hashing."""
    payload = (seed & _MASK).to_bytes(8, "little") + label.encode("utf-8")
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Deterministic 64-bit generator; identical streams on every platform."""

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK
        z = self._state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK
        return z ^ (z >> 31)

    def _raw(self, n: int) -> np.ndarray:
        """n outputs as uint64, advancing the state exactly n steps."""
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GAMMA)
            out = _mix(np.uint64(self._state) + steps)
        self._state = (self._state + n * _GAMMA) & _MASK
        return out

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * 2.0**-53
        return lo + (hi - lo) * u

    def uniforms(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return lo + (hi - lo) * u

    def normals(self, n: int, std: float = 1.0) -> np.ndarray:
        """Box-Muller pairs; u1 shifted into (0, 1] so log never sees zero."""
        m = (n + 1) // 2
        raw = self._raw(2 * m)
        u1 = ((raw[:m] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (raw[m:] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return std * out

    def normal(self, std: float = 1.0) -> float:
        return float(self.normals(1, std)[0])

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi), rejection-sampled to avoid modulo bias."""
        span = hi - lo
        if span <= 0:
            raise ValueError(f"randint: empty range [{lo}, {hi})")
        limit = (_MASK + 1) - (_MASK + 1) % span
        while True:
            v = self.next_u64()
            if v < limit:
                return lo + v % span

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i + 1)
            items[i], items[j] = items[j], items[i]

    def spawn(self, label: str) -> "SplitMix64":
        return SplitMix64(derive_seed(self._state, label))
