"""Counter-based uniforms keyed by (seed, stream, step, row, position).

Each draw is a pure function of its key, so results do not depend on the order
in which positions are visited or on how a batch is split.
"""

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

COIN = 1
TOKEN = 2


def _mix(z: np.ndarray) -> np.ndarray:
    # splitmix64 finaliser
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def keyed_uniform(seed: int, stream: int, step: int, shape: tuple[int, ...]) -> np.ndarray:
    """Uniforms in [0, 1) of ``shape``; element ``idx`` is keyed by its index.

    The last axis is the position and the leading axes (flattened) the row.
    """
    with np.errstate(over="ignore"):
        h = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + _GOLDEN)
        h = _mix(h ^ (np.uint64(stream) * _GOLDEN))
        h = _mix(h ^ (np.uint64(step) * _M1))
        n = int(np.prod(shape)) if shape else 1
        counters = np.arange(n, dtype=np.uint64).reshape(shape)
        z = _mix((counters + np.uint64(1)) * _GOLDEN ^ h)
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
