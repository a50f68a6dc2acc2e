"""Counter-based random streams keyed by (seed, stream, type, particle).

Every particle owns a fixed-width block of a Philox stream, so increasing the
particle count appends new blocks and never reshuffles earlier draws.
"""
import numpy as np
from scipy.special import ndtri

STREAMS = {
    "increments": 0,
    "initial": 1,
    "atlas": 2,
    "bootstrap": 3,
    "rivals": 4,
    "subsample": 5,
    "probes": 6,
}

_TWO_M53 = 2.0 ** -53


def _philox(seed, stream, index):
    if isinstance(stream, str):
        stream = STREAMS[stream]
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream), int(index)))
    key = ss.generate_state(2, dtype=np.uint64)
    return np.random.Philox(key=key)


def uniform_blocks(seed, stream, index, count, width):
    """Uniforms on (0, 1) of shape (count, width); row i is particle i's block."""
    padded = 4 * (-(-max(width, 1) // 4))
    raw = _philox(seed, stream, index).random_raw(count * padded)
    raw = np.asarray(raw, dtype=np.uint64).reshape(count, padded)[:, :width]
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO_M53


def normal_blocks(seed, stream, index, count, width):
    return ndtri(uniform_blocks(seed, stream, index, count, width))


def generator(seed, stream, index=0):
    """A numpy Generator on a derived stream, for auxiliary draws (bootstrap, probes)."""
    return np.random.Generator(_philox(seed, stream, index))
