"""
Seed splitting
Every stochastic stage draws from a stream keyed by (master seed, index)
through the counter-based Philox generator, so results never depend on
the order in which parallel workers run.
"""
import numpy as np

from eegpipe.errors import ConfigError

# Stream indices for stages that are not per-subject or per-iteration
STREAM_SCRAMBLE = 2 ** 32
STREAM_BEHAVIOR = 2 ** 32 + 1
STREAM_BALANCE = 2 ** 33  # plus the comparison index


def derive_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for stream `index` under master `seed`"""
    if seed < 0 or index < 0 or seed >= 2 ** 64 or index >= 2 ** 64:
        raise ConfigError(f"seed {seed} and stream {index} must be in [0, 2**64)")
    return np.random.Generator(np.random.Philox(key=(int(seed) << 64) | int(index)))


def derive_seed(seed: int, index: int) -> int:
    """32-bit integer seed for APIs that take random_state"""
    return int(derive_rng(seed, index).integers(2 ** 32 - 1))
