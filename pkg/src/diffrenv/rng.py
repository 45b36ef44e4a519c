"""Counter-based random numbers.

Every random quantity in the package is a pure function of a 64-bit key and a
counter, so any trajectory or environment cell can be regenerated on demand
without carrying generator state around.  Keys are derived by hashing the
master seed together with stream identifiers (environment index, trajectory
index, cell coordinates, purpose tag).

The mixing function is the SplitMix64 finalizer.
"""
import numpy as np
from numba import njit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0

# purpose tags
TAG_ENV = np.uint64(0x454E5649524F4E31)
TAG_TRAJ = np.uint64(0x5452414A45435431)
TAG_NOISE = np.uint64(0x01)
TAG_BRIDGE_TEST = np.uint64(0x02)
TAG_LAMBDA = np.uint64(0x03)
TAG_COUPLING = np.uint64(0x04)
TAG_SIGMA = np.uint64(0x05)


@njit(cache=True, inline="always")
def mix64(z):
    z = np.uint64(z)
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True, inline="always")
def derive(key, value):
    """Child key of ``key`` for an integer ``value`` (negative values wrap)."""
    return mix64(np.uint64(key) ^ mix64(np.uint64(value) * GOLDEN + GOLDEN))


@njit(cache=True, inline="always")
def uniform(key, counter):
    """Uniform draw in the open interval (0, 1)."""
    z = mix64(np.uint64(key) + (np.uint64(counter) + np.uint64(1)) * GOLDEN)
    return (np.float64(z >> np.uint64(11)) + 0.5) * _INV53


@njit(cache=True, inline="always")
def normal(key, counter):
    """Standard normal draw (Box-Muller, cosine branch)."""
    c = np.uint64(counter) * np.uint64(2)
    u1 = uniform(key, c)
    u2 = uniform(key, c + np.uint64(1))
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


@njit(cache=True)
def env_key(seed, env_index):
    return derive(mix64(np.uint64(seed) ^ TAG_ENV), env_index)


@njit(cache=True)
def trajectory_key(seed, env_index, traj_index):
    k = derive(mix64(np.uint64(seed) ^ TAG_TRAJ), env_index)
    return derive(k, traj_index)


@njit(cache=True)
def stream_key(seed, env_index, traj_index, tag):
    return derive(trajectory_key(seed, env_index, traj_index), tag)


@njit(cache=True)
def uniform_array(key, n):
    out = np.empty(n)
    for i in range(n):
        out[i] = uniform(key, i)
    return out


@njit(cache=True)
def normal_array(key, n):
    out = np.empty(n)
    for i in range(n):
        out[i] = normal(key, i)
    return out


def seed_to_u64(seed):
    """Map any Python int (possibly negative or > 2**64) to a uint64 seed."""
    return np.uint64(int(seed) % (1 << 64))


class CounterStream:
    """Sequential view of a counter-based stream for Python-level callers.

    Useful where an API takes an ``rng``: the stream draws from fixed
    (key, counter) pairs and advances the counter.
    """

    def __init__(self, key, start=0):
        self.key = np.uint64(key)
        self.counter = int(start)

    def normal(self, size):
        out = np.array([normal(self.key, self.counter + i) for i in range(size)])
        self.counter += size
        return out

    def uniform(self, size):
        out = np.array([uniform(self.key, self.counter + i) for i in range(size)])
        self.counter += size
        return out
