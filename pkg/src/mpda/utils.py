"""Shared helpers: the library error root, seeded random streams and logging set-up.

Random numbers are always drawn from counter-based Philox generators. A run seed
is split into independent named streams, so that the field noise, the choice of
observed nodes and the observation noise never share a generator and the same
seed reproduces the same data whatever the thread count.
"""

import logging
from enum import IntEnum

import numpy as np

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


class MPDAError(Exception):
    """Root of every error raised by the library."""
    pass


class Stream(IntEnum):
    """Named random streams derived from a single run seed."""

    FIELD = 0
    SELECTION = 1
    NOISE = 2


def rng(seed: int, stream: Stream) -> np.random.Generator:
    """Return the generator of `stream` for the run `seed`.

    The stream id is appended to the seed sequence spawn key, which gives
    statistically independent Philox keys for the different streams.

    Args:
        seed: Run seed (non-negative integer).
        stream: Which stream to open.

    Returns:
        np.random.Generator: A freshly positioned generator.
    """
    sequence = np.random.SeedSequence(int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.Philox(sequence))


def configure_logging(verbosity: int = 0):
    """Configure the root logger for command-line use.

    Args:
        verbosity: 0 for warnings, 1 for info, 2 or more for debug.
    """
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbosity, logging.DEBUG)
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def relative_error(estimate: np.ndarray, reference: np.ndarray) -> float:
    """Max-norm relative difference between two vectors."""
    scale = max(float(np.max(np.abs(reference))), np.finfo(float).tiny)
    return float(np.max(np.abs(np.asarray(estimate) - np.asarray(reference)))) / scale
