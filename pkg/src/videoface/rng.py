"""Named random substreams.

All randomness in the package flows through numpy Generators keyed by
(root_seed, stream id, *context ints). Two runs with the same root seed
therefore draw identical values in every component, independently of call
order in other components, and resuming training at an epoch boundary
re-creates the exact generators without serializing generator state.
"""

import numpy as np

# stable stream ids; never renumber, only append
STREAM_CORPUS = 1
STREAM_BLUR = 2
STREAM_INIT = 3
STREAM_BATCH = 4
STREAM_JITTER = 5
STREAM_DROPOUT = 6
STREAM_MINING = 7
STREAM_OCCLUDE = 8

STAGE_INDEX = {"A": 1, "B": 2, "C": 3, "D": 4}


def substream(root_seed: int, stream: int, *context: int) -> np.random.Generator:
    """Generator for one named stream, fully determined by its key tuple."""
    key = (int(root_seed), int(stream)) + tuple(int(c) for c in context)
    return np.random.default_rng(key)
