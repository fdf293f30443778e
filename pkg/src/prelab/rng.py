"""Named random streams.

Every consumer of randomness draws from ``default_rng([seed, tag])`` with its own
tag, so equal integer seeds in different places never yield the same numbers
(for example an oracle prompt that silently equals the first vocabulary rows).
"""

import numpy as np

_TAGS = {
    "backbone": 0,
    "oracle": 1,
    "dataset": 2,
    "prompt_init": 3,
    "kshot": 4,
    "shuffle": 5,
    "encoder_init": 6,
    "dropout": 7,
    "gradcheck": 8,
}


def stream(seed, purpose):
    if purpose not in _TAGS:
        raise KeyError(f"unknown random stream {purpose!r}")
    return np.random.default_rng([int(seed), _TAGS[purpose]])
