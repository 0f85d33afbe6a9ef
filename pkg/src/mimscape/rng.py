"""Seeded RNG streams split by purpose.

Each run seed fans out into independent generators so that, for example,
changing the mask ratio never shifts the weight initialisation.
"""

import numpy as np

PURPOSES = {"init": 0, "order": 1, "mask": 2, "eval-mask": 3, "directions": 4, "data": 5}


def stream(seed: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), PURPOSES[purpose]]))
