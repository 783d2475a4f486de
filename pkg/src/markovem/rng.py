"""Counter-based random streams.

A draw is addressed by ``(seed, purpose, *coordinates)``.  Each address maps to
its own Philox key through ``numpy.random.SeedSequence``, so the value of a
draw never depends on which worker produced it or in what order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# purposes
ESTEP = 1
FORWARD = 2
BRIDGE = 3
GENERATE = 4
MASK = 5
INITIAL = 6


@dataclass(frozen=True)
class RngStream:
    seed: int

    def generator(self, purpose: int, *coords: int) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed) & 0xFFFFFFFFFFFFFFFF,
                                    spawn_key=(int(purpose), *(int(c) for c in coords)))
        return np.random.Generator(np.random.Philox(key=ss.generate_state(2, np.uint64)))

    def uniforms(self, shape, purpose: int, *coords: int) -> np.ndarray:
        """Uniform draws on [0, 1) laid out in C order over ``shape``.

        Because Philox fills in C order, the leading ``r`` blocks of a
        ``(R, ...)`` request are the same for every ``R >= r``.
        """
        return self.generator(purpose, *coords).random(shape)
