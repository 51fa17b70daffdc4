"""Deterministic RNG stream derivation.

Every random draw in the engine comes from a stream addressed by a path of
small nonnegative integers under a 64-bit master seed. Identical
(master seed, path) pairs yield identical streams; distinct paths yield
independent streams. Streams are realized as counter-based Philox generators
keyed by numpy SeedSequence spawn keys, so stream identity never depends on
the order in which streams are created or consumed.
"""

from __future__ import annotations

import numpy as np

# Purpose labels used as the first path component under a run's base node.
# Each label owns one level of the derivation tree; never reuse a label for
# a different draw site.
INIT = 0        # state initializer, per iteration
PERTURB = 1     # parameter random walk, per (iteration, time)
PROPAGATE = 2   # latent process simulation, per (iteration, time)
RESAMPLE = 3    # resampling draws, per (iteration, time, block label)
ENKF_NOISE = 4  # perturbed-observation noise, per (iteration, time)
SWARM = 5       # initial parameter swarm draw, per replicate
LEARN = 6       # namespace for a learning run, per replicate
EVAL = 7        # namespace for metric evaluation, per (metric, replicate)
SIM_STEP = 8    # dataset simulation dynamics, per observation interval
SIM_MEASURE = 9  # dataset simulation measurement draws, per interval
PROBE = 10      # model validation probes


class RngNode:
    """One node of the seed-derivation tree.

    A node is an address, not a generator: ``child`` extends the path and
    ``generator()`` materializes a fresh Philox generator at the node's path.
    Call ``generator()`` once per logical draw site; two generators made at
    the same path produce identical output by design.
    """

    __slots__ = ("_seed", "_path")

    def __init__(self, master_seed: int, path: tuple = ()):
        if master_seed < 0:
            raise ValueError("master seed must be nonnegative")
        self._seed = int(master_seed)
        self._path = tuple(int(p) for p in path)

    @property
    def master_seed(self) -> int:
        return self._seed

    @property
    def path(self) -> tuple:
        return self._path

    def child(self, *labels: int) -> "RngNode":
        return RngNode(self._seed, self._path + tuple(int(x) for x in labels))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self._seed, spawn_key=self._path)
        return np.random.Generator(np.random.Philox(seq))

    def __repr__(self) -> str:
        return f"RngNode(seed={self._seed}, path={self._path})"


def as_node(rng) -> RngNode:
    """Coerce an int master seed or an existing node to an RngNode."""
    if isinstance(rng, RngNode):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RngNode(int(rng))
    raise TypeError(f"expected int seed or RngNode, got {type(rng).__name__}")
