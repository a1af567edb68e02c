"""Named, independent random streams derived from one root seed."""

from __future__ import annotations

import numpy as np

# Stable stream ids; appending new names never perturbs existing streams.
STREAM_IDS = {
    "init": 0,
    "sampling": 1,
    "augment": 2,
    "shuffle": 3,
    "synth": 4,
    "eval": 5,
}


class RngStreams:
    """Hands out one ``np.random.Generator`` per purpose.

    Each stream is seeded from ``SeedSequence(root, spawn_key=(id,))`` so draws on
    one stream never shift another.
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            if name not in STREAM_IDS:
                raise KeyError(f"unknown rng stream {name!r}")
            ss = np.random.SeedSequence(self.seed, spawn_key=(STREAM_IDS[name],))
            self._streams[name] = np.random.Generator(np.random.PCG64(ss))
        return self._streams[name]

    def __getitem__(self, name: str) -> np.random.Generator:
        return self.stream(name)

    def state(self) -> dict:
        return {name: g.bit_generator.state for name, g in self._streams.items()}

    def set_state(self, state: dict) -> None:
        for name, st in state.items():
            self.stream(name).bit_generator.state = st


def seeded_rng(seed: int) -> RngStreams:
    return RngStreams(seed)
