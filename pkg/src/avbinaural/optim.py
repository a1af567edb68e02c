"""Adam with per-group learning rates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

IMAGE_LR = 5e-5
AUDIO_LR = 5e-4


@dataclass
class ParamGroup:
    name: str
    params: list[Tensor]
    lr: float


@dataclass
class Adam:
    groups: list[ParamGroup]
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for p in self.parameters():
            self.m.setdefault(id(p), np.zeros_like(p.data))
            self.v.setdefault(id(p), np.zeros_like(p.data))

    def parameters(self):
        for g in self.groups:
            yield from g.params

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def step(self) -> None:
        missing = [i for i, p in enumerate(self.parameters()) if p.grad is None]
        if missing:
            raise RuntimeError(f"adam_step: {len(missing)} parameter(s) have no gradient")
        self.step_count += 1
        b1, b2 = self.betas
        t = self.step_count
        c1 = 1 - b1**t
        c2 = 1 - b2**t
        for group in self.groups:
            for p in group.params:
                g = p.grad.astype(p.dtype, copy=False)
                m = self.m[id(p)]
                v = self.v[id(p)]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * (g * g)
                mhat = m / c1
                vhat = v / c2
                p.data -= (group.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)
        self.zero_grad()

    def state_arrays(self, names: dict[int, str]) -> dict[str, np.ndarray]:
        """Moment arrays keyed by ``adam.m/<name>`` and ``adam.v/<name>``."""
        out = {}
        for p in self.parameters():
            out[f"adam.m/{names[id(p)]}"] = self.m[id(p)]
            out[f"adam.v/{names[id(p)]}"] = self.v[id(p)]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], names: dict[int, str], step_count: int) -> None:
        for p in self.parameters():
            self.m[id(p)][...] = arrays[f"adam.m/{names[id(p)]}"]
            self.v[id(p)][...] = arrays[f"adam.v/{names[id(p)]}"]
        self.step_count = step_count


def adam_step(optimizer: Adam) -> None:
    optimizer.step()
