"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, record_pieces


@dataclass
class GradCheckReport:
    max_rel_error: list[float] = field(default_factory=list)
    tol: float = 1e-3
    non_finite: bool = False
    message: str = ""
    skipped: int = 0  # probes discarded because x +- h straddles a kink
    probed: list[int] = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)

    @property
    def passed(self) -> bool:
        return not self.non_finite and self.worst <= self.tol


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-4,
    tol: float = 1e-3,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    kink_aware: bool = False,
) -> GradCheckReport:
    """Compare ``backward`` against central differences for every input.

    ``fn(*inputs)`` must return a scalar tensor and be deterministic. Inputs are
    promoted to float64 in place. ``max_entries`` bounds how many elements per
    input are probed (chosen at random without replacement).

    With ``kink_aware`` a probe is discarded when the forward passes at x - h,
    x and x + h do not all sit on the same smooth piece of every relu, abs,
    phase wrap or atan2 branch. Such a probe falls back to a one-sided
    second-order difference on the clean side, and is only discarded (another
    element is probed in its place) when both sides cross a kink.
    """
    report = GradCheckReport(tol=tol)
    for t in inputs:
        t.data = t.data.astype(np.float64)
        t.requires_grad = True
        t.grad = None
    loss = fn(*inputs)
    if not np.all(np.isfinite(loss.data)):
        report.non_finite = True
        report.message = "non-finite loss"
        return report
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    rng = rng or np.random.default_rng(0)

    def evaluate():
        if not kink_aware:
            return float(fn(*inputs).data), None
        with record_pieces() as log:
            val = float(fn(*inputs).data)
        return val, log

    def same_piece(a, b):
        return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))

    f0, base = evaluate()
    for t, g_ad in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        order = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            order = rng.permutation(flat.size)
        want = flat.size if max_entries is None else min(max_entries, flat.size)
        worst, used = 0.0, 0
        for k in order:
            if used >= want:
                break
            orig = flat[k]

            def at(offset):
                flat[k] = orig + offset
                out = evaluate()
                flat[k] = orig
                return out

            fp, plus = at(h)
            fm, minus = at(-h)
            ok_p = not kink_aware or same_piece(base, plus)
            ok_m = not kink_aware or same_piece(base, minus)
            if ok_p and ok_m:
                g_fd = (fp - fm) / (2 * h)
            else:
                # one-sided second-order stencil on the side that stays on the base piece
                g_fd = None
                for sgn, ok, f1 in ((1.0, ok_p, fp), (-1.0, ok_m, fm)):
                    if not ok:
                        continue
                    f2, far = at(2 * sgn * h)
                    if same_piece(base, far):
                        g_fd = sgn * (4 * f1 - f2 - 3 * f0) / (2 * h)
                        break
                if g_fd is None:
                    report.skipped += 1
                    continue
            used += 1
            ga = float(g_ad.reshape(-1)[k])
            if not (np.isfinite(g_fd) and np.isfinite(ga)):
                report.non_finite = True
                report.message = "non-finite gradient"
                continue
            err = abs(ga - g_fd) / (abs(ga) + abs(g_fd) + 1e-12)
            worst = max(worst, err)
        report.max_rel_error.append(worst)
        report.probed.append(used)
    for t in inputs:
        t.grad = None
    return report
