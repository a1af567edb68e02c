"""The numpy autodiff engine, checked against central differences.

Run: python demos/02_autodiff_and_gradients.py
"""

import numpy as np

from avbinaural import autodiff as ad
from avbinaural.checks import miniature_model_check, run_primitive_suite
from avbinaural.gradcheck import grad_check

rng = np.random.default_rng(0)

# A scalar function of two tensors; backward() fills .grad on every input.
a = ad.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
b = ad.Tensor(rng.standard_normal((4, 2)), requires_grad=True)
loss = ad.mean(ad.square(ad.tanh(ad.matmul(a, b))))
loss.backward()
print("loss", float(loss.data), " dL/da shape", a.grad.shape)

# grad_check promotes inputs to float64 and compares against (f(x+h) - f(x-h)) / 2h.
rep = grad_check(lambda a, b: ad.mean(ad.square(ad.tanh(ad.matmul(a, b)))), [a, b])
print("hand-made function: worst relative error", f"{rep.worst:.2e}", "passed" if rep.passed else "FAILED")

# The full suite: every primitive and every loss on five shapes each.
rows = run_primitive_suite(0)
worst = {}
for r in rows:
    worst[r.name] = max(worst.get(r.name, 0.0), r.worst)
for name, w in worst.items():
    print(f"  {name:<18s} {w:.1e}")

# A miniature network (both encoders, attention, AVAD decoder, both losses).
rep = miniature_model_check(0)
print(f"miniature model: worst {rep.worst:.2e}, {sum(rep.probed)} probes, {rep.skipped} skipped at kinks")
