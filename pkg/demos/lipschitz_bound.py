"""Local Lipschitz bound for one attention head versus sampled estimates.

Run: python demos/lipschitz_bound.py
"""
import numpy as np

from specguard.attention import AttentionWeights
from specguard.lipschitz import bound_is_valid, empirical_local_lipschitz, local_lipschitz_bound

rng = np.random.default_rng(7)
n, d, dh = 5, 4, 2
w = AttentionWeights(*(rng.standard_normal((d, dh)) for _ in range(3)))
X0 = rng.standard_normal((n, d))
X0 *= np.sqrt(d) / np.linalg.norm(X0, axis=1, keepdims=True)
anchor = np.linalg.norm(X0)

print(f"{'delta0':>7} {'quotient':>10} {'max |J|':>10} {'bound':>10} {'lemma':>10}")
for delta0 in (0.01, 0.1, 1.0):
    emp = empirical_local_lipschitz(X0, w, 0, delta0, 2000, seed=1)
    rowsum = local_lipschitz_bound(w, 0, n, anchor, delta0)
    lemma = local_lipschitz_bound(w, 0, n, anchor, delta0, aggregation="lemma")
    print(f"{delta0:7.2f} {emp.difference_quotient:10.4f} {emp.jacobian_norm:10.4f} {rowsum:10.2f} {lemma:10.2f}")

# the bound scales with ||X||^2, so it needs (N+1)(||X0|| + delta0)^2 >= 1:
# a lone token near the origin is linear with slope ||Wv|| but the bound vanishes
one = AttentionWeights(np.ones((1, 1)), np.ones((1, 1)), np.array([[2.0]]))
x = np.array([[0.05]])
print("premise holds:", bound_is_valid(1, 0.05, 0.05),
      "bound:", local_lipschitz_bound(one, 0, 1, 0.05, 0.05),
      "sampled:", empirical_local_lipschitz(x, one, 0, 0.05, 200).difference_quotient)
