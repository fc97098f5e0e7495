"""Power iteration against the Jacobi oracle.

Run: python demos/power_iteration.py
"""
import numpy as np

from specguard.linalg import PowerIterState, power_iteration, svd_oracle
from specguard.verify import gapped_matrix

rng = np.random.default_rng(0)

# a random matrix: the estimate creeps up to the oracle value from below
a = rng.standard_normal((12, 9))
ref = svd_oracle(a)[0]
for k in (1, 5, 20, 100, 200):
    sigma, _ = power_iteration(a, PowerIterState.random(12, 9, np.random.default_rng(1)), k)
    print(f"{k:4d} iterations  sigma={sigma:.12f}  rel.err={(ref - sigma) / ref:.2e}")

# with a prescribed gap the vector error falls by s2/s1 per step; sigma's error
# is quadratic in it, so the fitted slope lands near 4 log(s2/s1)
for ratio in (0.9, 0.95, 0.97):
    b = gapped_matrix(rng, 20, 20, ratio)
    state = PowerIterState.random(20, 20, rng)
    errs = []
    for _ in range(50):
        sigma, state = power_iteration(b, state, 1)
        errs.append(1.0 - sigma)
    slope = np.polyfit(np.arange(5, 51), np.log(errs[4:50]), 1)[0]
    print(f"s2/s1={ratio}: fitted slope {slope:.3f}, 4 log(s2/s1) = {4 * np.log(ratio):.3f}")
