"""The single-head attention Jacobian, checked against finite differences.

Run: python demos/attention_jacobian.py
"""
import numpy as np

from specguard.attention import (AttentionWeights, attention_jacobian_block, attention_jacobian_full,
                                 finite_difference_jacobian, softmax_row_jacobian)

rng = np.random.default_rng(3)
n, d, dh = 4, 3, 2
w = AttentionWeights(*(rng.standard_normal((d, dh)) for _ in range(3)))
X = rng.standard_normal((n, d))

J = attention_jacobian_full(X, w)
fd = finite_difference_jacobian(X, w)
print("Jacobian shape", J.shape)
print("max |analytic - fd| / max |fd| =", np.max(np.abs(J - fd)) / np.max(np.abs(fd)))

# block (i, j): how output token i moves with input token j
print("block (0, 2):\n", attention_jacobian_block(X, w, 0, 0, 2))

# the softmax derivative is PSD and its rows sum to zero
p = np.array([0.5, 0.3, 0.2])
P = softmax_row_jacobian(p)
print("softmax Jacobian row sums", P.sum(axis=1), "eigenvalues", np.linalg.eigvalsh(P).round(4))
