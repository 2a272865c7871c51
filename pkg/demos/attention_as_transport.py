"""Attention weights are an entropic transport plan.

With cost C = -Q K^T and temperature sqrt(d_k), the row-normalised Gibbs
kernel exp(-C / sqrt(d_k)) equals the softmax attention matrix, and the
attention output is the barycentric projection of the values under it. This
script prints the largest deviation over a few random problems::

    python3 demos/attention_as_transport.py
"""

import numpy as np

from hetdistill.mhca import eot_equivalence_check


def main():
    rng = np.random.default_rng(0)
    for trial in range(5):
        d_k = int(rng.integers(2, 9))
        Q = rng.standard_normal((4, d_k))
        K = rng.standard_normal((7, d_k))
        V = rng.standard_normal((7, 3))
        rep = eot_equivalence_check(Q, K, V)
        print(f"d_k={d_k}: weights {rep.max_weight_deviation:.1e}, "
              f"projection {rep.max_projection_deviation:.1e}, epsilon {rep.epsilon_used:.3f}")


if __name__ == "__main__":
    main()
