"""Central finite-difference gradient checker shared by the test modules.

All checks run in float64 with step 1e-5 and require relative error below
1e-6 against the analytic gradients from the tape.
"""

import numpy as np

from armsight.autodiff import Graph, Tensor, zero_grad

STEP = 1e-5
TOL = 1e-6


def _loss_value(build_loss, arrays):
    g = Graph()
    loss = build_loss(g, [Tensor(a.copy()) for a in arrays])
    return loss.item()


def fd_gradcheck(build_loss, arrays, *, points=20, rng=None, step=STEP, tol=TOL):
    """build_loss(graph, tensors) must return a scalar tensor.

    Compares analytic gradients with central differences at up to `points`
    random coordinates of every input array; returns the worst relative
    error seen.
    """
    rng = rng or np.random.default_rng(1234)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), trainable=True) for a in arrays]
    g = Graph()
    loss = build_loss(g, tensors)
    zero_grad(tensors)
    g.backward(loss)
    analytic = [t.grad.copy() for t in tensors]

    worst = 0.0
    for i, base in enumerate(arrays):
        if base.size <= points:
            flat = np.arange(base.size)
        else:
            flat = rng.choice(base.size, size=points, replace=False)
        for fi in flat:
            idx = np.unravel_index(int(fi), base.shape)
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i][idx] += step
            minus[i][idx] -= step
            fd = (_loss_value(build_loss, plus) - _loss_value(build_loss, minus)) / (2 * step)
            an = float(analytic[i][idx])
            err = abs(an - fd)
            if err < 1e-9:  # both effectively zero
                continue
            rel = err / max(abs(an), abs(fd), 1e-8)
            worst = max(worst, rel)
    assert worst < tol, f"finite-difference mismatch: relative error {worst:.3e}"
    return worst


def weighted_sum(g, t, _rng=None):
    """Generic scalar head: sum(t * fixed pseudo-random weights). The weights
    depend only on the shape so repeated loss evaluations agree, and they
    keep per-input gradients O(1) for meaningful relative comparisons."""
    w = np.random.default_rng(9901).standard_normal(t.shape) + 0.2
    return g.sum(g.mul(t, Tensor(np.asarray(w, dtype=t.dtype))))
