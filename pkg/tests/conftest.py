import numpy as np
import pytest

from vtlab.tensor import Tensor


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return np.abs(a - b).max(initial=0.0) / denom


def numeric_grad(f, arrays, wrt=0, eps=1e-6):
    """Central finite differences of scalar-valued f w.r.t. arrays[wrt]."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    x = arrays[wrt]
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(*arrays)
        flat[i] = orig - eps
        lo = f(*arrays)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def check_grads(build_loss, arrays, tol=1e-4, eps=1e-6):
    """Compare autodiff grads of every input against finite differences.

    build_loss takes Tensors (requires_grad=True, float64) and returns a
    scalar Tensor; the same function evaluated on raw arrays must produce
    the same value via .data.
    """
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True)
               for a in arrays]
    loss = build_loss(*tensors)
    from vtlab.tensor import backward
    backward(loss)

    def scalar(*arrs):
        ts = [Tensor(a.copy()) for a in arrs]
        return float(build_loss(*ts).data)

    for i, t in enumerate(tensors):
        num = numeric_grad(scalar, arrays, wrt=i, eps=eps)
        got = t.grad if t.grad is not None else np.zeros_like(num)
        # rtol on the gradient's scale, falling back to atol for
        # (near-)zero true gradients where a pure ratio is ill-conditioned
        scale = max(np.abs(num).max(initial=0.0), np.abs(got).max(initial=0.0))
        diff = np.abs(got - num).max(initial=0.0)
        assert diff <= tol * (1.0 + scale), \
            f"input {i}: grad err {diff:.2e} > {tol} * (1 + {scale:.2e})"


@pytest.fixture
def rng():
    return np.random.default_rng(0)
