import numpy as np
import pytest

from wvae.rng import Rng
from wvae.tensor import Tensor


@pytest.fixture
def rng():
    return Rng(1234)


def finite_difference_grad(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of the scalar callable ``f`` wrt the array ``x``.

    ``x`` is perturbed in place and restored; ``f`` must read the current
    contents on every call.  The quotient is accumulated in float64.
    """
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def gradcheck(build_loss, arrays: dict, h: float = 1e-3, tol: float = 1e-3) -> float:
    """Compare analytic and finite-difference gradients for every input.

    ``build_loss`` receives one keyword Tensor per entry of ``arrays`` and
    must return a scalar Tensor.  Errors are norm-relative per input block;
    returns the worst one.
    """
    tensors = {k: Tensor(np.asarray(a, np.float32).copy(), requires_grad=True)
               for k, a in arrays.items()}
    loss = build_loss(**tensors)
    loss.backward()
    worst = 0.0
    for name, t in tensors.items():
        assert t.grad is not None, f"no gradient reached {name}"

        def f():
            fresh = {k: Tensor(tt.data) for k, tt in tensors.items()}
            return build_loss(**fresh).item()

        fd = finite_difference_grad(f, t.data, h)
        analytic = t.grad.astype(np.float64)
        denom = max(np.linalg.norm(fd), np.linalg.norm(analytic), 1e-12)
        rel = float(np.linalg.norm(analytic - fd) / denom)
        assert rel < tol, f"gradient mismatch for {name}: rel err {rel:.3e}"
        worst = max(worst, rel)
    return worst
