import numpy as np
import pytest
import torch


def fd_gradient(fn, x, eps=1e-6, n_coords=None, rng=None):
    """Central finite differences of scalar ``fn`` w.r.t. ``x`` (all or sampled coordinates)."""
    flat = x.detach().reshape(-1)
    idx = np.arange(flat.numel())
    if n_coords is not None and n_coords < flat.numel():
        idx = (rng or np.random.default_rng(0)).choice(flat.numel(), n_coords, replace=False)
    grads = torch.zeros(len(idx), dtype=torch.float64)
    with torch.no_grad():
        for j, i in enumerate(idx):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(fn())
            flat[i] = orig - eps
            lo = float(fn())
            flat[i] = orig
            grads[j] = (hi - lo) / (2 * eps)
    return idx, grads


def check_gradients(module_fn, tensors, rtol=1e-3, n_coords=40, seed=0):
    """Compare autograd and finite-difference gradients of ``module_fn()`` w.r.t. each tensor.

    Returns the worst relative error ``|g_ad - g_fd| / |g_fd|`` over tensors.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        if t.grad is not None:
            t.grad = None
    out = module_fn()
    out.backward()
    worst = 0.0
    for t in tensors:
        auto = t.grad.detach().reshape(-1).clone()
        idx, fd = fd_gradient(module_fn, t.data, n_coords=n_coords, rng=rng)
        a = auto[idx]
        err = float((a - fd).norm() / max(float(fd.norm()), 1e-12))
        worst = max(worst, err)
    assert worst <= rtol, f"relative gradient error {worst:.2e} > {rtol}"
    return worst


def scalarize(out, seed=0):
    """Fixed random projection of a tensor onto a scalar."""
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(out.shape, generator=g, dtype=out.dtype)
    return (out * w).sum()


@pytest.fixture
def double():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    yield
