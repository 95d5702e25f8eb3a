import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def central_diff_check(fn, param, n_probe=6, eps=1e-4, seed=0):
    """Compare autograd with central differences on ``n_probe`` entries of ``param``.

    ``fn`` returns a scalar tensor; ``param`` is a float64 leaf tensor that
    ``fn`` reads.  Returns the worst relative error.
    """
    param.grad = None
    loss = fn()
    (grad,) = torch.autograd.grad(loss, param)
    gen = np.random.default_rng(seed)
    flat = param.data.view(-1)
    idx = gen.choice(flat.numel(), size=min(n_probe, flat.numel()), replace=False)
    worst = 0.0
    for i in idx:
        old = flat[i].item()
        with torch.no_grad():
            flat[i] = old + eps
            up = fn().item()
            flat[i] = old - eps
            down = fn().item()
            flat[i] = old
        numeric = (up - down) / (2 * eps)
        analytic = grad.reshape(-1)[i].item()
        denom = max(abs(numeric), abs(analytic), 1e-6)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst
