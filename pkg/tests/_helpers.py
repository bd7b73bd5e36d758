"""Shared test utilities."""
import numpy as np
import torch


def fd_gradient_errors(loss_fn, params, n=32, eps=1e-6, seed=0):
    """Relative errors between autograd and central differences on ``n`` random scalar parameters.

    ``params`` are float64 leaf tensors; ``loss_fn()`` evaluates the scalar loss.
    """
    params = [p for p in params if p.requires_grad]
    grads = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    sizes = np.cumsum([0] + [p.numel() for p in params])
    rng = np.random.default_rng(seed)
    picks = rng.choice(sizes[-1], size=min(n, sizes[-1]), replace=False)
    errs = []
    for flat in picks:
        k = int(np.searchsorted(sizes, flat, side="right") - 1)
        p, j = params[k], int(flat - sizes[k])
        with torch.no_grad():
            old = p.view(-1)[j].item()
            p.view(-1)[j] = old + eps
            up = loss_fn().item()
            p.view(-1)[j] = old - eps
            down = loss_fn().item()
            p.view(-1)[j] = old
        fd = (up - down) / (2 * eps)
        an = grads[k].reshape(-1)[j].item()
        errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-7))
    return np.array(errs)
