"""Central finite-difference checks on a random subset of scalar parameters."""
import numpy as np
import torch

STEP = 1e-4
RTOL = 1e-3
# below this magnitude both sides count as zero; avoids 0/0 in the relative error
FLOOR = 1e-7


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), FLOOR)


def check_tensor_gradients(tensors, loss_fn, n_probe=64, seed=0, step=STEP, rtol=RTOL):
    """Compare autograd with central differences on up to ``n_probe`` entries of ``tensors``.

    All tensors must be float64 leaves with ``requires_grad``. Returns the
    worst relative error seen.
    """
    for t in tensors:
        if t.grad is not None:
            t.grad = None
    loss_fn().backward()
    analytic = [t.grad.detach().clone() for t in tensors]
    sizes = [t.numel() for t in tensors]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_probe, total), replace=False)
    bounds = np.cumsum([0] + sizes)
    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            ti = int(np.searchsorted(bounds, flat, side="right") - 1)
            t, idx = tensors[ti], int(flat - bounds[ti])
            view = t.view(-1)
            orig = view[idx].item()
            view[idx] = orig + step
            up = loss_fn().item()
            view[idx] = orig - step
            down = loss_fn().item()
            view[idx] = orig
            numeric = (up - down) / (2 * step)
            err = relative_error(analytic[ti].view(-1)[idx].item(), numeric)
            assert err <= rtol, (f"tensor {ti} entry {idx}: analytic "
                                 f"{analytic[ti].view(-1)[idx].item():.8g} vs numeric {numeric:.8g}")
            worst = max(worst, err)
    return worst


def check_parameter_gradients(module, loss_fn, n_probe=64, seed=0, step=STEP, rtol=RTOL):
    params = [p for p in module.parameters() if p.requires_grad]
    for p in params:
        assert p.dtype == torch.float64, "finite differences need float64 parameters"
    return check_tensor_gradients(params, loss_fn, n_probe, seed, step, rtol)
