"""Parameter-level finite-difference check shared by the model tests."""
import numpy as np

from vaelab import autodiff as ad


def param_grad_error(model, fn):
    """Worst central-difference error of fn() over every parameter of model."""
    return max(_check_inplace(p, fn) for p in model.parameters())


def _check_inplace(p, fn, h=1e-5):
    x = p.data.copy()
    _, (analytic,) = ad.gradients(fn, [p])
    worst = 0.0
    for i in np.ndindex(x.shape):
        p.data = x.copy()
        p.data[i] += h
        fp = float(fn().data)
        p.data = x.copy()
        p.data[i] -= h
        fm = float(fn().data)
        num = (fp - fm) / (2 * h)
        a = analytic[i]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
    p.data = x
    return worst
