"""Central finite-difference gradient checks."""

import numpy as np

from .tensor import no_grad


class NonFiniteError(ArithmeticError):
    pass


def grad_check(f, inputs, h=1e-5, max_coords=None, rng=None):
    """Max relative error between analytic and numeric gradients.

    ``f`` maps the list ``inputs`` (Tensors with requires_grad) to a scalar
    Tensor. The error for coordinate i is |g - g~| / max(1, |g|, |g~|).
    ``max_coords`` samples at most that many coordinates per input, chosen
    by ``rng``; None checks every coordinate.
    """
    for x in inputs:
        x.grad = None
    out = f(inputs)
    if not out.is_finite():
        raise NonFiniteError(f"f returned non-finite value {out.data}")
    out.backward()
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for x in inputs:
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad
        flat = x.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = f(inputs).item()
                flat[i] = orig - h
                fm = f(inputs).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite f near coordinate {i}")
            numeric = (fp - fm) / (2 * h)
            g = analytic.reshape(-1)[i]
            err = abs(g - numeric) / max(1.0, abs(g), abs(numeric))
            worst = max(worst, err)
    return worst
