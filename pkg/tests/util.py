"""Shared test helpers: finite-difference gradient checking and tiny builders."""

import numpy as np

from adapterforge.rng import Stream, derive
from adapterforge.tensor import Tensor, _accum, backward


def proj_loss(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar <out, weights>: makes every output coordinate observable."""
    loss = Tensor(np.float32((out.data.astype(np.float64) * weights).sum()))

    def grad_fn(g):
        _accum(out, (float(g) * weights).astype(np.float32))

    loss._parents = (out,)
    loss._backward = grad_fn
    return loss


def rand_arrays(shapes: dict, seed: int, scale=1.0) -> dict:
    rng = Stream(derive(seed, 0x7E57))
    out = {}
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        out[name] = (scale * rng.normal_array(n)).astype(np.float32).reshape(shape)
    return out


def check_grads(make_out, arrays, seed=0, samples=40, h=1e-2, tol=1e-2, floor=1e-3):
    """Compare reverse-mode grads against central finite differences.

    ``make_out(tensors) -> Tensor`` must be a pure function of its inputs
    (fresh BN stats etc. on every call).  Returns the number of coordinates
    actually compared.
    """
    rng = np.random.default_rng(seed)
    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
    out = make_out(tensors)
    weights = rng.standard_normal(out.shape if out.shape else ()).astype(np.float64)
    if out.shape == ():
        weights = np.float64(1.0)
    backward(proj_loss(out, weights))

    def f(name, idx, delta):
        arrs = {k: v.copy() for k, v in arrays.items()}
        arrs[name].flat[idx] += delta
        t = {k: Tensor(v) for k, v in arrs.items()}
        return float((make_out(t).data.astype(np.float64) * weights).sum())

    checked = 0
    for name, base in arrays.items():
        grad = tensors[name].grad
        assert grad is not None, f"no grad for {name}"
        n_coords = min(samples, base.size)
        coords = rng.choice(base.size, size=n_coords, replace=False)
        for idx in coords:
            num = (f(name, idx, h) - f(name, idx, -h)) / (2 * h)
            ana = float(grad.flat[idx])
            denom = max(abs(num), abs(ana), floor)
            assert abs(num - ana) / denom <= tol, (
                f"{name}[{idx}]: analytic {ana:.6g} vs numeric {num:.6g}")
            checked += 1
    return checked
