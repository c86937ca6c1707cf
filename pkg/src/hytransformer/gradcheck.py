"""Gradient verification against central finite differences.

Two checkers:

``grad_check``
    Coordinate-wise: compares every gradient entry with the central
    difference (f(x+h·e_i) − f(x−h·e_i)) / 2h.  Exhaustive and great at
    localizing a bad formula, but only certifiable when gradient entries
    are not minuscule next to the loss — the difference of two nearly
    equal loss values cancels to noise when |∂f/∂x_i| ≪ |f| / h.  Use it
    for single-op tests with O(1)-scale gradients.

``grad_check_directional``
    Compares the derivative along random unit directions v, analytic
    g·v against (f(x+h·v) − f(x−h·v)) / 2h.  The compared quantity
    lives at gradient-norm scale rather than single-coordinate scale,
    which keeps the difference quotient far above the cancellation
    floor; this is the standard way to certify a full-model gradient to
    tight tolerances.

Both evaluate the difference quotient with the parameters promoted to
float64 — a float32 finite difference carries ~1e-3 relative noise and
cannot certify anything tighter — while the analytic side is taken in
whatever precision the caller is actually running.

Non-differentiable points (ReLU kinks, clip boundaries) must be avoided
by the caller's choice of inputs; dropout is fine as long as the closure
draws its mask from a fixed named stream, which makes f deterministic.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .autodiff import Tensor


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor] | dict[str, Tensor],
    h: float = 1e-5,
) -> float:
    """Return the max relative error between reverse-mode and numeric grads.

    ``f`` must rebuild its computation from the current parameter values on
    every call and return a scalar Tensor.  Parameter values are restored
    on exit.
    """
    if isinstance(params, dict):
        plist = list(params.values())
    else:
        plist = list(params)

    for p in plist:
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.values) if p.grad is None else p.grad.copy() for p in plist]

    saved = [p.values for p in plist]
    for p in plist:
        p.values = p.values.astype(np.float64)

    worst = 0.0
    try:
        for p, ga in zip(plist, analytic):
            flat = p.values.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                x0 = flat[i]
                step = h * max(abs(x0), 1.0)
                flat[i] = x0 + step
                fp = float(f().values)
                flat[i] = x0 - step
                fm = float(f().values)
                flat[i] = x0
                numeric = (fp - fm) / (2.0 * step)
                err = relative_error(float(gflat[i]), numeric)
                if err > worst:
                    worst = err
    finally:
        for p, v in zip(plist, saved):
            p.values = v
    return worst


def grad_check_directional(
    f: Callable[[], Tensor],
    params: Iterable[Tensor] | dict[str, Tensor],
    rng: np.random.Generator,
    h: float = 1e-3,
    n_directions: int = 20,
) -> float:
    """Max relative error of g·v against the central difference along
    ``n_directions`` random unit directions v over all parameters jointly.

    ``h`` is the step along the unit direction; each individual entry
    moves by about h/sqrt(total parameters), so the perturbation stays
    deep in the linear regime even for curvature-heavy models.
    """
    if isinstance(params, dict):
        plist = list(params.values())
    else:
        plist = list(params)

    for p in plist:
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.values) if p.grad is None else p.grad.copy() for p in plist]

    saved = [p.values for p in plist]
    for p in plist:
        p.values = p.values.astype(np.float64)
    base = [p.values.copy() for p in plist]

    def quotient(vs: list[np.ndarray], step: float) -> float:
        for p, x, v in zip(plist, base, vs):
            p.values = x + step * v
        fp = float(f().values)
        for p, x, v in zip(plist, base, vs):
            p.values = x - step * v
        fm = float(f().values)
        for p, x in zip(plist, base):
            p.values = x
        return (fp - fm) / (2.0 * step)

    worst = 0.0
    try:
        for _ in range(n_directions):
            vs = [rng.normal(0.0, 1.0, size=p.values.shape) for p in plist]
            norm = np.sqrt(sum(float(np.sum(v * v)) for v in vs))
            vs = [v / norm for v in vs]
            # Richardson extrapolation: cancels the h^2 truncation term
            numeric = (4.0 * quotient(vs, h / 2) - quotient(vs, h)) / 3.0
            along = float(sum(np.sum(g * v) for g, v in zip(analytic, vs)))
            err = relative_error(along, numeric)
            if err > worst:
                worst = err
    finally:
        for p, v in zip(plist, saved):
            p.values = v
    return worst
