"""Central finite-difference verification of analytic backward passes.

The check projects the layer output onto a fixed random direction to get a
scalar loss, obtains analytic gradients from ``backward``, and compares
against central differences coordinate by coordinate. Relative error is
|a - f| / max(1, |a|, |f|), so it reads as plain relative error for O(1)
gradients and degrades gracefully to absolute error for tiny ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import _as_f64


@dataclass
class GradCheckReport:
    input_err: float
    param_errs: dict[str, float] = field(default_factory=dict)
    note: str = ""

    @property
    def max_err(self) -> float:
        errs = [self.input_err, *self.param_errs.values()]
        return max(errs) if errs else float("nan")

    def ok(self, tol: float) -> bool:
        return np.isfinite(self.max_err) and self.max_err < tol


def _rel(a: float, f: float) -> float:
    return abs(a - f) / max(1.0, abs(a), abs(f))


def _coords(arr: np.ndarray, max_coords: int | None, rng: np.random.Generator):
    idx = np.arange(arr.size)
    if max_coords is not None and arr.size > max_coords:
        idx = rng.choice(arr.size, size=max_coords, replace=False)
    return idx


def grad_check(layer, point: np.ndarray, eps: float = 1e-5, *,
               max_coords: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of ``layer`` at ``point`` with central FD.

    ``eps`` must stay within [1e-7, 1e-4] so truncation and cancellation
    errors both stay below the tolerances the tests assert. Non-finite
    losses are reported in the ``note`` field, never raised.
    """
    if not (1e-7 <= eps <= 1e-4):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-4]")
    point = _as_f64(point).copy()
    rng = np.random.default_rng(seed)

    y0, cache = layer.forward(point)
    proj = rng.normal(size=np.shape(y0)) if np.ndim(y0) else np.float64(1.0)

    def loss_at(x: np.ndarray) -> float:
        y, _ = layer.forward(x)
        return float((np.asarray(y) * proj).sum())

    base = float((np.asarray(y0) * proj).sum())
    if not np.isfinite(base):
        return GradCheckReport(input_err=float("inf"), note="non-finite loss at the expansion point")

    gx, gparams = layer.backward(cache, proj)

    def fd_versus(analytic: np.ndarray, value: np.ndarray, evaluate) -> float:
        worst = 0.0
        flat = value.reshape(-1)
        ga = np.asarray(analytic).reshape(-1)
        for i in _coords(flat, max_coords, rng):
            old = flat[i]
            flat[i] = old + eps
            fp = evaluate()
            flat[i] = old - eps
            fm = evaluate()
            flat[i] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return float("inf")
            worst = max(worst, _rel(float(ga[i]), (fp - fm) / (2 * eps)))
        return worst

    input_err = fd_versus(gx, point, lambda: loss_at(point))
    param_errs = {}
    for name, p in layer.params().items():
        param_errs[name] = fd_versus(gparams.get(name, np.zeros_like(p)), p,
                                     lambda: loss_at(point))
    note = "" if np.isfinite(input_err) and all(np.isfinite(v) for v in param_errs.values()) \
        else "non-finite loss during perturbation"
    return GradCheckReport(input_err=input_err, param_errs=param_errs, note=note)
