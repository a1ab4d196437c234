"""Riemannian metric fields on the extended unit ball.

A :class:`MetricField` bundles pointwise metric evaluation, its first
derivatives, and a little metadata (domain radius, regularity tag). The
built-in families are all conformal, ``g(x) = c(x) I``, with analytic
gradients; custom metrics can be supplied through callables, in which case
derivatives fall back to central differences.

Conventions
-----------
* points are ndarrays of shape ``(..., 2)``
* ``metric(x)`` has shape ``(..., 2, 2)``
* ``metric_deriv(x)`` has shape ``(..., 2, 2, 2)`` indexed ``[m, i, j]`` for
  the partial derivative of ``g_ij`` along coordinate ``m``
* ``christoffel(x)`` has shape ``(..., 2, 2, 2)`` indexed ``[i, j, k]``
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _fast

__all__ = [
    "MetricField",
    "euclidean",
    "gaussian_conformal",
    "constant_curvature",
    "ck_conformal",
    "from_conformal_factor",
    "from_callables",
]

# extra radius beyond the unit ball on which the metric must stay usable;
# rays may be integrated slightly outside during table building and tests
DEFAULT_MARGIN = 0.2

FD_STEP = 1e-5  # central-difference step for derivative fallbacks

_EYE = np.eye(2)


@dataclass
class MetricField:
    """A 2D metric field on the ball of radius ``radius + margin``."""

    name: str
    eval_fn: Callable[[np.ndarray], np.ndarray]
    deriv_fn: Callable[[np.ndarray], np.ndarray]
    radius: float = 1.0
    margin: float = DEFAULT_MARGIN
    regularity: float = math.inf
    family_code: int = -1
    params: np.ndarray = field(default_factory=lambda: np.zeros(4))
    conformal: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]] | None = None

    @property
    def dimension(self) -> int:
        return 2

    @property
    def extended_radius(self) -> float:
        return self.radius + self.margin

    @property
    def has_fast_path(self) -> bool:
        return self.family_code >= 0

    def metric(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.eval_fn(x)

    def metric_deriv(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.deriv_fn(x)

    def inverse_metric(self, x: np.ndarray) -> np.ndarray:
        return np.linalg.inv(self.metric(x))

    def sqrt_det(self, x: np.ndarray) -> np.ndarray:
        return np.sqrt(np.linalg.det(self.metric(x)))

    def norm(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """|v|_g at x; v shape (..., 2)."""
        g = self.metric(x)
        return np.sqrt(np.einsum("...ij,...i,...j->...", g, v, v))

    def conorm(self, x: np.ndarray, xi: np.ndarray) -> np.ndarray:
        """|xi|_g for covectors: sqrt(g^{-1}[xi, xi])."""
        gi = self.inverse_metric(x)
        return np.sqrt(np.einsum("...ij,...i,...j->...", gi, xi, xi))

    def inner(self, x: np.ndarray, v: np.ndarray, w: np.ndarray) -> np.ndarray:
        g = self.metric(x)
        return np.einsum("...ij,...i,...j->...", g, v, w)

    def unit(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """v rescaled to unit g-length."""
        n = self.norm(x, v)
        return v / n[..., None]

    def christoffel(self, x: np.ndarray) -> np.ndarray:
        """Gamma^i_{jk} from the metric derivatives."""
        g_inv = self.inverse_metric(x)
        dg = self.metric_deriv(x)  # [..., m, i, j]
        # Gamma_{l jk} = (d_j g_lk + d_k g_lj - d_l g_jk) / 2
        low = 0.5 * (np.einsum("...jlk->...ljk", dg)
                     + np.einsum("...klj->...ljk", dg)
                     - np.einsum("...ljk->...ljk", dg))
        return np.einsum("...il,...ljk->...ijk", g_inv, low)

    def geodesic_accel(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """-Gamma^i_{jk} v^j v^k, vectorized."""
        if self.conformal is not None:
            c, dc = self.conformal(x)
            gv = np.einsum("...i,...i->...", dc, v)
            vv = np.einsum("...i,...i->...", v, v)
            return (-0.5 / c)[..., None] * (
                2.0 * gv[..., None] * v - vv[..., None] * dc)
        gamma = self.christoffel(x)
        return -np.einsum("...ijk,...j,...k->...i", gamma, v, v)

    def conformal_factor(self, x: np.ndarray) -> np.ndarray:
        if self.conformal is None:
            raise ValueError(f"metric {self.name!r} is not conformal")
        return self.conformal(np.asarray(x, dtype=float))[0]


def _conformal_field(name: str, c_fn, grad_fn, *, regularity=math.inf,
                     family_code=-1, params=None) -> MetricField:
    def eval_fn(x):
        c = c_fn(x)
        return c[..., None, None] * _EYE

    def deriv_fn(x):
        dc = grad_fn(x)
        return dc[..., :, None, None] * _EYE

    def conformal(x):
        return c_fn(x), grad_fn(x)

    return MetricField(
        name=name, eval_fn=eval_fn, deriv_fn=deriv_fn,
        regularity=regularity, family_code=family_code,
        params=np.zeros(4) if params is None else np.asarray(params, float),
        conformal=conformal)


def euclidean() -> MetricField:
    """The flat metric; every geodesic quantity has a closed form."""
    return _conformal_field(
        "euclidean",
        lambda x: np.ones(x.shape[:-1]),
        lambda x: np.zeros(x.shape),
        family_code=_fast.FAMILY_EUCLIDEAN)


def gaussian_conformal(eps: float) -> MetricField:
    """g = (1 + eps * exp(-|x|^2)) I; simple for moderate eps >= 0."""
    def c_fn(x):
        return 1.0 + eps * np.exp(-np.sum(x * x, axis=-1))

    def grad_fn(x):
        e = eps * np.exp(-np.sum(x * x, axis=-1))
        return -2.0 * x * e[..., None]

    return _conformal_field(
        f"gaussian_conformal(eps={eps:g})", c_fn, grad_fn,
        family_code=_fast.FAMILY_CONF_GAUSS, params=[eps, 0.0, 0.0, 0.0])


def constant_curvature(curv: float) -> MetricField:
    """g = 4 / (1 + curv * |x|^2)^2 I, Gauss curvature == curv.

    For curv > 1 the unit ball contains conjugate points (and the boundary
    loses convexity), which makes this the stock non-simple example.
    """
    def c_fn(x):
        w = 1.0 + curv * np.sum(x * x, axis=-1)
        return 4.0 / (w * w)

    def grad_fn(x):
        w = 1.0 + curv * np.sum(x * x, axis=-1)
        return (-16.0 * curv / (w * w * w))[..., None] * x

    return _conformal_field(
        f"constant_curvature(curv={curv:g})", c_fn, grad_fn,
        family_code=_fast.FAMILY_CONST_CURV, params=[curv, 0.0, 0.0, 0.0])


def ck_conformal(k: int, eps: float, center=(0.3, 0.0)) -> MetricField:
    """g = (1 + eps * max(0, 1-|x-x0|^2)^(k+1/2)) I.

    Exactly C^k across the bump edge |x - x0| = 1 and smooth elsewhere; the
    regularity tag is k.
    """
    x0 = np.asarray(center, dtype=float)

    def c_fn(x):
        u = 1.0 - np.sum((x - x0) ** 2, axis=-1)
        return 1.0 + eps * np.where(u > 0.0, u, 0.0) ** (k + 0.5)

    def grad_fn(x):
        d = x - x0
        u = 1.0 - np.sum(d * d, axis=-1)
        up = np.where(u > 0.0, u, 0.0)
        s = -2.0 * eps * (k + 0.5) * up ** (k - 0.5)
        return s[..., None] * d

    return _conformal_field(
        f"ck_conformal(k={k}, eps={eps:g})", c_fn, grad_fn,
        regularity=float(k),
        family_code=_fast.FAMILY_CONF_CK,
        params=[eps, float(k), x0[0], x0[1]])


def from_conformal_factor(name: str, c_fn, grad_fn=None, *,
                          regularity=math.inf) -> MetricField:
    """Custom conformal metric; gradient by central differences if omitted."""
    if grad_fn is None:
        def grad_fn(x):
            out = np.zeros(x.shape)
            for m in range(2):
                dx = np.zeros(2)
                dx[m] = FD_STEP
                out[..., m] = (c_fn(x + dx) - c_fn(x - dx)) / (2 * FD_STEP)
            return out

    return _conformal_field(name, c_fn, grad_fn, regularity=regularity)


def from_callables(name: str, eval_fn, deriv_fn=None, *,
                   regularity=math.inf) -> MetricField:
    """Fully general metric; derivatives by central differences if omitted."""
    if deriv_fn is None:
        def deriv_fn(x):
            x = np.asarray(x, dtype=float)
            out = np.zeros(x.shape[:-1] + (2, 2, 2))
            for m in range(2):
                dx = np.zeros(2)
                dx[m] = FD_STEP
                out[..., m, :, :] = (
                    eval_fn(x + dx) - eval_fn(x - dx)) / (2 * FD_STEP)
            return out

    return MetricField(name=name, eval_fn=eval_fn, deriv_fn=deriv_fn,
                       regularity=regularity)
