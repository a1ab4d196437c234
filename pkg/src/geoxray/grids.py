"""Grid containers and radial cutoff functions.

ScalarGrid holds samples f(origin + (i, j) * spacing) in an (nx, ny) array,
x index first. SinogramGrid holds fan-beam samples over boundary angle theta
(uniform on [0, 2pi)) and inward direction angle alpha (midpoint rule on
(-pi/2, pi/2), measured from the inner g-normal).

Cutoffs are polynomial smoothsteps: C^order junctions, identically 0/1
outside the transition annulus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

__all__ = [
    "ScalarGrid",
    "SinogramGrid",
    "RadialCutoff",
    "CutoffSpec",
    "smoothstep_coefficients",
    "smoothstep",
    "bilinear_sample",
]


@lru_cache(maxsize=None)
def smoothstep_coefficients(order: int) -> np.ndarray:
    """Coefficients a_m of S(u) = u^(order+1) * sum_m a_m u^m.

    S is the unique degree 2*order+1 polynomial with S(0)=0, S(1)=1 and
    vanishing derivatives up to `order` at both ends.
    """
    if order < 0:
        raise ValueError("order must be >= 0")
    q = order
    return np.array([
        math.comb(q + m, m) * math.comb(2 * q + 1, q - m) * (-1.0) ** m
        for m in range(q + 1)])


def smoothstep(u, order: int = 7):
    """Vectorized smoothstep on [0, 1], clamped outside."""
    coef = smoothstep_coefficients(order)
    u = np.asarray(u, dtype=float)
    uc = np.clip(u, 0.0, 1.0)
    acc = np.zeros_like(uc)
    for m in range(order, -1, -1):
        acc = acc * uc + coef[m]
    return acc * uc ** (order + 1)


@dataclass(frozen=True)
class RadialCutoff:
    """1 for r <= r_one, 0 for r >= r_zero, C^order smoothstep between."""

    r_one: float
    r_zero: float
    order: int = 7

    def __post_init__(self):
        if not 0.0 <= self.r_one < self.r_zero:
            raise ValueError(
                f"cutoff radii must satisfy 0 <= r_one < r_zero, got "
                f"({self.r_one}, {self.r_zero})")

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        u = (self.r_zero - r) / (self.r_zero - self.r_one)
        return smoothstep(u, self.order)

    def eval_points(self, points):
        points = np.asarray(points, dtype=float)
        return self(np.sqrt(np.sum(points * points, axis=-1)))

    @property
    def coefficients(self) -> np.ndarray:
        return smoothstep_coefficients(self.order)


@dataclass(frozen=True)
class CutoffSpec:
    """The cutoff family of one experiment.

    psi: evaluation-side cutoff (multiplies the operator output in x),
    phi: source-side cutoff (multiplies f), both radial in |x|;
    chi: near-diagonal cutoff in the kernel offset |z|;
    zeta: rising frequency cutoff, 0 for |xi| <= zeta_lo, 1 for >= zeta_hi.
    """

    psi: RadialCutoff
    phi: RadialCutoff
    chi: RadialCutoff
    zeta_lo: float
    zeta_hi: float
    order: int = 7

    def __post_init__(self):
        if not 0.0 < self.zeta_lo < self.zeta_hi:
            raise ValueError("zeta radii must satisfy 0 < lo < hi")

    def zeta(self, s):
        s = np.asarray(s, dtype=float)
        u = (s - self.zeta_lo) / (self.zeta_hi - self.zeta_lo)
        return smoothstep(u, self.order)

    @classmethod
    def default(cls, *, fourier_side: float = 4.4, inner: float = 0.75,
                outer: float = 0.95, order: int = 7) -> "CutoffSpec":
        """Defaults tied to the padded Fourier box of side `fourier_side`:
        the frequency cutoff rises between 2 and 4 lattice spacings."""
        dxi = 2.0 * math.pi / fourier_side
        return cls(
            psi=RadialCutoff(inner, outer, order),
            phi=RadialCutoff(inner, outer, order),
            chi=RadialCutoff(0.25, 0.5, order),
            zeta_lo=2.0 * dxi,
            zeta_hi=4.0 * dxi,
            order=order)

    @property
    def region_radius(self) -> float:
        """Radius of the region where both psi and phi are identically 1."""
        return min(self.psi.r_one, self.phi.r_one)


def bilinear_sample(values: np.ndarray, origin, spacing: float,
                    points: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of node values, zero outside the grid."""
    points = np.asarray(points, dtype=float)
    sx = (points[..., 0] - origin[0]) / spacing
    sy = (points[..., 1] - origin[1]) / spacing
    ix = np.floor(sx).astype(np.int64)
    iy = np.floor(sy).astype(np.int64)
    tx = sx - ix
    ty = sy - iy
    nx, ny = values.shape
    out = np.zeros(points.shape[:-1])
    for di, dj, wgt in (
        (0, 0, (1 - tx) * (1 - ty)),
        (1, 0, tx * (1 - ty)),
        (0, 1, (1 - tx) * ty),
        (1, 1, tx * ty),
    ):
        jx = ix + di
        jy = iy + dj
        ok = (jx >= 0) & (jx < nx) & (jy >= 0) & (jy < ny)
        out = out + np.where(ok, values[np.clip(jx, 0, nx - 1),
                                        np.clip(jy, 0, ny - 1)] * wgt, 0.0)
    return out


@dataclass(frozen=True)
class ScalarGrid:
    """Uniform square grid of point samples, x index first."""

    origin: tuple[float, float]
    spacing: float
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError("values must be a 2D array")
        object.__setattr__(self, "values", v)

    @classmethod
    def square(cls, n: int, side: float = 2.2,
               values: np.ndarray | None = None) -> "ScalarGrid":
        """n x n grid on [-side/2, side/2)^2; node spacing side/n so the node
        set is one period of the FFT lattice."""
        h = side / n
        if values is None:
            values = np.zeros((n, n))
        return cls(origin=(-side / 2, -side / 2), spacing=h, values=values)

    @classmethod
    def from_function(cls, fn: Callable[[np.ndarray], np.ndarray], n: int,
                      side: float = 2.2) -> "ScalarGrid":
        g = cls.square(n, side)
        pts = g.mesh_points()
        return cls(g.origin, g.spacing, fn(pts))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def side(self) -> float:
        return self.spacing * self.shape[0]

    def axis_x(self) -> np.ndarray:
        return self.origin[0] + self.spacing * np.arange(self.shape[0])

    def axis_y(self) -> np.ndarray:
        return self.origin[1] + self.spacing * np.arange(self.shape[1])

    def mesh_points(self) -> np.ndarray:
        xx, yy = np.meshgrid(self.axis_x(), self.axis_y(), indexing="ij")
        return np.stack([xx, yy], axis=-1)

    def sample(self, points: np.ndarray) -> np.ndarray:
        return bilinear_sample(self.values, self.origin, self.spacing, points)

    def with_values(self, values: np.ndarray) -> "ScalarGrid":
        if values.shape != self.shape:
            raise ValueError("shape mismatch")
        return ScalarGrid(self.origin, self.spacing, values)

    def same_layout(self, other: "ScalarGrid") -> bool:
        return (self.shape == other.shape
                and math.isclose(self.spacing, other.spacing)
                and math.isclose(self.origin[0], other.origin[0])
                and math.isclose(self.origin[1], other.origin[1]))

    def norm_l2(self) -> float:
        """Discrete L2 norm (cell measure spacing^2)."""
        return float(np.sqrt(np.sum(self.values ** 2))) * self.spacing


@dataclass(frozen=True)
class SinogramGrid:
    """Fan-beam samples over (theta_i, alpha_j).

    theta_i = 2 pi i / n_theta; alpha_j = -pi/2 + (j + 1/2) pi / n_alpha.
    """

    values: np.ndarray  # (n_theta, n_alpha)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError("values must be (n_theta, n_alpha)")
        object.__setattr__(self, "values", v)

    @classmethod
    def empty(cls, n_theta: int, n_alpha: int) -> "SinogramGrid":
        return cls(np.zeros((n_theta, n_alpha)))

    @property
    def n_theta(self) -> int:
        return self.values.shape[0]

    @property
    def n_alpha(self) -> int:
        return self.values.shape[1]

    def thetas(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_theta) / self.n_theta

    def alphas(self) -> np.ndarray:
        return -0.5 * np.pi + np.pi * (np.arange(self.n_alpha) + 0.5) / self.n_alpha

    def weights(self) -> np.ndarray:
        """Plain cell measure d theta * d alpha (no Jacobian factors)."""
        return np.full(self.values.shape,
                       (2 * np.pi / self.n_theta) * (np.pi / self.n_alpha))

    def sample(self, theta: np.ndarray, alpha: np.ndarray) -> np.ndarray:
        """Bilinear interpolation, periodic in theta; alpha interpolates
        against zero ghosts at +-pi/2 (grazing rays integrate to zero)."""
        theta = np.asarray(theta, dtype=float)
        alpha = np.asarray(alpha, dtype=float)
        dth = 2 * np.pi / self.n_theta
        dal = np.pi / self.n_alpha
        st = theta / dth
        it0 = np.floor(st).astype(np.int64)
        tt = st - it0
        sa = (alpha + 0.5 * np.pi) / dal - 0.5
        ia0 = np.floor(sa).astype(np.int64)
        ta = sa - ia0
        out = np.zeros(np.broadcast(theta, alpha).shape)
        for dt_, da_, wgt in (
            (0, 0, (1 - tt) * (1 - ta)),
            (1, 0, tt * (1 - ta)),
            (0, 1, (1 - tt) * ta),
            (1, 1, tt * ta),
        ):
            jt = np.mod(it0 + dt_, self.n_theta)
            ja = ia0 + da_
            ok = (ja >= 0) & (ja < self.n_alpha)
            out = out + np.where(
                ok, self.values[jt, np.clip(ja, 0, self.n_alpha - 1)] * wgt,
                0.0)
        return out

    def norm_l2(self, weight: np.ndarray | None = None) -> float:
        w = self.weights() if weight is None else weight
        return float(np.sqrt(np.sum(self.values ** 2 * w)))
