"""
Interaction kernels and the lattice quadrature used for every kernel integral.

A kernel integral is approximated on the lattice ``step * Z^d`` with one cell
of side ``step`` per lattice point.  Cells away from any discontinuity use the
midpoint value; cells straddling a jump surface (the support sphere of an
indicator kernel, a truncation radius, or the inner radius of a tail integral)
are refined by uniform sub-cell midpoints.  The same cell decomposition
produces the per-shift weights used by the energy module, so that kernel
constants and energy sums are mutually consistent.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import integrate, special

__all__ = [
    "Kernel",
    "indicator_ball",
    "gaussian",
    "polynomial_decay",
    "from_config",
    "moment",
    "tail_moment",
    "truncate",
    "anorm_p",
    "ahom_matrix",
    "lattice_weights",
    "integrate_kernel",
    "KERNEL_CATALOG",
]

# sub-cell samples per axis for cells cut by a jump surface
SUBSAMPLES = {1: 64, 2: 16, 3: 6}
TAIL_RTOL = 1e-8
MAX_LATTICE_POINTS = 2_000_000


class NotCertifiableError(ValueError):
    pass


@dataclass(frozen=True)
class Kernel:
    """
    Nonnegative interaction kernel ``a(xi)`` on ``R^d``.

    Parameters
    ----------
    dim : int
        Spatial dimension ``d``.
    func : callable
        Maps an array of points with trailing axis ``d`` to kernel values.
    support_radius : float
        ``a`` vanishes for ``|xi| > support_radius``; ``inf`` if unbounded.
    radial : bool
        Whether ``a`` depends on ``|xi|`` only.
    quadrature_step : float
        Lattice spacing used for kernel integrals.
    jump_at_support : bool
        ``a`` is discontinuous across the support sphere.
    tail_bound : callable, optional
        ``tail_bound(R, p)`` is a certified upper bound for
        ``int_{|xi|>R} a(xi)(1+|xi|^p) dxi``.  Required for unbounded support.
    radial_profile : callable, optional
        ``r -> a(r e_1)``; used for far-field tails of radial kernels.
    """

    dim: int
    func: Callable[[np.ndarray], np.ndarray]
    support_radius: float = math.inf
    radial: bool = True
    quadrature_step: float = 1e-2
    jump_at_support: bool = False
    tail_bound: Optional[Callable[[float, float], float]] = None
    radial_profile: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dimension must be positive")
        if not self.quadrature_step > 0:
            raise ValueError("quadrature_step must be positive")
        if not self.support_radius > 0:
            raise ValueError("support_radius must be positive")
        reach = self.support_radius if math.isfinite(self.support_radius) else 10.0
        rng = np.random.default_rng(0)
        probe = rng.uniform(-reach, reach, size=(4096, self.dim))
        if np.any(self.func(probe) < 0):
            raise ValueError("sign-changing kernels are not supported")

    def __call__(self, xi):
        xi = np.asarray(xi, dtype=float)
        val = np.asarray(self.func(xi), dtype=float)
        if math.isfinite(self.support_radius):
            val = np.where(np.linalg.norm(xi, axis=-1) > self.support_radius, 0.0, val)
        return val

    @property
    def bounded(self):
        return math.isfinite(self.support_radius)


def _radius(xi):
    return np.sqrt(np.sum(np.asarray(xi, dtype=float) ** 2, axis=-1))


def indicator_ball(dim=1, radius=1.0, quadrature_step=1e-2):
    """Characteristic function of the open ball ``B_radius``."""
    radius = float(radius)
    return Kernel(
        dim=dim,
        func=lambda xi: (_radius(xi) < radius).astype(float),
        support_radius=radius,
        radial=True,
        quadrature_step=quadrature_step,
        jump_at_support=True,
        radial_profile=lambda r: (np.asarray(r) < radius).astype(float),
        name="indicator_ball",
        params={"radius": radius},
    )


def gaussian(dim=1, width=1.0, quadrature_step=1e-2):
    width = float(width)

    def tail(R, p):
        total = 0.0
        for k in (dim - 1, p + dim - 1):
            s = (k + 1) / 2.0
            total += width ** (k + 1) * 2 ** ((k - 1) / 2.0) * special.gamma(s) * special.gammaincc(
                s, R * R / (2 * width * width)
            )
        return _sphere_area(dim) * total

    return Kernel(
        dim=dim,
        func=lambda xi: np.exp(-_radius(xi) ** 2 / (2 * width * width)),
        radial=True,
        quadrature_step=quadrature_step,
        tail_bound=tail,
        radial_profile=lambda r: np.exp(-np.asarray(r, dtype=float) ** 2 / (2 * width * width)),
        name="gaussian",
        params={"width": width},
    )


def polynomial_decay(dim=1, exponent=5.0, quadrature_step=1e-2):
    """``(1+|xi|)^(-exponent)``, bounded by ``1/(1+|xi|^exponent)``."""
    alpha = float(exponent)

    def tail(R, p):
        if alpha <= p + dim:
            return math.inf
        if R <= 0:
            return math.inf
        return _sphere_area(dim) * (R ** (dim - alpha) / (alpha - dim) + R ** (p + dim - alpha) / (alpha - p - dim))

    return Kernel(
        dim=dim,
        func=lambda xi: (1.0 + _radius(xi)) ** (-alpha),
        radial=True,
        quadrature_step=quadrature_step,
        tail_bound=tail,
        radial_profile=lambda r: (1.0 + np.asarray(r, dtype=float)) ** (-alpha),
        name="polynomial_decay",
        params={"exponent": alpha},
    )


KERNEL_CATALOG = {
    "indicator_ball": indicator_ball,
    "gaussian": gaussian,
    "polynomial_decay": polynomial_decay,
}


def from_config(name, dim, quadrature_step=1e-2, **params):
    try:
        factory = KERNEL_CATALOG[name]
    except KeyError:
        raise ValueError(f"unknown kernel {name!r}; available: {sorted(KERNEL_CATALOG)}") from None
    return factory(dim=dim, quadrature_step=quadrature_step, **params)


def _sphere_area(d):
    return 2 * math.pi ** (d / 2) / special.gamma(d / 2)


def _angular_integral(g, d):
    """Integral of ``g`` over the unit sphere ``S^{d-1}``."""
    if d == 1:
        w = np.array([[1.0], [-1.0]])
        return np.sum(g(w), axis=0)
    if d == 2:
        n = 4096
        th = (np.arange(n) + 0.5) * (2 * math.pi / n)
        w = np.stack([np.cos(th), np.sin(th)], axis=-1)
        return np.sum(g(w), axis=0) * (2 * math.pi / n)
    if d == 3:
        x, wx = np.polynomial.legendre.leggauss(96)
        n_phi = 192
        phi = (np.arange(n_phi) + 0.5) * (2 * math.pi / n_phi)
        ct, ph = np.meshgrid(x, phi, indexing="ij")
        st = np.sqrt(1 - ct**2)
        w = np.stack([st * np.cos(ph), st * np.sin(ph), ct], axis=-1).reshape(-1, 3)
        wts = np.repeat(wx, n_phi) * (2 * math.pi / n_phi)
        vals = g(w)
        return np.tensordot(wts, vals, axes=(0, 0))
    raise NotImplementedError("far-field tails are implemented for d <= 3")


def _lattice_cells(d, step, r_max):
    """Integer indices of lattice cells meeting the closed ball ``B_{r_max}``."""
    kmax = int(math.ceil(r_max / step + 0.5))
    if (2 * kmax + 1) ** d > 50 * MAX_LATTICE_POINTS:
        raise NotCertifiableError("lattice too large for the requested radius")
    ks = np.arange(-kmax, kmax + 1)
    idx = np.stack(np.meshgrid(*([ks] * d), indexing="ij"), axis=-1).reshape(-1, d)
    centers = idx * step
    rad = _radius(centers)
    half_diag = 0.5 * step * math.sqrt(d)
    keep = rad - half_diag <= r_max * (1 + 1e-12)
    return idx[keep], centers[keep]


def _cell_rule(k, centers, step, g, r_min, r_max, cuts):
    """Sum over cells of ``int_cell a*g*[r_min<|xi|<r_max]`` (vectorised)."""
    d = k.dim
    rad = _radius(centers)
    half_diag = 0.5 * step * math.sqrt(d)
    cut = np.zeros(len(centers), dtype=bool)
    for r in cuts:
        if r is not None and math.isfinite(r) and r > 0:
            cut |= np.abs(rad - r) <= half_diag
    vol = step**d
    plain = ~cut
    cp = centers[plain]
    rp = rad[plain]
    inside = ((rp > r_min) | (r_min <= 0)) & (rp <= r_max)
    vals = k(cp) * inside
    gp = g(cp)
    total = np.tensordot(vals, gp, axes=(0, 0)) * vol
    if np.any(cut):
        s = SUBSAMPLES.get(d, 4)
        off1 = (np.arange(s) + 0.5) / s - 0.5
        offs = np.stack(np.meshgrid(*([off1] * d), indexing="ij"), axis=-1).reshape(-1, d) * step
        cc = centers[cut]
        for start in range(0, len(cc), max(1, 200_000 // len(offs))):
            blk = cc[start : start + max(1, 200_000 // len(offs))]
            pts = (blk[:, None, :] + offs[None, :, :]).reshape(-1, d)
            rr = _radius(pts)
            w = k(pts) * (((rr > r_min) | (r_min <= 0)) & (rr < r_max))
            total = total + np.tensordot(w, g(pts), axes=(0, 0)) * (vol / len(offs))
    return total


def _core_radius(k, p):
    """
    Lattice radius for kernel integrals and whether a far-field tail must be added.

    Unbounded kernels are cut where the certified tail drops below
    ``TAIL_RTOL`` of the total; if that radius exceeds what the lattice can
    afford, radial kernels continue with a one-dimensional far-field integral.
    """
    if k.bounded:
        return k.support_radius, False
    if k.tail_bound is None:
        raise NotCertifiableError("moment not certifiable: unbounded kernel without decay metadata")
    if not math.isfinite(k.tail_bound(1.0, p)):
        raise NotCertifiableError("moment not certifiable: decay too slow for this exponent")
    afford = 0.5 * k.quadrature_step * MAX_LATTICE_POINTS ** (1.0 / k.dim)
    if k.radial and k.radial_profile is not None:
        area = _sphere_area(k.dim)
        total, _ = integrate.quad(
            lambda r: area * float(k.radial_profile(np.array(r))) * (1 + r**p) * r ** (k.dim - 1),
            0, math.inf, limit=400,
        )
    else:
        _, centers = _lattice_cells(k.dim, k.quadrature_step, 1.0)
        total = float(np.sum(k(centers))) * k.quadrature_step**k.dim
    R = 1.0
    while k.tail_bound(R, p) > TAIL_RTOL * total:
        R *= 2.0
        if R > afford:
            if not (k.radial and k.radial_profile is not None):
                raise NotCertifiableError("moment not certifiable: far field of a non-radial kernel")
            return afford, True
    return R, False


def integrate_kernel(k, g, degree, p=None, r_min=0.0):
    """
    ``int_{|xi|>r_min} a(xi) g(xi) dxi`` for ``g`` positively homogeneous of ``degree``.

    ``g`` maps ``(n, d)`` points to ``(n, ...)`` values.  For unbounded radial
    kernels the far field beyond the affordable lattice radius is added through
    a one-dimensional radial integral times an angular integral.
    """
    p = degree if p is None else p
    core, needs_tail = _core_radius(k, max(p, degree))
    upper = core
    total = 0.0
    if upper > r_min:
        _, centers = _lattice_cells(k.dim, k.quadrature_step, upper)
        cuts = [r_min if r_min > 0 else None, upper if (k.jump_at_support or upper < k.support_radius) else None]
        total = _cell_rule(k, centers, k.quadrature_step, g, r_min, upper, cuts)
    if needs_tail:
        if not k.radial or k.radial_profile is None:
            raise NotCertifiableError("moment not certifiable: far field of a non-radial kernel")
        lo = max(core, r_min)
        q = degree + k.dim - 1

        # r = lo / s maps the far field onto (0, 1]
        def far(s):
            if s <= 0:
                return 0.0
            r = lo / s
            return float(k.radial_profile(np.array(r))) * r**q * lo / (s * s)

        radial_part, _ = integrate.quad(far, 0.0, 1.0, limit=400)
        total = total + radial_part * _angular_integral(g, k.dim)
    return total


def moment(k, p):
    """Lattice approximation of ``int a(xi)(1+|xi|^p) dxi``."""
    if p < 1:
        raise ValueError("p must be at least 1")
    mass = integrate_kernel(k, lambda x: np.ones(len(x)), 0, p=p)
    mom = integrate_kernel(k, lambda x: _radius(x) ** p, p, p=p)
    return float(mass + mom)


def tail_moment(k, p, r):
    """``int_{|xi|>r} a(xi)|xi|^p dxi``."""
    if not r > 0:
        raise ValueError("tail radius must be positive")
    if k.bounded and r >= k.support_radius:
        return 0.0
    return float(integrate_kernel(k, lambda x: _radius(x) ** p, p, p=p, r_min=r))


def truncate(k, T):
    """Kernel equal to ``k`` on ``B_T`` and zero outside."""
    if not T > 0:
        raise ValueError("truncation radius must be positive")
    if T >= k.support_radius:
        return k
    return replace(k, support_radius=float(T), jump_at_support=True, name=f"{k.name}|T={T:g}")


def anorm_p(k, z, p):
    """
    ``int a(xi) |z xi|^p dxi``.

    ``z`` is a vector of ``R^d`` (scalar product) or an ``m x d`` matrix, in
    which case the Euclidean norm of ``z xi`` is used.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[-1] != k.dim:
        raise ValueError("probe has the wrong number of columns")
    if not np.any(z):
        return 0.0
    return float(integrate_kernel(k, lambda x: np.linalg.norm(x @ z.T, axis=-1) ** p, p, p=p))


def ahom_matrix(k):
    """Second-moment matrix ``int a(xi) xi_i xi_j dxi``."""
    d = k.dim

    def outer(x):
        return (x[:, :, None] * x[:, None, :]).reshape(len(x), d * d)

    A = np.asarray(integrate_kernel(k, outer, 2, p=2)).reshape(d, d)
    return 0.5 * (A + A.T)


def lattice_weights(k, spacing, radius=None):
    """
    Cell weights ``int_{cell} a`` on the lattice ``spacing * Z^d`` restricted to ``|xi| <= radius``.

    Returns integer indices ``(K, d)``, points ``(K, d)`` and weights ``(K,)``,
    ordered lexicographically; cells with zero weight are dropped.
    """
    R = k.support_radius if radius is None else min(float(radius), k.support_radius)
    if not math.isfinite(R):
        raise ValueError("lattice weights need a finite interaction radius")
    idx, centers = _lattice_cells(k.dim, spacing, R)
    rad = _radius(centers)
    half_diag = 0.5 * spacing * math.sqrt(k.dim)
    jump = k.jump_at_support or R < k.support_radius
    cut = np.abs(rad - R) <= half_diag if jump else np.zeros(len(rad), dtype=bool)
    w = np.where(rad <= R, k(centers), 0.0) * spacing**k.dim
    if np.any(cut):
        s = SUBSAMPLES.get(k.dim, 4)
        off1 = (np.arange(s) + 0.5) / s - 0.5
        offs = np.stack(np.meshgrid(*([off1] * k.dim), indexing="ij"), axis=-1).reshape(-1, k.dim) * spacing
        pts = centers[cut][:, None, :] + offs[None]
        rr = _radius(pts)
        vals = k(pts.reshape(-1, k.dim)).reshape(rr.shape) * (rr < R)
        w[cut] = vals.mean(axis=1) * spacing**k.dim
    keep = w > 0
    return idx[keep], centers[keep], w[keep]
