"""
Nonlocal convolution energies on grids.

A density ``f(y, xi, z)`` is integrated over pairs ``(x, x + eps*xi)`` of grid
nodes with ``y = x/eps`` and ``z = (u(x + eps*xi) - u(x))/eps``.  The xi
lattice is ``(h/eps) Z^d``, so every pair lands on nodes.

Densities built from a kernel ``a`` are written ``a(xi) * c(y, xi) * phi(z)``
(separable) or ``a(xi) * profile(y, xi, z)``.  For those the default
``quadrature="cell"`` replaces the point weight ``(h/eps)^d a(xi)`` by the
cell integral of ``a``, which removes the O(1) quadrature error of a
discontinuous kernel at its support sphere.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .grid import GridField, build_layer_mask, check_divides, fd_gradient, shift_slices
from .kernel import Kernel, integrate_kernel, lattice_weights

__all__ = [
    "DensitySpec",
    "EnergyValue",
    "Plan",
    "plaplace",
    "power_density",
    "weighted",
    "anisotropic",
    "random_checkerboard",
    "Checkerboard",
    "DENSITY_CATALOG",
    "density_from_config",
    "check_invariants",
    "eval_F",
    "eval_G",
    "eval_truncated",
    "eval_perturbed",
    "grad_F",
    "eval_local_limit",
    "poincare_ratio",
]


def _norm(z):
    return np.sqrt(np.sum(z * z, axis=-1))


def _pow_norm(z, p):
    if p == 2:
        return np.sum(z * z, axis=-1)
    return _norm(z) ** p


def _dpow_norm(z, p):
    """Derivative of ``|z|^p`` in ``z``."""
    if p == 2:
        return 2.0 * z
    n = _norm(z)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(n > 0, p * n ** (p - 2), 0.0)
    return s[..., None] * z


@dataclass(frozen=True)
class DensitySpec:
    """
    Energy density ``f(y, xi, z) >= 0``.

    Either ``phi`` (with optional ``coef``) or ``profile`` describes the part
    multiplying the kernel.  Without a kernel ``a = 1`` and ``support`` must
    be given.

    Parameters
    ----------
    dim, codim : int
    p : float
        Growth exponent in ``z``.
    kernel : Kernel, optional
    coef : callable, optional
        ``coef(y, xi) -> (n,)``, nonnegative weight of the pair.
    phi, dphi : callable, optional
        ``phi(z) -> (n,)`` and its gradient ``(n, m)``.
    profile, dprofile : callable, optional
        Non-separable ``profile(y, xi, z)`` and its ``z``-gradient.
    c0, r0, rho0 : float
        Lower growth bound ``f >= c0 (|z|^p - rho0)`` for ``|xi| < r0``.
    psi_scale : float
        Upper growth bound ``f <= psi_scale * a(xi) (|z|^p + 1)``.
    """

    dim: int
    codim: int = 1
    p: float = 2.0
    kernel: Optional[Kernel] = None
    coef: Optional[Callable] = None
    phi: Optional[Callable] = None
    dphi: Optional[Callable] = None
    profile: Optional[Callable] = None
    dprofile: Optional[Callable] = None
    support: Optional[float] = None
    convex_in_z: bool = True
    x_independent: bool = True
    periodic: bool = True
    random: bool = False
    c0: float = 0.0
    r0: float = 0.0
    rho0: float = 0.0
    psi_scale: float = math.inf
    seed: Optional[int] = None
    realize: Optional[Callable] = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.phi is None) == (self.profile is None):
            raise ValueError("give exactly one of phi and profile")
        if self.kernel is not None and self.kernel.dim != self.dim:
            raise ValueError("kernel dimension does not match density")
        if self.kernel is None and self.support is None:
            raise ValueError("a density without kernel needs a support radius")
        if self.p <= 1:
            raise ValueError("p must exceed 1")

    @property
    def radius(self) -> float:
        """Interaction radius in xi."""
        if self.support is not None:
            return float(self.support)
        return self.kernel.support_radius

    @property
    def separable(self) -> bool:
        return self.phi is not None

    @property
    def differentiable(self) -> bool:
        return self.dphi is not None if self.separable else self.dprofile is not None

    def _a(self, xi):
        if self.kernel is None:
            return 1.0
        return self.kernel(xi)

    def inner(self, y, xi, z):
        """``f / a``: the part of the density multiplying the kernel."""
        if self.separable:
            val = self.phi(z)
            return val if self.coef is None else self.coef(y, xi) * val
        return self.profile(y, xi, z)

    def inner_dz(self, y, xi, z):
        if not self.differentiable:
            raise ValueError("density not differentiable")
        if self.separable:
            val = self.dphi(z)
            return val if self.coef is None else self.coef(y, xi)[..., None] * val
        return self.dprofile(y, xi, z)

    def f(self, y, xi, z):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return self._a(xi) * self.inner(y, xi, z)

    def dz(self, y, xi, z):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return np.asarray(self._a(xi))[..., None] * self.inner_dz(y, xi, z)

    def psi(self, xi):
        """The declared upper-bound kernel."""
        return self.psi_scale * np.asarray(self._a(xi), dtype=float)


# ---------------------------------------------------------------- catalog


def _lower_constant(kernel, p_scale):
    r0 = 0.5 * min(kernel.support_radius, 1.0)
    probe = np.zeros((1, kernel.dim))
    probe[0, 0] = r0
    return r0, float(kernel(probe)[0]) * p_scale


def plaplace(kernel: Kernel, p: float = 2.0, codim: int = 1) -> DensitySpec:
    """``a(xi) |z|^p / p``."""
    p = float(p)
    r0, c0 = _lower_constant(kernel, 1.0 / p)
    return DensitySpec(
        dim=kernel.dim, codim=codim, p=p, kernel=kernel,
        phi=lambda z: _pow_norm(z, p) / p,
        dphi=lambda z: _dpow_norm(z, p) / p,
        x_independent=True, periodic=True,
        c0=c0, r0=r0, psi_scale=1.0 / p,
        name="plaplace", params={"p": p},
    )


def power_density(kernel: Kernel, p: float = 2.0, codim: int = 1) -> DensitySpec:
    """``a(xi) |z|^p``; the density of ``G_eps[a]``."""
    p = float(p)
    r0, c0 = _lower_constant(kernel, 1.0)
    return DensitySpec(
        dim=kernel.dim, codim=codim, p=p, kernel=kernel,
        phi=lambda z: _pow_norm(z, p),
        dphi=lambda z: _dpow_norm(z, p),
        x_independent=True, periodic=True,
        c0=c0, r0=r0, psi_scale=1.0,
        name="power", params={"p": p},
    )


def _bump(y, beta):
    return 1.0 + beta * np.mean(np.sin(2 * np.pi * y) ** 2, axis=-1)


def weighted(kernel: Kernel, p: float = 2.0, beta: float = 0.5) -> DensitySpec:
    """``b(y) b(y+xi) a(xi) |z|^p`` with ``b = 1 + beta * mean_k sin^2(2 pi y_k)``."""
    p, beta = float(p), float(beta)
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    r0, c0 = _lower_constant(kernel, 1.0)
    return DensitySpec(
        dim=kernel.dim, codim=1, p=p, kernel=kernel,
        coef=lambda y, xi: _bump(y, beta) * _bump(y + xi, beta),
        phi=lambda z: _pow_norm(z, p),
        dphi=lambda z: _dpow_norm(z, p),
        x_independent=False, periodic=True,
        c0=c0, r0=r0, psi_scale=(1.0 + beta) ** 2,
        name="weighted", params={"p": p, "beta": beta},
    )


def _direction(y, m):
    t = 2 * np.pi * y[..., 0]
    return np.stack([np.cos(t + np.pi * j / (2 * m)) for j in range(m)], axis=-1)


def anisotropic(kernel: Kernel, p: float = 2.0, kappa: float = 1.0, codim: int = 1) -> DensitySpec:
    """
    ``a(xi) (|z|^p + kappa |<z, w(y)>|^p)`` with a periodic direction field ``w``.

    The isotropic part keeps the density coercive where ``w`` degenerates.
    """
    p, kappa = float(p), float(kappa)
    m = int(codim)

    def profile(y, xi, z):
        s = np.sum(z * _direction(y, m), axis=-1)
        return _pow_norm(z, p) + kappa * np.abs(s) ** p

    def dprofile(y, xi, z):
        w = _direction(y, m)
        s = np.sum(z * w, axis=-1)
        ds = p * np.abs(s) ** (p - 1) * np.sign(s)
        return _dpow_norm(z, p) + kappa * ds[..., None] * w

    r0, c0 = _lower_constant(kernel, 1.0)
    return DensitySpec(
        dim=kernel.dim, codim=m, p=p, kernel=kernel,
        profile=profile, dprofile=dprofile,
        x_independent=False, periodic=True,
        c0=c0, r0=r0, psi_scale=1.0 + kappa * m ** (p / 2),
        name="anisotropic", params={"p": p, "kappa": kappa, "codim": m},
    )


def _zigzag(k):
    return 2 * k if k >= 0 else -2 * k - 1


class Checkerboard:
    """
    I.i.d. coefficients on the unit cells of ``Z^d``.

    The value of cell ``k`` comes from a generator keyed by ``(seed, k)``, so
    a realization does not depend on the order in which cells are visited.
    """

    def __init__(self, dim, seed, values=(1.0, 2.0)):
        self.dim = dim
        self.seed = int(seed)
        self.values = np.asarray(values, dtype=float)
        self._lo = np.zeros(dim, dtype=int)
        self._table = np.zeros((0,) * dim)

    def cell_value(self, k):
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_zigzag(int(c)) for c in k))
        rng = np.random.default_rng(ss)
        return self.values[rng.integers(len(self.values))]

    def _grow(self, lo, hi):
        lo = np.minimum(lo, self._lo) if self._table.size else lo
        hi = np.maximum(hi, self._lo + np.array(self._table.shape) - 1) if self._table.size else hi
        shape = tuple(int(x) for x in hi - lo + 1)
        table = np.full(shape, np.nan)
        if self._table.size:
            off = self._lo - lo
            table[tuple(slice(o, o + n) for o, n in zip(off, self._table.shape))] = self._table
        for idx in zip(*np.nonzero(np.isnan(table))):
            table[idx] = self.cell_value(np.array(idx) + lo)
        self._lo, self._table = lo, table

    def __call__(self, y):
        cells = np.floor(np.asarray(y, dtype=float)).astype(int)
        flat = cells.reshape(-1, self.dim)
        lo, hi = flat.min(axis=0), flat.max(axis=0)
        if (
            not self._table.size
            or np.any(lo < self._lo)
            or np.any(hi >= self._lo + np.array(self._table.shape))
        ):
            self._grow(lo, hi)
        rel = cells - self._lo
        return self._table[tuple(rel[..., k] for k in range(self.dim))]


def random_checkerboard(kernel: Kernel, p: float = 2.0, values=(1.0, 2.0), seed: int = 0) -> DensitySpec:
    """``b(y) b(y+xi) a(xi) |z|^p`` with ``b`` i.i.d. over ``values`` on unit cells."""
    p = float(p)
    values = tuple(float(v) for v in values)
    if min(values) <= 0:
        raise ValueError("checkerboard values must be positive")
    board = Checkerboard(kernel.dim, seed, values)
    r0, c0 = _lower_constant(kernel, min(values) ** 2)
    return DensitySpec(
        dim=kernel.dim, codim=1, p=p, kernel=kernel,
        coef=lambda y, xi: board(y) * board(y + xi),
        phi=lambda z: _pow_norm(z, p),
        dphi=lambda z: _dpow_norm(z, p),
        x_independent=False, periodic=False, random=True,
        c0=c0, r0=r0, psi_scale=max(values) ** 2,
        seed=int(seed),
        realize=lambda s: random_checkerboard(kernel, p, values, s),
        name="random_checkerboard", params={"p": p, "values": values, "seed": int(seed)},
    )


DENSITY_CATALOG = {
    "plaplace": plaplace,
    "weighted": weighted,
    "anisotropic": anisotropic,
    "random_checkerboard": random_checkerboard,
}


def density_from_config(name, kernel, **params):
    try:
        factory = DENSITY_CATALOG[name]
    except KeyError:
        raise ValueError(f"unknown density {name!r}; available: {sorted(DENSITY_CATALOG)}") from None
    return factory(kernel, **params)


def check_invariants(spec: DensitySpec, n_samples: int = 200, seed: int = 0) -> list:
    """
    Sample the structural claims of ``spec``; return a list of violations.

    Checks the zero-slope bound, midpoint convexity, unit periodicity and the
    ``z``-derivative against central differences.
    """
    rng = np.random.default_rng(seed)
    d, m = spec.dim, spec.codim
    R = spec.radius if math.isfinite(spec.radius) else 3.0
    y = rng.uniform(-2, 2, (n_samples, d))
    xi = rng.uniform(-R, R, (n_samples, d)) / math.sqrt(d)
    z1 = rng.normal(size=(n_samples, m))
    z2 = rng.normal(size=(n_samples, m))
    bad = []
    f0 = spec.f(y, xi, np.zeros((n_samples, m)))
    if np.any(f0 > spec.psi(xi) * (1 + 1e-12) + 1e-300):
        bad.append("f(y, xi, 0) exceeds psi(xi)")
    if spec.convex_in_z:
        mid = spec.f(y, xi, 0.5 * (z1 + z2))
        if np.any(mid > 0.5 * (spec.f(y, xi, z1) + spec.f(y, xi, z2)) * (1 + 1e-12) + 1e-14):
            bad.append("midpoint convexity fails")
    if spec.periodic and not spec.random:
        base = spec.f(y, xi, z1)
        for k in range(d):
            e = np.zeros(d)
            e[k] = 1.0
            if not np.allclose(spec.f(y + e, xi, z1), base, rtol=1e-10, atol=1e-14):
                bad.append(f"not periodic along axis {k}")
    if spec.differentiable:
        g = spec.dz(y, xi, z1)
        fd = np.empty_like(g)
        for j in range(m):
            step = 1e-5 * (1 + np.abs(z1[:, j]))
            dz = np.zeros_like(z1)
            dz[:, j] = step
            fd[:, j] = (spec.f(y, xi, z1 + dz) - spec.f(y, xi, z1 - dz)) / (2 * step)
        # natural size of the z-derivative under the upper growth bound
        scale = spec.p * spec.psi(xi) * (1 + _norm(z1)) ** (spec.p - 1)
        # without a declared bound fall back to a relative error
        fallback = 1.0 + np.max(np.abs(fd), axis=1)
        scale = np.where(np.isfinite(scale) & (scale > 0), scale, fallback)[:, None]
        err = np.abs(g - fd) / scale
        if np.any(err > 1e-6):
            bad.append(f"dz disagrees with finite differences (max rel err {err.max():.2e})")
    return bad


# ---------------------------------------------------------------- evaluation


@dataclass
class EnergyValue:
    total: float
    breakdown: Optional[dict] = None
    zero_shift: float = 0.0

    def __float__(self):
        return float(self.total)


class Plan:
    """
    Precomputed pair structure for repeated evaluation on one domain.

    Parameters
    ----------
    spec : DensitySpec
    domain : Domain
    eps : float
    radius : float, optional
        Lattice cutoff in xi; defaults to the density's interaction radius.
    quadrature : {"cell", "point"}
    affine : ndarray, optional
        ``m x d`` matrix ``M``; adds ``M xi`` to every difference quotient.
    source_mask : ndarray of bool, optional
        Only pairs whose first node is selected contribute.
    """

    def __init__(self, spec, domain, eps, radius=None, quadrature="cell", affine=None, source_mask=None):
        if quadrature not in ("cell", "point"):
            raise ValueError("quadrature must be 'cell' or 'point'")
        self.spec, self.domain, self.eps = spec, domain, float(eps)
        h = domain.spacing
        ratio = check_divides(self.eps, h, "grid")
        radius = spec.radius if radius is None else min(float(radius), spec.radius)
        if not math.isfinite(radius):
            raise ValueError("interaction range must be finite; pass kernel_support")
        if not domain.periodic and self.eps * radius >= min(domain.lengths):
            raise ValueError("interaction range exceeds domain")
        self.radius = radius
        step = 1.0 / ratio  # lattice spacing h/eps
        idx, xis, wts = self._lattice(step, radius, quadrature)
        self.shifts, self.xis, self.weights = idx, xis, wts
        self.hd = domain.cell_volume
        self.affine = None if affine is None else np.atleast_2d(np.asarray(affine, dtype=float))
        self.source_mask = source_mask
        coords = domain.coords() if not spec.x_independent else None
        self._terms = []
        for s, xi, w in zip(self.shifts, self.xis, self.weights):
            s = tuple(int(c) for c in s)
            if domain.periodic:
                src = tuple(slice(None) for _ in s)
                tgt = None
            else:
                sl = shift_slices(domain.shape, s)
                if sl is None:
                    continue
                src, tgt = sl
            y = None if coords is None else coords[src].reshape(-1, domain.dim) / self.eps
            coef = None
            if spec.separable and spec.coef is not None:
                coef = spec.coef(y, xi)
            mask = None
            if source_mask is not None:
                mask = source_mask[src].reshape(-1)
                if not mask.any():
                    continue
            off = None if self.affine is None else self.affine @ xi
            self._terms.append((s, xi, float(w) * self.hd, src, tgt, y, coef, mask, off))

    def _lattice(self, step, radius, quadrature):
        spec = self.spec
        d = spec.dim
        if spec.kernel is not None and quadrature == "cell":
            return lattice_weights(spec.kernel, step, radius)
        kmax = int(math.floor(radius / step + 1e-9))
        ks = np.arange(-kmax, kmax + 1)
        idx = np.stack(np.meshgrid(*([ks] * d), indexing="ij"), axis=-1).reshape(-1, d)
        xis = idx * step
        keep = np.sqrt(np.sum(xis**2, axis=-1)) <= radius * (1 + 1e-12)
        idx, xis = idx[keep], xis[keep]
        w = np.full(len(idx), step**d)
        if spec.kernel is not None:
            w = w * spec.kernel(xis)
            nz = w > 0
            idx, xis, w = idx[nz], xis[nz], w[nz]
        return idx, xis, w

    def __len__(self):
        return len(self._terms)

    def _diff(self, vals, s, src, tgt):
        if self.domain.periodic:
            ub = vals
            for axis, k in enumerate(s):
                if k:
                    ub = np.roll(ub, -k, axis=axis)
            return ub - vals
        return vals[tgt] - vals[src]

    def _z(self, vals, s, src, tgt, off):
        m = vals.shape[-1]
        z = self._diff(vals, s, src, tgt).reshape(-1, m) / self.eps
        if off is not None:
            z = z + off
        return z

    def _inner(self, y, xi, z, coef):
        spec = self.spec
        if spec.separable:
            val = spec.phi(z)
            return val if coef is None else coef * val
        return spec.profile(y, xi, z)

    def _inner_dz(self, y, xi, z, coef):
        spec = self.spec
        if spec.separable:
            if spec.dphi is None:
                raise ValueError("density not differentiable")
            val = spec.dphi(z)
            return val if coef is None else coef[:, None] * val
        if spec.dprofile is None:
            raise ValueError("density not differentiable")
        return spec.dprofile(y, xi, z)

    def energy(self, values, exact=True, breakdown=False) -> EnergyValue:
        """
        Energy of nodal ``values``.

        ``exact`` sums all weighted pair terms at once with :func:`math.fsum`,
        so the total is the correctly rounded sum and does not depend on the
        order in which pairs are visited.
        """
        vals = np.asarray(values, dtype=float)
        parts, keys, chunks = [], [], []
        zero = 0.0
        for s, xi, wh, src, tgt, y, coef, mask, off in self._terms:
            terms = self._inner(y, xi, self._z(vals, s, src, tgt, off), coef)
            if mask is not None:
                terms = terms[mask]
            if exact:
                prod = wh * terms
                chunks.append(prod)
                part = math.fsum(prod)
            else:
                part = wh * float(np.sum(terms))
            parts.append(part)
            keys.append(s)
            if not any(s):
                zero = part
        if exact:
            total = math.fsum(np.concatenate(chunks)) if chunks else 0.0
        else:
            total = float(np.sum(parts))
        bd = dict(zip(keys, parts)) if breakdown else None
        return EnergyValue(total, bd, zero)

    def energy_grad(self, values):
        """Energy and its gradient with respect to nodal values (fast summation)."""
        vals = np.asarray(values, dtype=float)
        shape = vals.shape
        grad = np.zeros(shape)
        total = 0.0
        for s, xi, wh, src, tgt, y, coef, mask, off in self._terms:
            z = self._z(vals, s, src, tgt, off)
            terms = self._inner(y, xi, z, coef)
            dz = self._inner_dz(y, xi, z, coef)
            if mask is not None:
                terms = terms * mask
                dz = dz * mask[:, None]
            total += wh * float(np.sum(terms))
            g = (wh / self.eps) * dz
            if self.domain.periodic:
                g = g.reshape(shape)
                grad -= g
                back = g
                for axis, k in enumerate(s):
                    if k:
                        back = np.roll(back, k, axis=axis)
                grad += back
            else:
                g = g.reshape(vals[src].shape)
                grad[src] -= g
                grad[tgt] += g
        return total, grad


def _check_field(spec, u):
    if u.codim != spec.codim:
        raise ValueError("field codimension does not match density")
    if u.domain.dim != spec.dim:
        raise ValueError("field dimension does not match density")


def eval_F(spec: DensitySpec, u: GridField, eps: float, kernel_support=None, *, quadrature="cell", breakdown=False) -> EnergyValue:
    """
    ``F_eps(u)`` on the grid of ``u``.

    Parameters
    ----------
    spec : DensitySpec
    u : GridField
    eps : float
        Interaction scale; the grid spacing must divide it.
    kernel_support : float, optional
        Cutoff of the xi lattice (required for unbounded kernels).
    quadrature : {"cell", "point"}
    breakdown : bool
        Keep the per-shift partial sums.
    """
    _check_field(spec, u)
    plan = Plan(spec, u.domain, eps, kernel_support, quadrature)
    return plan.energy(u.values, exact=True, breakdown=breakdown)


def eval_G(k: Kernel, u: GridField, eps: float, p: float, *, quadrature="cell", kernel_support=None) -> EnergyValue:
    """``G_eps[a](u)``: the energy of ``a(xi) |z|^p``."""
    return eval_F(power_density(k, p, u.codim), u, eps, kernel_support, quadrature=quadrature)


def eval_truncated(spec: DensitySpec, T: float, u: GridField, eps: float, kernel_support=None, *, quadrature="cell") -> EnergyValue:
    """
    ``F_eps`` restricted to lattice points with ``|xi| <= T``.

    The surviving lattice points keep their weights, so the value is
    nondecreasing in ``T``.  Once ``T`` reaches the interaction radius every
    point is kept, including cells that straddle the support sphere, and the
    value equals :func:`eval_F`.
    """
    if not T > 0:
        raise ValueError("truncation radius must be positive")
    _check_field(spec, u)
    plan = Plan(spec, u.domain, eps, kernel_support, quadrature)
    if T < plan.radius:
        plan._terms = [t for t in plan._terms if math.sqrt(sum(c * c for c in t[1])) <= T * (1 + 1e-12)]
    return plan.energy(u.values, exact=True, breakdown=True)


def eval_perturbed(spec: DensitySpec, rho: GridField, T_map, u: GridField, eps: float, kernel_support=None) -> EnergyValue:
    """
    Perturbed energy with node density ``rho`` and transport map ``T_map``.

    ``T_map`` gives the image of every node, shape ``domain.shape + (d,)``.
    Pairs with ``|y - x| <= 2 eps R`` enter with the point value of the
    density at ``((T(y) - T(x))/eps, (u(y) - u(x))/eps)`` and weight
    ``rho(x) rho(y) h^(2d) / eps^d``.
    """
    _check_field(spec, u)
    dom = u.domain
    r = np.asarray(rho.values if isinstance(rho, GridField) else rho, dtype=float).reshape(dom.shape)
    if np.any(r <= 0):
        raise ValueError("density must be positive")
    tm = np.asarray(T_map.values if isinstance(T_map, GridField) else T_map, dtype=float).reshape(dom.shape + (dom.dim,))
    delta = tm - dom.coords()
    R = spec.radius if kernel_support is None else float(kernel_support)
    h = dom.spacing
    check_divides(eps, h, "grid")
    kmax = int(math.floor(2 * eps * R / h + 1e-9))
    ks = np.arange(-kmax, kmax + 1)
    shifts = np.stack(np.meshgrid(*([ks] * dom.dim), indexing="ij"), axis=-1).reshape(-1, dom.dim)
    shifts = shifts[np.sqrt(np.sum((shifts * h) ** 2, axis=-1)) <= 2 * eps * R * (1 + 1e-12)]
    coords = dom.coords()
    scale = h ** (2 * dom.dim) / eps**dom.dim
    parts = []
    for s in shifts:
        s = tuple(int(c) for c in s)
        if dom.periodic:
            def at(a, s=s):
                for axis, k in enumerate(s):
                    a = np.roll(a, -k, axis=axis)
                return a
            src = tuple(slice(None) for _ in s)
            du = (at(u.values) - u.values)
            dd = at(delta) - delta
            rr = r * at(r)
        else:
            sl = shift_slices(dom.shape, s)
            if sl is None:
                continue
            src, tgt = sl
            du = u.values[tgt] - u.values[src]
            dd = delta[tgt] - delta[src]
            rr = r[src] * r[tgt]
        xi = (np.asarray(s) * h + dd.reshape(-1, dom.dim)) / eps
        y = coords[src].reshape(-1, dom.dim) / eps
        vals = spec.f(y, xi, du.reshape(-1, u.codim) / eps) * rr.reshape(-1)
        parts.append(math.fsum(scale * vals))
    return EnergyValue(math.fsum(parts))


def grad_F(spec: DensitySpec, u: GridField, eps: float, kernel_support=None, free_mask=None, *, quadrature="cell") -> GridField:
    """
    Gradient of :func:`eval_F` with respect to the nodal values.

    Each pair contributes to both of its nodes.  Entries outside
    ``free_mask`` are zero.
    """
    if not spec.differentiable:
        raise ValueError("density not differentiable")
    _check_field(spec, u)
    plan = Plan(spec, u.domain, eps, kernel_support, quadrature)
    _, g = plan.energy_grad(u.values)
    if free_mask is not None:
        g = g * np.asarray(free_mask, dtype=bool).reshape(u.domain.shape)[..., None]
    return GridField(u.domain, g)


def _anorm_batch(k, Z, p):
    """``int a |Z xi|^p`` for a stack of ``m x d`` matrices."""
    n, m, d = Z.shape
    if d == 1:
        c = integrate_kernel(k, lambda x: np.abs(x[:, 0]) ** p, p, p=p)
        return float(c) * np.sum(Z[:, :, 0] ** 2, axis=-1) ** (p / 2)
    if p == 2:
        A = integrate_kernel(k, lambda x: (x[:, :, None] * x[:, None, :]).reshape(len(x), d * d), 2, p=2)
        A = np.asarray(A).reshape(d, d)
        return np.einsum("nij,jk,nik->n", Z, A, Z)
    out = np.empty(n)
    chunk = 64
    for start in range(0, n, chunk):
        Zc = Z[start : start + chunk]

        def g(x, Zc=Zc):
            v = np.einsum("cmd,nd->ncm", Zc, x)
            return np.sqrt(np.sum(v * v, axis=-1)) ** p

        out[start : start + chunk] = integrate_kernel(k, g, p, p=p)
    return out


def eval_local_limit(k: Kernel, u: GridField, p: float) -> float:
    """
    ``int a(xi) |Du(x) xi|^p`` summed over nodes with the finite-difference Jacobian.

    Nodes carry trapezoidal weights, so affine fields give the exact value.
    """
    D = fd_gradient(u).reshape(-1, u.codim, u.domain.dim)
    w = u.domain.node_weights().reshape(-1)
    nz = np.any(D != 0, axis=(1, 2))
    if not nz.any():
        return 0.0
    vals = _anorm_batch(k, D[nz], p)
    return float(math.fsum(w[nz] * vals))


def poincare_ratio(k: Kernel, u: GridField, eps: float, p: float, r=None) -> float:
    """
    ``sum h^d |u|^p / G_eps^r(u)`` for ``u`` vanishing on the layer of width ``eps*r``.

    ``r`` defaults to the kernel support radius.
    """
    r = k.support_radius if r is None else float(r)
    if not np.any(u.values):
        raise ValueError("ratio undefined")
    layer = build_layer_mask(u.domain, eps * r)
    if np.any(u.values[layer.selected]):
        raise ValueError("field must vanish on the boundary layer")
    w = u.domain.node_weights().reshape(-1)
    num = math.fsum(w * _pow_norm(u.values.reshape(-1, u.codim), p))
    den = eval_G(k, u, eps, p).total
    return num / den
