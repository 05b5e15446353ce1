"""
Homogenized densities by closed form, cell formula, box formula and random cubes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .energy import DensitySpec
from .kernel import ahom_matrix, integrate_kernel
from .minimize import MinimizeOptions, solve_box, solve_cell

__all__ = [
    "HomogReport",
    "fhom_closed_form",
    "fhom_cell",
    "fhom_asymptotic",
    "fhom_stochastic",
    "ahom_quadratic",
    "default_cutoff",
]


@dataclass
class HomogReport:
    """
    Estimates of ``f_hom(M)`` by one method.

    ``index`` holds the ladder variable (``N`` for the cell formula, ``R``
    for the box formula, ``(R, seed)`` pairs for the stochastic one).
    """

    M: np.ndarray
    method: str
    values: list
    index: list
    extrapolated: float
    diagnostics: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    means: dict = field(default_factory=dict)
    variances: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("homogenized values must be finite")

    def rows(self):
        """One record per estimate: ``(method, index, value, iterations, converged)``."""
        out = []
        for i, v, dg in zip(self.index, self.values, self.diagnostics or [{}] * len(self.values)):
            out.append((self.method, i, v, dg.get("iterations", 0), dg.get("converged", True)))
        return out


def _as_matrix(spec, M):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape != (spec.codim, spec.dim):
        raise ValueError(f"probe must be {spec.codim} x {spec.dim}")
    return M


def fhom_closed_form(spec: DensitySpec, M, quadrature_step: float = 1e-2) -> float:
    """
    ``int f(xi, M xi) dxi`` for an x-independent density.

    Kernel densities use the kernel's own quadrature; others a lattice of
    spacing ``quadrature_step`` on their support ball.
    """
    if not spec.x_independent:
        raise ValueError("closed form requires x-independence")
    M = _as_matrix(spec, M)
    if spec.kernel is not None:
        g = lambda xi: spec.inner(None, xi, xi @ M.T)
        return float(integrate_kernel(spec.kernel, g, spec.p, p=spec.p))
    R = spec.radius
    kmax = int(math.floor(R / quadrature_step))
    ks = np.arange(-kmax, kmax + 1) * quadrature_step
    xi = np.stack(np.meshgrid(*([ks] * spec.dim), indexing="ij"), axis=-1).reshape(-1, spec.dim)
    xi = xi[np.linalg.norm(xi, axis=-1) <= R]
    return float(math.fsum(spec.f(None, xi, xi @ M.T)) * quadrature_step**spec.dim)


def default_cutoff(spec: DensitySpec, M, rtol: float = 1e-4) -> float:
    """
    Interaction cutoff ``T`` for the cell and box problems.

    The support radius for compact kernels; otherwise the smallest half-integer
    whose certified kernel tail is below ``rtol`` of the affine energy.
    """
    if math.isfinite(spec.radius):
        return spec.radius
    k = spec.kernel
    if k is None or k.tail_bound is None:
        raise ValueError("cannot certify a cutoff without kernel decay metadata")
    if not math.isfinite(k.tail_bound(0.5, spec.p)):
        raise ValueError("kernel tail too heavy for a certified cutoff")
    M = np.atleast_2d(np.asarray(M, dtype=float))
    size = max(float(np.linalg.norm(M, 2)), 1e-300) ** spec.p
    ref = integrate_kernel(k, lambda x: np.linalg.norm(x @ M.T, axis=-1) ** spec.p, spec.p, p=spec.p)
    T = 0.5
    while spec.psi_scale * size * k.tail_bound(T, spec.p) > rtol * max(float(ref), 1e-300):
        T += 0.5
        if T > 1e3:
            raise ValueError("kernel tail too heavy for a certified cutoff")
    return T


def fhom_cell(spec: DensitySpec, M, N0: int = 32, T=None, opts: Optional[MinimizeOptions] = None) -> HomogReport:
    """Cell formula on the ladder ``N in {N0, 2 N0}``; the finest value is reported."""
    M = _as_matrix(spec, M)
    T = default_cutoff(spec, M) if T is None else T
    values, diag = [], []
    ladder = [N0, 2 * N0]
    for N in ladder:
        sol = solve_cell(spec, M, N, T, opts)
        values.append(sol.value)
        diag.append({"iterations": sol.iterations, "converged": sol.converged, "grad_norm": sol.final_grad_norm})
    trace = list(np.diff(values))
    return HomogReport(M, "cell", values, ladder, values[-1], diag, trace)


def fhom_asymptotic(
    spec: DensitySpec,
    M,
    R_list: Sequence[int] = (4, 8, 16),
    T=None,
    N: int = 16,
    opts: Optional[MinimizeOptions] = None,
    layer_width=None,
    exterior: str = "affine",
) -> HomogReport:
    """Normalized box minima for increasing ``R``; the last value is reported."""
    M = _as_matrix(spec, M)
    R_list = list(R_list)
    if any(b <= a for a, b in zip(R_list, R_list[1:])):
        raise ValueError("R_list must be increasing")
    T = default_cutoff(spec, M) if T is None else T
    values, diag = [], []
    for R in R_list:
        sol = solve_box(spec, M, R, N, T, opts, layer_width, exterior)
        values.append(sol.value)
        diag.append({"iterations": sol.iterations, "converged": sol.converged, "grad_norm": sol.final_grad_norm})
    return HomogReport(M, "asymptotic", values, R_list, values[-1], diag, list(np.diff(values)))


def fhom_stochastic(
    random_spec: DensitySpec,
    M,
    R_list: Sequence[int] = (4, 8, 16),
    seeds: Sequence[int] = tuple(range(20)),
    T=None,
    N: int = 16,
    opts: Optional[MinimizeOptions] = None,
) -> HomogReport:
    """
    Box minima over independent realizations.

    ``means`` and ``variances`` (unbiased) are keyed by ``R``; the mean at the
    largest ``R`` is reported.
    """
    if not random_spec.random or random_spec.realize is None:
        raise ValueError("stochastic formula requires a random density")
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("need at least two seeds")
    M = _as_matrix(random_spec, M)
    T = default_cutoff(random_spec, M) if T is None else T
    values, index, diag = [], [], []
    means, variances = {}, {}
    for R in R_list:
        vals = []
        for s in seeds:
            sol = solve_box(random_spec.realize(s), M, R, N, T, opts)
            vals.append(sol.value)
            values.append(sol.value)
            index.append((R, s))
            diag.append({"iterations": sol.iterations, "converged": sol.converged, "grad_norm": sol.final_grad_norm})
        means[R] = float(np.mean(vals))
        variances[R] = float(np.var(vals, ddof=1))
    R_last = list(R_list)[-1]
    return HomogReport(M, "stochastic", values, index, means[R_last], diag, [], means, variances)


def ahom_quadratic(spec: DensitySpec) -> np.ndarray:
    """
    Matrix ``A`` with ``f_hom(M) = M A M^T`` for ``f = c a(xi) |z|^2``.

    Includes the constant ``c`` of the density and checks the identity on a
    probe.
    """
    if not (spec.x_independent and spec.codim == 1 and spec.kernel is not None and spec.separable and spec.p == 2):
        raise ValueError("ahom requires an x-independent quadratic kernel density")
    z = np.array([[1.0], [2.0], [-0.7]])
    vals = spec.phi(z)
    c = float(vals[0])
    if not np.allclose(vals, c * z[:, 0] ** 2, rtol=1e-12):
        raise ValueError("density is not quadratic in z")
    A = c * ahom_matrix(spec.kernel)
    probe = np.ones((1, spec.dim)) / math.sqrt(spec.dim)
    lhs = fhom_closed_form(spec, probe)
    rhs = float((probe @ A @ probe.T)[0, 0])
    if not math.isclose(lhs, rhs, rel_tol=1e-9, abs_tol=1e-14):
        raise AssertionError("closed form and A_hom disagree")
    return A
