"""
Accelerated first-order minimization of convex nonlocal energies.

Three problems share one solver: Dirichlet problems on a box, periodic cell
problems for the corrector ``w = u - Mx``, and box problems with affine data
used by the asymptotic homogenization formula.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .energy import DensitySpec, Plan
from .grid import Domain, GridField, build_layer_mask, check_divides, sample_function

__all__ = [
    "MinimizeOptions",
    "Solution",
    "minimize_smooth",
    "solve_dirichlet",
    "solve_cell",
    "solve_box",
    "box_problem",
]


@dataclass
class MinimizeOptions:
    """
    Parameters
    ----------
    max_iters : int
    grad_tol : float, optional
        Stop when the sup-norm of the free-node gradient is below this.
        Defaults to ``1e-8 * (1 + E0)``.
    shrink : float
        Backtracking factor.
    sufficient_decrease : float
        A trial step ``x - s*g`` from ``x`` is accepted when the energy drops
        by at least ``sufficient_decrease * s * |g|^2``.  Once energy
        differences reach rounding level the same test is applied to the
        quadratic model built from the gradient change along the step.
    growth : float
        Step enlargement after an accepted iteration.
    momentum : bool
        Nesterov acceleration with restart on energy increase.
    progress : str, optional
        CSV path receiving ``iter, energy, grad_norm, step`` rows.
    """

    max_iters: int = 100_000
    grad_tol: Optional[float] = None
    shrink: float = 0.5
    sufficient_decrease: float = 0.5
    growth: float = 1.2
    momentum: bool = True
    initial_step: Optional[float] = None
    progress: Optional[str] = None
    record_history: bool = True

    def __post_init__(self):
        if self.grad_tol is not None and not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")
        if not 0 < self.sufficient_decrease < 1:
            raise ValueError("sufficient_decrease must lie in (0, 1)")


@dataclass
class Solution:
    field: GridField
    value: float
    iterations: int
    final_grad_norm: float
    converged: bool
    grad_tol: float = 0.0
    history: list = field(default_factory=list)


def minimize_smooth(fun: Callable, x0, free, opts: MinimizeOptions, project: Callable | None = None):
    """
    Minimize a smooth convex function over the free entries of ``x``.

    Parameters
    ----------
    fun : callable
        ``fun(x) -> (value, gradient)``.
    x0 : ndarray
    free : ndarray of bool or None
        Broadcastable to ``x0``; fixed entries never move.
    project : callable, optional
        Applied to every iterate (used for the cell-problem gauge).

    Returns
    -------
    x, value, iterations, grad_norm, converged, history, tol
    """
    x = np.array(x0, dtype=float)
    if project is not None:
        x = project(x)
    fmask = np.ones(x.shape, dtype=bool) if free is None else np.broadcast_to(free, x.shape)

    def fg(v):
        e, g = fun(v)
        return e, np.where(fmask, g, 0.0)

    E, g = fg(x)
    tol = opts.grad_tol if opts.grad_tol is not None else 1e-8 * (1.0 + abs(E))
    history = [E] if opts.record_history else []
    gnorm = float(np.max(np.abs(g))) if g.size else 0.0
    writer = None
    fh = None
    if opts.progress:
        fh = open(opts.progress, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["iter", "energy", "grad_norm", "step"])
    step = opts.initial_step
    if step is None:
        # one probe along -g to set the scale of the first step
        gg = float(np.sum(g * g))
        step = 1.0
        if gg > 0:
            e1, g1 = fg(x - 1e-6 * g)
            curv = float(np.sum((g - g1) * g)) / (1e-6 * gg)
            step = 1.0 / curv if curv > 0 else 1.0
    y, Ey, gy = x, E, g
    t = 1.0
    it = 0
    converged = gnorm <= tol
    c = opts.sufficient_decrease
    try:
        while not converged and it < opts.max_iters:
            it += 1
            gg = float(np.sum(gy * gy))
            while True:
                xn = y - step * gy
                if project is not None:
                    xn = project(xn)
                En, gn = fg(xn)
                if En <= Ey - c * step * gg or step < 1e-300:
                    break
                if abs(En - Ey) <= _noise(Ey):
                    # energy differences are lost in rounding; test the
                    # curvature along the step instead
                    curv = float(np.sum((gy - gn) * gy)) / (step * gg)
                    if step * curv <= 2 * (1 - c):
                        break
                step *= opts.shrink
            if En > E + _noise(E):
                # momentum overshoot: restart from the last accepted iterate
                if y is x:
                    break
                y, Ey, gy, t = x, E, g, 1.0
                continue
            xp = x
            x, E, g = xn, En, gn
            if opts.record_history:
                history.append(E)
            gnorm = float(np.max(np.abs(g)))
            if writer is not None:
                writer.writerow([it, repr(E), repr(gnorm), repr(step)])
            if gnorm <= tol:
                converged = True
                break
            if opts.momentum:
                tn = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
                y = x + ((t - 1) / tn) * (x - xp)
                if project is not None:
                    y = project(y)
                t = tn
                Ey, gy = fg(y)
            else:
                y, Ey, gy = x, E, g
            step *= opts.growth
    finally:
        if fh is not None:
            fh.close()
    return x, E, it, gnorm, converged, history, tol


def _noise(E):
    # rounding level of an energy evaluation of size |E|
    return 1e-13 * abs(E)


def _require_convex(spec):
    if not spec.convex_in_z:
        raise ValueError("solver requires convexity")
    if not spec.differentiable:
        raise ValueError("density not differentiable")


def _solution(dom, x, E, it, gnorm, conv, hist, tol):
    return Solution(GridField(dom, x), float(E), it, gnorm, conv, tol, hist)


def solve_dirichlet(
    spec: DensitySpec,
    eps: float,
    g,
    r: float,
    dom: Domain,
    opts: MinimizeOptions | None = None,
    kernel_support=None,
    u0: GridField | None = None,
) -> Solution:
    """
    Minimize ``F_eps`` over fields equal to ``g`` on the layer of width ``eps*r``.

    Parameters
    ----------
    g : callable or GridField
        Boundary datum; a callable is sampled on the grid.
    r : float
        Layer width in units of ``eps``.
    u0 : GridField, optional
        Initial guess for the free nodes (defaults to ``g``).
    """
    _require_convex(spec)
    opts = opts or MinimizeOptions()
    gf = g if isinstance(g, GridField) else sample_function(dom, g, spec.codim)
    layer = build_layer_mask(dom, eps * r).selected
    x0 = gf.values.copy()
    if u0 is not None:
        x0 = np.where(layer[..., None], gf.values, u0.values)
    plan = Plan(spec, dom, eps, kernel_support)
    free = ~layer[..., None]
    x, E, it, gn, conv, hist, tol = minimize_smooth(plan.energy_grad, x0, free, opts)
    E = plan.energy(x).total
    return _solution(dom, x, E, it, gn, conv, hist, tol)


def _gauge(x):
    axes = tuple(range(x.ndim - 1))
    return x - x.mean(axis=axes, keepdims=True)


def solve_cell(spec: DensitySpec, M, N: int, T=None, opts: MinimizeOptions | None = None) -> Solution:
    """
    Periodic cell problem at unit scale.

    The unknown is the corrector ``w = v - Mx`` on the ``N^d`` periodic grid
    of ``Q_1``; pairs reach up to ``|xi| <= T`` and the mean of ``w`` is fixed
    to zero.  The returned value is the energy per unit cell.
    """
    _require_convex(spec)
    if not spec.periodic:
        raise ValueError("cell problem requires a periodic density")
    opts = opts or MinimizeOptions()
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape != (spec.codim, spec.dim):
        raise ValueError("probe matrix has the wrong shape")
    dom = Domain(spec.dim, 1.0, 1.0 / N, "periodic")
    plan = Plan(spec, dom, 1.0, T, affine=M)
    x0 = np.zeros(dom.shape + (spec.codim,))
    x, E, it, gn, conv, hist, tol = minimize_smooth(plan.energy_grad, x0, None, opts, project=_gauge)
    E = plan.energy(x).total
    return _solution(dom, x, E, it, gn, conv, hist, tol)


def box_problem(spec: DensitySpec, M, R: int, N: int, T=None, layer_width=None, exterior="affine"):
    """
    Discretize the box problem on ``Q_R = [0, R)^d`` at ``N`` nodes per unit length.

    With ``exterior="affine"`` pairs start in ``Q_R`` and may end outside,
    where ``v = Mx``.  With ``exterior="truncated"`` both ends stay in
    ``Q_R``.  Returns ``(plan, x0, free, domain)``.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    h = 1.0 / N
    T = spec.radius if T is None else min(float(T), spec.radius)
    if not math.isfinite(T):
        raise ValueError("interaction range must be finite; pass T")
    width = max(1.0, T) if layer_width is None else float(layer_width)
    RN = check_divides(float(R), h, "box")
    if exterior == "affine":
        K = int(math.ceil(T / h - 1e-9))
    elif exterior == "truncated":
        K = 0
    else:
        raise ValueError("exterior must be 'affine' or 'truncated'")
    length = (RN - 1 + 2 * K) * h
    dom = Domain(spec.dim, length, h, "truncated")
    coords = dom.coords() - K * h
    x0 = coords @ M.T
    inside = np.all((coords > -0.5 * h) & (coords < R - 0.5 * h), axis=-1)
    # distance to the outermost source nodes, so every free node has a full stencil
    dist = np.min(np.minimum(coords, (R - h) - coords), axis=-1)
    free = inside & (dist >= width - 1e-9)
    if spec.x_independent:
        shifted = spec
    else:
        # the plan evaluates y = x/eps on the extended grid; shift back to Q_R coordinates
        shifted = _translate(spec, -K * h)
    plan = Plan(shifted, dom, 1.0, T, source_mask=inside)
    return plan, x0, free, dom


def _translate(spec, offset):
    from dataclasses import replace

    if spec.separable:
        if spec.coef is None:
            return spec
        c = spec.coef
        return replace(spec, coef=lambda y, xi: c(y + offset, xi))
    pr, dpr = spec.profile, spec.dprofile
    return replace(
        spec,
        profile=lambda y, xi, z: pr(y + offset, xi, z),
        dprofile=None if dpr is None else (lambda y, xi, z: dpr(y + offset, xi, z)),
    )


def solve_box(
    spec: DensitySpec,
    M,
    R: int,
    N: int = 16,
    T=None,
    opts: MinimizeOptions | None = None,
    layer_width=None,
    exterior="affine",
) -> Solution:
    """
    Normalized box minimum ``R^-d min F(v)`` with ``v = Mx`` on the layer of width ``max(1, T)``.

    The field returned lives on the extended grid used by :func:`box_problem`.
    """
    _require_convex(spec)
    opts = opts or MinimizeOptions()
    plan, x0, free, dom = box_problem(spec, M, R, N, T, layer_width, exterior)
    x, E, it, gn, conv, hist, tol = minimize_smooth(plan.energy_grad, x0, free[..., None], opts)
    E = plan.energy(x).total / float(R) ** spec.dim
    return _solution(dom, x, E, it, gn, conv, hist, tol)
