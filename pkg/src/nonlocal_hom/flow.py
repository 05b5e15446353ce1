"""
Gradient flows of nonlocal energies and local reference flows.

Flows are taken in the discrete ``L^2`` inner product given by the node
weights of the grid (``h^d`` on periodic grids), so the velocity is the
energy gradient divided by the node weight.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .energy import DensitySpec, Plan
from .grid import GridField
from .kernel import Kernel, ahom_matrix, integrate_kernel
from .minimize import MinimizeOptions, minimize_smooth

__all__ = [
    "Trajectory",
    "FlowError",
    "mm_step",
    "mm_trajectory",
    "explicit_flow",
    "stability_bound",
    "reference_local_flow",
    "compare_flows",
    "decimation",
]


class FlowError(RuntimeError):
    pass


@dataclass
class Trajectory:
    """
    Time-stepped solution.

    ``times`` and ``energies`` are kept at every step; ``states`` only at
    ``state_times`` (a decimated subset that always contains both ends).
    """

    times: np.ndarray
    energies: np.ndarray
    step_norms: np.ndarray
    states: list
    state_times: np.ndarray
    tau: float = 0.0
    flagged: list = field(default_factory=list)

    @property
    def final(self) -> GridField:
        return self.states[-1]

    def state_at(self, t: float) -> GridField:
        """Linear interpolation between stored states."""
        st = self.state_times
        if t <= st[0]:
            return self.states[0]
        if t >= st[-1] - 1e-12 * max(1.0, abs(st[-1])):
            return self.states[-1]
        j = int(np.searchsorted(st, t, side="right")) - 1
        t0, t1 = st[j], st[j + 1]
        if abs(t - t0) <= 1e-12 * max(1.0, abs(t)):
            return self.states[j]
        lam = (t - t0) / (t1 - t0)
        a, b = self.states[j], self.states[j + 1]
        return GridField(a.domain, (1 - lam) * a.values + lam * b.values)


def decimation(t_end: float, tau: float) -> int:
    return max(1, math.ceil(t_end / (100 * tau) - 1e-9))


def _check_flow_spec(spec):
    if spec.p < 2:
        raise ValueError("flows require p >= 2 (p in (1, 2) is outside the supported theory)")
    if not spec.convex_in_z:
        raise ValueError("flows require a convex density")
    if not spec.differentiable:
        raise ValueError("density not differentiable")


def _steps(t_end, tau):
    n = int(round(t_end / tau))
    if n < 1 or abs(n * tau - t_end) > 1e-9 * max(1.0, t_end):
        raise ValueError("t_end must be a multiple of tau")
    return n


def _weights(dom):
    return dom.node_weights()[..., None]


def _mm_solve(plan, prev, tau, free, opts, w):
    def fun(x):
        e, g = plan.energy_grad(x)
        d = x - prev
        return e + float(np.sum(w * d * d)) / (2 * tau), g + w * d / tau

    return minimize_smooth(fun, prev, free, opts)


def _mm_opts(opts, plan, prev):
    return MinimizeOptions() if opts is None else opts


def mm_step(
    spec: DensitySpec,
    eps: float,
    u_prev: GridField,
    tau: float,
    opts: Optional[MinimizeOptions] = None,
    free_mask=None,
    kernel_support=None,
) -> GridField:
    """
    One minimizing-movement step: ``argmin F(u) + |u - u_prev|^2 / (2 tau)``.

    ``free_mask`` pins the remaining nodes at their previous values
    (Dirichlet layers).
    """
    _check_flow_spec(spec)
    if not tau > 0:
        raise ValueError("tau must be positive")
    plan = Plan(spec, u_prev.domain, eps, kernel_support)
    free = None if free_mask is None else np.asarray(free_mask, dtype=bool).reshape(u_prev.domain.shape)[..., None]
    x, *_rest, conv, _h, _t = _mm_solve(plan, u_prev.values, tau, free, _mm_opts(opts, plan, u_prev.values), _weights(u_prev.domain))
    if not conv:
        raise FlowError("minimizing-movement step did not converge")
    return GridField(u_prev.domain, x)


def mm_trajectory(
    spec: DensitySpec,
    eps: float,
    u0: GridField,
    tau: float,
    t_end: float,
    opts: Optional[MinimizeOptions] = None,
    free_mask=None,
    kernel_support=None,
) -> Trajectory:
    """
    Iterate :func:`mm_step` up to ``t_end`` with warm starts.

    A step whose inner solve fails is flagged and the trajectory stops there.
    """
    _check_flow_spec(spec)
    n = _steps(t_end, tau)
    dom = u0.domain
    plan = Plan(spec, dom, eps, kernel_support)
    w = _weights(dom)
    free = None if free_mask is None else np.asarray(free_mask, dtype=bool).reshape(dom.shape)[..., None]
    keep = decimation(t_end, tau)
    x = u0.values.copy()
    energies = [plan.energy(x).total]
    norms, states, st, flagged = [], [u0], [0.0], []
    for k in range(1, n + 1):
        x_new, *_rest, conv, _h, _t = _mm_solve(plan, x, tau, free, _mm_opts(opts, plan, x), w)
        if not conv:
            flagged.append(k)
            break
        norms.append(math.sqrt(float(np.sum(w * (x_new - x) ** 2))) / tau)
        x = x_new
        energies.append(plan.energy(x).total)
        if k % keep == 0 or k == n:
            states.append(GridField(dom, x.copy()))
            st.append(k * tau)
    times = tau * np.arange(len(energies))
    if flagged and st[-1] != times[-1]:
        states.append(GridField(dom, x.copy()))
        st.append(times[-1])
    return Trajectory(times, np.array(energies), np.array(norms), states, np.array(st), tau, flagged)


def _l2_velocity(plan, x, w, free):
    e, g = plan.energy_grad(x)
    v = g / w
    if free is not None:
        v = np.where(free, v, 0.0)
    return e, v


def stability_bound(spec: DensitySpec, eps: float, u0: GridField, iters: int = 20, kernel_support=None, seed: int = 0) -> float:
    """
    ``1.9 / L`` with ``L`` the power-iteration estimate of the largest
    eigenvalue of the linearized ``L^2`` gradient at ``u0``.

    Hessian-vector products use central differences of the gradient (exact
    for quadratic energies).
    """
    dom = u0.domain
    plan = Plan(spec, dom, eps, kernel_support)
    w = _weights(dom)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(u0.values.shape)
    v /= np.linalg.norm(v)
    x = u0.values
    delta = 1e-6 * (1.0 + float(np.max(np.abs(x))))
    L = 0.0
    for _ in range(iters):
        _, gp = plan.energy_grad(x + delta * v)
        _, gm = plan.energy_grad(x - delta * v)
        Hv = (gp - gm) / (2 * delta) / w
        L = float(np.linalg.norm(Hv))
        if L == 0:
            return math.inf
        v = Hv / L
    return 1.9 / L


def explicit_flow(
    spec: DensitySpec,
    eps: float,
    u0: GridField,
    tau: float,
    t_end: float,
    free_mask=None,
    kernel_support=None,
) -> Trajectory:
    """
    Forward Euler ``u <- u - tau * grad_F(u) / w`` with node weights ``w``.

    Raises :class:`FlowError` as soon as the energy increases.
    """
    _check_flow_spec(spec)
    n = _steps(t_end, tau)
    dom = u0.domain
    plan = Plan(spec, dom, eps, kernel_support)
    w = _weights(dom)
    free = None if free_mask is None else np.asarray(free_mask, dtype=bool).reshape(dom.shape)[..., None]
    keep = decimation(t_end, tau)
    x = u0.values.copy()
    E, v = _l2_velocity(plan, x, w, free)
    energies, norms = [plan.energy(x).total], []
    states, st = [u0], [0.0]
    for k in range(1, n + 1):
        norms.append(math.sqrt(float(np.sum(w * v * v))))
        x = x - tau * v
        E_new, v = _l2_velocity(plan, x, w, free)
        if E_new > E + 1e-12 * max(1.0, abs(E)):
            raise FlowError("step size exceeds stability bound")
        E = E_new
        energies.append(plan.energy(x).total)
        if k % keep == 0 or k == n:
            states.append(GridField(dom, x.copy()))
            st.append(k * tau)
    times = tau * np.arange(n + 1)
    return Trajectory(times, np.array(energies), norms, states, np.array(st), tau)


def _c_p(k, p):
    return float(integrate_kernel(k, lambda x: np.abs(x[:, 0]) ** p, p, p=p))


def reference_local_flow(
    k: Kernel,
    p: float,
    u0: GridField,
    t_end: float,
    mode: str = "spectral_p2",
    times: Optional[Sequence[float]] = None,
) -> Trajectory:
    """
    Local limit flow on a periodic box.

    ``spectral_p2`` solves ``u_t = div(A_hom Du)`` exactly mode by mode;
    ``fd_plaplace`` integrates ``u_t = c_p div(|Du|^(p-2) Du)`` with explicit
    finite differences (radial kernels only).  These are the limits of the
    flows of ``a(xi)|z|^p / p``.
    """
    dom = u0.domain
    if not dom.periodic:
        raise ValueError("reference flows need a periodic domain")
    if u0.codim != 1:
        raise ValueError("reference flows are scalar")
    times = np.linspace(0.0, t_end, 101) if times is None else np.asarray(times, dtype=float)
    if mode == "spectral_p2":
        if p != 2:
            raise ValueError("spectral reference requires p = 2")
        A = ahom_matrix(k)
        freqs = np.meshgrid(*[2 * np.pi * np.fft.fftfreq(n, d=L / n) for n, L in zip(dom.shape, dom.lengths)], indexing="ij")
        q = np.stack(freqs, axis=-1)
        lam = np.einsum("...i,ij,...j->...", q, A, q)
        uh = np.fft.fftn(u0.values[..., 0])
        states = [GridField(dom, np.real(np.fft.ifftn(uh * np.exp(-lam * t)))) for t in times]
    elif mode == "fd_plaplace":
        if not k.radial:
            raise ValueError("fd_plaplace requires a radial kernel")
        states = _fd_plaplace(k, p, u0, times)
    else:
        raise ValueError("mode must be 'spectral_p2' or 'fd_plaplace'")
    if mode == "spectral_p2":
        energies = np.array([_quadratic_energy(A, s) for s in states])
    else:
        cp = _c_p(k, p)
        energies = np.array([_plaplace_energy(cp, p, s) for s in states])
    return Trajectory(times, energies, np.zeros(max(len(times) - 1, 0)), states, times.copy())


def _fwd(u, axis):
    return np.roll(u, -1, axis=axis) - u


def _quadratic_energy(A, u):
    dom = u.domain
    g = np.stack([_fwd(u.values[..., 0], a) / dom.spacing for a in range(dom.dim)], axis=-1)
    return 0.5 * dom.cell_volume * float(np.sum(np.einsum("...i,ij,...j->...", g, A, g)))


def _plaplace_energy(cp, p, u):
    dom = u.domain
    g2 = sum((_fwd(u.values[..., 0], a) / dom.spacing) ** 2 for a in range(dom.dim))
    return cp / p * dom.cell_volume * float(np.sum(g2 ** (p / 2)))


def _fd_plaplace(k, p, u0, times):
    dom = u0.domain
    h = dom.spacing
    cp = _c_p(k, p)
    u = u0.values[..., 0].copy()
    out = [GridField(dom, u.copy())]
    t = 0.0
    for target in times[1:]:
        while t < target - 1e-14:
            D = [_fwd(u, a) / h for a in range(dom.dim)]
            mag2 = sum(d * d for d in D)
            coef = mag2 ** ((p - 2) / 2) if p != 2 else np.ones_like(u)
            lip = cp * max((p - 1) * float(np.max(coef)), 1e-300)
            dt = min(target - t, 0.4 * h * h / (dom.dim * lip))
            div = sum((coef * d - np.roll(coef * d, 1, axis=a)) / h for a, d in enumerate(D))
            u = u + dt * cp * div
            t += dt
        out.append(GridField(dom, u.copy()))
    return out


def compare_flows(traj_a: Trajectory, traj_b: Trajectory, times: Sequence[float]) -> list:
    """Per-time ``L^2`` and sup distances as ``(t, l2, sup)`` rows."""
    da, db = traj_a.states[0].domain, traj_b.states[0].domain
    if da != db:
        raise ValueError("trajectories live on different domains")
    w = da.node_weights()[..., None]
    rows = []
    for t in times:
        a, b = traj_a.state_at(t).values, traj_b.state_at(t).values
        diff = a - b
        rows.append((float(t), math.sqrt(float(np.sum(w * diff * diff))), float(np.max(np.abs(diff)))))
    return rows
