"""
Graph energies on random point clouds.

The energy of values ``u_i`` on a cloud ``x_1..x_n`` at scale ``eps`` is
``1/(eps^d n^2) sum_{i,j} f((x_i - x_j)/eps, (u_i - u_j)/eps)``.  Pairs are
found with a cell list of side ``eps*R`` and summed with :func:`math.fsum`, so
the result does not depend on the visiting order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .grid import Domain, GridField

__all__ = [
    "PointCloud",
    "Density",
    "uniform",
    "truncated_affine",
    "sample_cloud",
    "eval_discrete_energy",
    "brute_force_energy",
    "nearest_interpolate",
    "cloud_convergence_run",
    "default_eps_rule",
]


@dataclass(frozen=True)
class Density:
    """Sampling density on the box ``prod [0, lengths]`` with known sup."""

    name: str
    func: Callable
    sup: float
    lengths: tuple

    def __call__(self, x):
        return self.func(np.asarray(x, dtype=float))

    @property
    def dim(self):
        return len(self.lengths)


def uniform(dim: int = 2, lengths=1.0) -> Density:
    L = tuple(float(v) for v in np.broadcast_to(lengths, (dim,)))
    vol = float(np.prod(L))
    return Density("uniform", lambda x: np.full(x.shape[:-1], 1.0 / vol), 1.0 / vol, L)


def truncated_affine(dim: int = 2, c: float = 1.0, beta: float = 0.0, lengths=1.0) -> Density:
    """Density proportional to ``c + beta * x_1``; must stay positive on the box."""
    L = tuple(float(v) for v in np.broadcast_to(lengths, (dim,)))
    lo, hi = c, c + beta * L[0]
    if min(lo, hi) <= 0:
        raise ValueError("density must be bounded below by a positive constant")
    vol = float(np.prod(L))
    Z = vol * (c + 0.5 * beta * L[0])
    return Density("truncated_affine", lambda x: (c + beta * x[..., 0]) / Z, max(lo, hi) / Z, L)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    lengths: tuple
    seed: int
    density_name: str

    def __post_init__(self):
        if len(self.points) < 1:
            raise ValueError("empty cloud")
        L = np.asarray(self.lengths)
        if np.any(self.points < 0) or np.any(self.points > L):
            raise ValueError("points must lie in the box")

    @property
    def n(self):
        return len(self.points)

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def weights(self):
        return np.full(self.n, 1.0 / self.n)


def sample_cloud(rho: Density, n: int, seed: int) -> PointCloud:
    """
    ``n`` i.i.d. draws from ``rho`` by rejection from the uniform box.

    Every round draws the proposals and then the acceptance variables, also
    for the uniform density, so equal seeds give equal streams whenever the
    acceptance probability is one.
    """
    if not (np.isfinite(rho.sup) and rho.sup > 0):
        raise ValueError("density cannot be normalized")
    rng = np.random.default_rng(seed)
    L = np.asarray(rho.lengths)
    out, have = [], 0
    while have < n:
        m = n - have
        prop = rng.random((m, rho.dim)) * L
        acc = rng.random(m) * rho.sup <= rho(prop)
        out.append(prop[acc])
        have += int(acc.sum())
    pts = np.concatenate(out)[:n]
    return PointCloud(pts, tuple(L), seed, rho.name)


def _cells(points, side):
    keys = np.floor(points / side).astype(np.int64)
    order = np.lexsort(keys.T[::-1])
    skeys = keys[order]
    change = np.ones(len(order), dtype=bool)
    change[1:] = np.any(skeys[1:] != skeys[:-1], axis=1)
    starts = np.flatnonzero(change)
    ends = np.append(starts[1:], len(order))
    table = {tuple(skeys[s]): order[s:e] for s, e in zip(starts, ends)}
    return table


def eval_discrete_energy(f: Callable, cloud: PointCloud, eps: float, u_values, R: float = 1.0) -> float:
    """
    Point-cloud energy with interaction radius ``eps * R``.

    Parameters
    ----------
    f : callable
        ``f(xi, z)`` on ``(k, d)`` and ``(k, m)`` arrays; zero for ``|xi| > R``.
    u_values : array_like
        Shape ``(n,)`` or ``(n, m)``.
    """
    x = cloud.points
    u = np.asarray(u_values, dtype=float).reshape(cloud.n, -1)
    d = cloud.dim
    side = eps * R * (1 + 1e-9)
    table = _cells(x, side)
    offsets = np.stack(np.meshgrid(*([np.arange(-1, 2)] * d), indexing="ij"), axis=-1).reshape(-1, d)
    terms = []
    for key in sorted(table):
        I = table[key]
        for off in offsets:
            J = table.get(tuple(np.asarray(key) + off))
            if J is None:
                continue
            xi = (x[I][:, None, :] - x[J][None, :, :]) / eps
            near = np.sum(xi * xi, axis=-1) <= (R * (1 + 1e-9)) ** 2
            if not near.any():
                continue
            ii, jj = np.nonzero(near)
            z = (u[I][ii] - u[J][jj]) / eps
            terms.append(f(xi[ii, jj], z))
    if not terms:
        return 0.0
    return math.fsum(np.concatenate(terms)) / (eps**d * cloud.n**2)


def brute_force_energy(f: Callable, cloud: PointCloud, eps: float, u_values) -> float:
    """Reference double loop over all ``n^2`` ordered pairs."""
    x = cloud.points
    u = np.asarray(u_values, dtype=float).reshape(cloud.n, -1)
    terms = []
    for i in range(cloud.n):
        for j in range(cloud.n):
            xi = ((x[i] - x[j]) / eps)[None]
            z = ((u[i] - u[j]) / eps)[None]
            terms.append(float(f(xi, z)[0]))
    return math.fsum(terms) / (eps**cloud.dim * cloud.n**2)


def nearest_interpolate(cloud: PointCloud, u_values, dom: Domain) -> GridField:
    """Each node takes the value of its nearest cloud point (lowest index on ties)."""
    u = np.asarray(u_values, dtype=float).reshape(cloud.n, -1)
    nodes = dom.coords().reshape(-1, dom.dim)
    idx = np.empty(len(nodes), dtype=int)
    chunk = max(1, 2_000_000 // cloud.n)
    for s in range(0, len(nodes), chunk):
        blk = nodes[s : s + chunk]
        d2 = np.sum((blk[:, None, :] - cloud.points[None, :, :]) ** 2, axis=-1)
        idx[s : s + chunk] = np.argmin(d2, axis=1)
    return GridField(dom, u[idx].reshape(dom.shape + (u.shape[1],)))


def default_eps_rule(d: int, scale: float = 1.0) -> Callable:
    """``eps(n) = scale * (log n / n)^(1/(d+2))``."""
    return lambda n: scale * (math.log(n) / n) ** (1.0 / (d + 2))


def _rho_sq_integral(rho: Density, h: float = 1e-2) -> float:
    axes = [(np.arange(int(round(L / h))) + 0.5) * h for L in rho.lengths]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, rho.dim)
    return float(np.sum(rho(pts) ** 2)) * h**rho.dim


def cloud_convergence_run(
    f: Callable,
    rho: Density,
    M,
    n_list: Sequence[int],
    eps_rule: Callable | None = None,
    seeds: Sequence[int] = (0, 1, 2),
    R: float = 1.0,
    limit_density: float | None = None,
) -> dict:
    """
    Energies of ``u = M x`` on sampled clouds against the local limit.

    The target is ``int rho^2 * limit_density`` where ``limit_density`` is
    ``int f(xi, M xi) dxi`` (pass the closed form, e.g. from
    ``fhom_closed_form``).  Returns rows per ``(n, seed)`` and per-``n``
    mean and spread of the relative gap.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    eps_rule = eps_rule or default_eps_rule(rho.dim)
    if limit_density is None:
        raise ValueError("limit_density is required")
    target = _rho_sq_integral(rho) * float(limit_density)
    rows, summary = [], {}
    for n in n_list:
        eps = float(eps_rule(n))
        gaps = []
        for s in seeds:
            cloud = sample_cloud(rho, n, s)
            u = cloud.points @ M.T
            E = eval_discrete_energy(f, cloud, eps, u, R)
            gap = abs(E - target) / target if target > 0 else abs(E - target)
            gaps.append(gap)
            rows.append({"n": n, "seed": s, "eps": eps, "energy": E, "target": target, "gap": gap})
        summary[n] = {"mean_gap": float(np.mean(gaps)), "spread": float(np.std(gaps)), "eps": eps}
    return {"rows": rows, "summary": summary, "target": target}
