"""Exhaustive reference implementations used as test oracles."""
import math

import numpy as np

from nonlocal_hom.kernel import lattice_weights


def lattice_table(spec, dom, eps, quadrature="cell"):
    """Map integer shift -> (xi, weight) for the xi lattice of ``spec``."""
    ratio = int(round(eps / dom.spacing))
    step = 1.0 / ratio
    if quadrature == "cell" and spec.kernel is not None:
        idx, xis, w = lattice_weights(spec.kernel, step, spec.radius)
    else:
        kmax = int(math.floor(spec.radius / step + 1e-9))
        ks = np.arange(-kmax, kmax + 1)
        idx = np.stack(np.meshgrid(*([ks] * dom.dim), indexing="ij"), axis=-1).reshape(-1, dom.dim)
        xis = idx * step
        keep = np.sqrt(np.sum(xis**2, axis=-1)) <= spec.radius * (1 + 1e-12)
        idx, xis = idx[keep], xis[keep]
        w = np.full(len(idx), step**dom.dim)
        if spec.kernel is not None:
            w = w * spec.kernel(xis)
    return {tuple(int(c) for c in k): (x, float(v)) for k, x, v in zip(idx, xis, w) if v > 0}


def double_loop_energy(spec, u, eps, quadrature="cell"):
    """
    Visit every ordered node pair, keep those whose offset is a lattice
    point inside the box (or wrapped, when periodic), and fsum the terms.
    """
    dom = u.domain
    table = lattice_table(spec, dom, eps, quadrature)
    shape = dom.shape
    nodes = list(np.ndindex(*shape))
    coords = dom.coords()
    vals = u.values
    hd = dom.cell_volume
    terms = []
    for a in nodes:
        for b in nodes:
            off = tuple(bj - aj for aj, bj in zip(a, b))
            cands = [off]
            if dom.periodic:
                # every lattice shift congruent to the offset
                cands = [k for k in table if all((kj - oj) % n == 0 for kj, oj, n in zip(k, off, shape))]
            for k in cands:
                if k not in table:
                    continue
                xi, w = table[k]
                z = ((vals[b] - vals[a]) / eps)[None, :]
                y = coords[a][None, :] / eps
                terms.append(w * hd * spec.inner(y, xi, z)[0])
    return math.fsum(terms)


def dense_quadratic(spec, dom, eps, quadrature="cell"):
    """
    Assemble ``E(u) = u^T K u / 2`` for a quadratic density with ``f(.,.,0)=0``
    by polarization on unit vectors.
    """
    from nonlocal_hom.energy import eval_F
    from nonlocal_hom.grid import GridField

    n = dom.size
    e = np.eye(n)
    diag = np.array([eval_F(spec, GridField(dom, e[i].reshape(dom.shape)), eps, quadrature=quadrature).total for i in range(n)])
    K = np.empty((n, n))
    for i in range(n):
        K[i, i] = 2 * diag[i]
        for j in range(i + 1, n):
            s = eval_F(spec, GridField(dom, (e[i] + e[j]).reshape(dom.shape)), eps, quadrature=quadrature).total
            K[i, j] = K[j, i] = s - diag[i] - diag[j]
    return K
