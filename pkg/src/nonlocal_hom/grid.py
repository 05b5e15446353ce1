"""
Uniform box grids, vector-valued fields on them and boundary-layer masks.

Truncated domains are vertex grids: an axis of length ``L`` with spacing
``h`` carries the ``L/h + 1`` nodes ``0, h, ..., L``.  Periodic domains
identify the two ends and carry ``L/h`` nodes.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "Domain",
    "GridField",
    "LayerMask",
    "build_layer_mask",
    "admissible_pairs",
    "sample_function",
    "fd_gradient",
    "check_divides",
]

MODES = ("truncated", "periodic")
_RTOL = 1e-9


def check_divides(length, h, what="grid"):
    """Return ``length / h`` as an int, or raise if it is not an integer."""
    q = length / h
    n = int(round(q))
    if n < 1 or abs(q - n) > _RTOL * max(1.0, q):
        raise ValueError(f"incommensurate {what}: {length!r} is not a multiple of {h!r}")
    return n


@dataclass(frozen=True)
class Domain:
    """
    Axis-aligned box ``prod_k [0, lengths[k]]`` with uniform spacing.

    Parameters
    ----------
    dim : int
    lengths : sequence of float
    spacing : float
        Grid spacing ``h``; must divide every length.
    boundary_mode : {"truncated", "periodic"}
    """

    dim: int
    lengths: tuple
    spacing: float
    boundary_mode: str = "truncated"

    def __post_init__(self):
        lengths = tuple(float(x) for x in np.broadcast_to(np.asarray(self.lengths, dtype=float), (self.dim,)))
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "spacing", float(self.spacing))
        if self.boundary_mode not in MODES:
            raise ValueError(f"boundary_mode must be one of {MODES}")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        for L in lengths:
            if not L > 0:
                raise ValueError("lengths must be positive")
            check_divides(L, self.spacing)
        if min(self.shape) < 2:
            raise ValueError("need at least 2 nodes per axis")

    @property
    def periodic(self) -> bool:
        return self.boundary_mode == "periodic"

    @property
    def shape(self) -> tuple:
        extra = 0 if self.periodic else 1
        return tuple(check_divides(L, self.spacing) + extra for L in self.lengths)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    def node_weights(self) -> np.ndarray:
        """Trapezoidal node weights (``h^d`` inside, halved per truncated face)."""
        w = np.full(self.shape, self.cell_volume)
        if not self.periodic:
            for axis in range(self.dim):
                idx = [slice(None)] * self.dim
                for end in (0, -1):
                    idx[axis] = end
                    w[tuple(idx)] *= 0.5
        return w

    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``shape + (dim,)``."""
        axes = [np.arange(n) * self.spacing for n in self.shape]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


@dataclass(frozen=True)
class GridField:
    """Samples of ``u : box -> R^m``; ``values`` has shape ``domain.shape + (m,)``."""

    domain: Domain
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape == self.domain.shape:
            v = v[..., None]
        if v.shape[:-1] != self.domain.shape:
            raise ValueError(f"values of shape {v.shape} do not fit domain {self.domain.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def codim(self) -> int:
        return self.values.shape[-1]

    def with_values(self, values) -> "GridField":
        return GridField(self.domain, values)

    def l2_norm(self) -> float:
        w = self.domain.node_weights()[..., None]
        return float(np.sqrt(np.sum(w * self.values**2)))

    # serialisation: header line then row-major node values

    def header(self) -> list:
        dom = self.domain
        return [dom.dim, self.codim, *dom.shape, repr(dom.spacing), dom.boundary_mode]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(str(x) for x in self.header()) + "\n")
        for row in self.values.reshape(-1, self.codim):
            buf.write(",".join(repr(float(x)) for x in row) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "GridField":
        lines = text.strip().splitlines()
        head = lines[0].split(",")
        d, m = int(head[0]), int(head[1])
        shape = tuple(int(s) for s in head[2 : 2 + d])
        h = float(head[2 + d])
        mode = head[3 + d]
        vals = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])
        return cls(_domain_from_shape(d, shape, h, mode), vals.reshape(shape + (m,)))

    def to_bytes(self) -> bytes:
        head = ",".join(str(x) for x in self.header()).encode()
        return len(head).to_bytes(4, "little") + head + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "GridField":
        n = int.from_bytes(blob[:4], "little")
        head = blob[4 : 4 + n].decode().split(",")
        d, m = int(head[0]), int(head[1])
        shape = tuple(int(s) for s in head[2 : 2 + d])
        vals = np.frombuffer(blob[4 + n :], dtype="<f8").reshape(shape + (m,))
        return cls(_domain_from_shape(d, shape, float(head[2 + d]), head[3 + d]), vals.copy())


def _domain_from_shape(d, shape, h, mode):
    extra = 0 if mode == "periodic" else 1
    return Domain(d, tuple((n - extra) * h for n in shape), h, mode)


@dataclass(frozen=True)
class LayerMask:
    domain: Domain
    width: float
    selected: np.ndarray

    def __len__(self):
        return int(self.selected.sum())


def build_layer_mask(dom: Domain, width: float) -> LayerMask:
    """
    Nodes whose sup-norm distance to the box complement is below ``width``.

    The layer is ``ceil(width/h)`` nodes thick on every face.
    """
    if dom.periodic:
        raise ValueError("mask undefined for periodic domains")
    if width < 0:
        raise ValueError("width must be nonnegative")
    layers = math.ceil(width / dom.spacing - _RTOL)
    sel = np.zeros(dom.shape, dtype=bool)
    for axis, n in enumerate(dom.shape):
        i = np.arange(n)
        near = (i < layers) | (n - 1 - i < layers)
        shp = [1] * dom.dim
        shp[axis] = n
        sel |= near.reshape(shp)
    return LayerMask(dom, float(width), sel)


def _as_shift(dom, shift):
    s = np.atleast_1d(np.asarray(shift, dtype=float))
    if s.shape != (dom.dim,):
        raise ValueError("shift has the wrong dimension")
    si = np.round(s)
    if np.any(np.abs(s - si) > 1e-9):
        raise ValueError("off-lattice shift")
    return tuple(int(x) for x in si)


def shift_slices(shape, shift):
    """Source and target slices for a truncated shift, or ``None`` if empty."""
    src, tgt = [], []
    for n, s in zip(shape, shift):
        if abs(s) >= n:
            return None
        src.append(slice(max(0, -s), n - max(0, s)))
        tgt.append(slice(max(0, s), n - max(0, -s)))
    return tuple(src), tuple(tgt)


def admissible_pairs(dom: Domain, shift) -> tuple:
    """
    Flat indices ``(i, j)`` of every pair ``j = i + shift`` kept by the domain.

    Truncated domains drop pairs leaving the box; periodic ones wrap.
    """
    s = _as_shift(dom, shift)
    flat = np.arange(dom.size).reshape(dom.shape)
    if dom.periodic:
        tgt = flat
        for axis, k in enumerate(s):
            tgt = np.roll(tgt, -k, axis=axis)
        return flat.ravel(), tgt.ravel()
    sl = shift_slices(dom.shape, s)
    if sl is None:
        return np.empty(0, dtype=int), np.empty(0, dtype=int)
    return flat[sl[0]].ravel(), flat[sl[1]].ravel()


def sample_function(dom: Domain, phi: Callable, codim: int | None = None) -> GridField:
    """Evaluate ``phi`` (mapping ``(n, d)`` points to ``(n,)`` or ``(n, m)``) at every node."""
    pts = dom.coords().reshape(-1, dom.dim)
    vals = np.asarray(phi(pts), dtype=float)
    if vals.ndim == 0:
        vals = np.full(len(pts), float(vals))
    vals = vals.reshape(len(pts), -1)
    if codim is not None and vals.shape[1] != codim:
        raise ValueError("phi returned the wrong number of components")
    return GridField(dom, vals.reshape(dom.shape + (vals.shape[1],)))


def fd_gradient(u: GridField) -> np.ndarray:
    """
    Finite-difference Jacobian, shape ``domain.shape + (m, d)``.

    Central differences inside, one-sided at truncated faces, wrapped when
    periodic.  Exact on affine fields.
    """
    dom = u.domain
    h = dom.spacing
    out = np.empty(dom.shape + (u.codim, dom.dim))
    for axis in range(dom.dim):
        if dom.periodic:
            g = (np.roll(u.values, -1, axis=axis) - np.roll(u.values, 1, axis=axis)) / (2 * h)
        else:
            g = np.gradient(u.values, h, axis=axis, edge_order=1)
        out[..., axis] = g
    return out
