"""Uniform node-centred box grids, finite-difference operators and quadrature.

Fields carry one value per node (boundary included) and vanish on the
boundary.  The Dirichlet form used everywhere is the edge (forward
difference) form, which is exactly the quadratic form of the
``(2*dim + 1)``-point Laplacian under trapezoid weights.
"""

from __future__ import annotations

import functools
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import scipy.fft

__all__ = [
    "Grid",
    "Field",
    "VectorField",
    "build_grid",
    "gradient",
    "laplacian",
    "integrate",
    "norms",
    "dirichlet_form",
    "poisson_solve",
    "interpolate",
    "write_field",
    "read_field",
]


@dataclass(frozen=True)
class Grid:
    """Box ``[0, L_1] x ... x [0, L_N]`` sampled at ``nodes[a]`` points per axis."""

    dim: int
    extents: tuple[float, ...]
    nodes: tuple[int, ...]

    def __post_init__(self):
        if self.dim < 3:
            raise ValueError(f"unsupported dimension {self.dim}: need dim >= 3")
        if len(self.extents) != self.dim or len(self.nodes) != self.dim:
            raise ValueError("extents and nodes must have one entry per axis")
        if any(n < 3 for n in self.nodes):
            raise ValueError(f"every axis needs at least 3 nodes, got {self.nodes}")
        if any(not (e > 0 and math.isfinite(e)) for e in self.extents):
            raise ValueError(f"extents must be positive, got {self.extents}")

    @functools.cached_property
    def spacing(self) -> tuple[float, ...]:
        return tuple(e / (n - 1) for e, n in zip(self.extents, self.nodes))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.nodes)

    @property
    def cell_volume(self) -> float:
        return math.prod(self.spacing)

    @property
    def volume(self) -> float:
        return math.prod(self.extents)

    @property
    def max_spacing(self) -> float:
        return max(self.spacing)

    @functools.cached_property
    def axes(self) -> tuple[np.ndarray, ...]:
        return tuple(np.linspace(0.0, e, n) for e, n in zip(self.extents, self.nodes))

    def coords(self) -> list[np.ndarray]:
        """Broadcastable coordinate arrays, one per axis."""
        return list(np.meshgrid(*self.axes, indexing="ij", sparse=True))

    @functools.cached_property
    def interior(self) -> tuple[slice, ...]:
        return (slice(1, -1),) * self.dim

    @functools.cached_property
    def boundary_mask(self) -> np.ndarray:
        mask = np.ones(self.shape, dtype=bool)
        mask[self.interior] = False
        mask.flags.writeable = False
        return mask

    @property
    def n_interior(self) -> int:
        return math.prod(n - 2 for n in self.nodes)

    @functools.cached_property
    def weights(self) -> np.ndarray:
        """Composite trapezoid weights (sum to the box volume)."""
        w1 = []
        for h, n in zip(self.spacing, self.nodes):
            w = np.full(n, h)
            w[0] = w[-1] = h / 2
            w1.append(w)
        out = functools.reduce(np.multiply.outer, w1)
        out.flags.writeable = False
        return out

    @functools.cached_property
    def laplacian_symbol(self) -> np.ndarray:
        """Eigenvalues of the discrete ``-Laplacian`` on interior DST-I modes."""
        parts = []
        for a, (h, n) in enumerate(zip(self.spacing, self.nodes)):
            k = np.arange(1, n - 1)
            lam = (4.0 / h**2) * np.sin(np.pi * k / (2 * (n - 1))) ** 2
            shape = [1] * self.dim
            shape[a] = n - 2
            parts.append(lam.reshape(shape))
        out = functools.reduce(np.add, parts)
        out.flags.writeable = False
        return out

    def zeros(self) -> "Field":
        return Field(self, np.zeros(self.shape))

    def field(self, func: Callable[..., np.ndarray]) -> "Field":
        """Sample ``func(x_1, ..., x_N)`` at the nodes and zero the boundary."""
        values = np.broadcast_to(func(*self.coords()), self.shape).astype(float)
        values[self.boundary_mask] = 0.0
        return Field(self, values)

    def refined(self, nodes: Sequence[int]) -> "Grid":
        return Grid(self.dim, self.extents, tuple(int(n) for n in nodes))


def build_grid(dim: int, extents: Sequence[float], nodes: Sequence[int]) -> Grid:
    return Grid(int(dim), tuple(float(e) for e in extents), tuple(int(n) for n in nodes))


def _frozen(values: np.ndarray) -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Field:
    """Scalar node data on ``grid`` with zero trace."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.shape != self.grid.shape:
            raise ValueError(f"values shape {values.shape} != grid shape {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        if np.any(values[self.grid.boundary_mask] != 0.0):
            raise ValueError("field must vanish on the boundary")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_interior(cls, grid: Grid, interior: np.ndarray) -> "Field":
        values = np.zeros(grid.shape)
        values[grid.interior] = interior
        return cls(grid, values)

    @property
    def interior(self) -> np.ndarray:
        return self.values[self.grid.interior]

    def __add__(self, other: "Field") -> "Field":
        return Field(self.grid, self.values + other.values)

    def __sub__(self, other: "Field") -> "Field":
        return Field(self.grid, self.values - other.values)

    def __mul__(self, scale: float) -> "Field":
        return Field(self.grid, float(scale) * self.values)

    __rmul__ = __mul__

    def __neg__(self) -> "Field":
        return Field(self.grid, -self.values)


@dataclass(frozen=True, eq=False)
class VectorField:
    """``dim`` components per node, stored with the component axis first."""

    grid: Grid
    components: np.ndarray

    def __post_init__(self):
        comps = _frozen(self.components)
        if comps.shape != (self.grid.dim, *self.grid.shape):
            raise ValueError("components must have shape (dim, *grid.shape)")
        object.__setattr__(self, "components", comps)

    def magnitude(self) -> np.ndarray:
        return np.sqrt(np.sum(self.components**2, axis=0))

    def __mul__(self, scale: float) -> "VectorField":
        return VectorField(self.grid, float(scale) * self.components)

    __rmul__ = __mul__


def gradient(field: Field) -> VectorField:
    """Central differences inside, second-order one-sided differences on the boundary."""
    parts = np.gradient(field.values, *field.grid.spacing, edge_order=2)
    return VectorField(field.grid, np.stack(parts))


def neg_laplacian_interior(values: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    """``-Laplacian`` of full node data, evaluated at interior nodes only."""
    dim = values.ndim
    core = (slice(1, -1),) * dim
    out = np.zeros(tuple(n - 2 for n in values.shape))
    centre = values[core]
    for a, h in enumerate(spacing):
        lo = list(core)
        hi = list(core)
        lo[a] = slice(0, -2)
        hi[a] = slice(2, None)
        out += (2.0 * centre - values[tuple(lo)] - values[tuple(hi)]) / h**2
    return out


def laplacian(field: Field) -> Field:
    """``(2*dim + 1)``-point Laplacian on interior nodes, zero on the boundary."""
    return Field.from_interior(field.grid, -neg_laplacian_interior(field.values, field.grid.spacing))


def dirichlet_form(grid: Grid, a: np.ndarray, b: np.ndarray) -> float:
    """Edge form ``sum_edges (D a)(D b)`` scaled to approximate ``int grad a . grad b``.

    For ``b`` vanishing on the boundary this equals ``integrate(-lap(a) * b)``
    to rounding.
    """
    total = 0.0
    for ax, h in enumerate(grid.spacing):
        total += float(np.sum(np.diff(a, axis=ax) * np.diff(b, axis=ax))) / h**2
    return total * grid.cell_volume


Region = Union[np.ndarray, Callable[..., np.ndarray], None]


def integrate(samples: np.ndarray, grid: Grid, region: Region = None) -> float:
    """Trapezoid quadrature, optionally restricted to a node predicate.

    ``region`` is a boolean node mask or a callable of the coordinate arrays
    returning one.
    """
    samples = np.asarray(samples, dtype=float)
    if region is None:
        return float(np.sum(samples * grid.weights))
    if callable(region):
        region = np.broadcast_to(region(*grid.coords()), grid.shape)
    return float(np.sum(np.where(region, samples * grid.weights, 0.0)))


def norms(field: Field) -> tuple[float, float, float]:
    """``(|u|_{H^1_0}, |u|_{L^2}, |u|_inf)``; the seminorm uses the edge form."""
    g = field.grid
    h1 = math.sqrt(max(dirichlet_form(g, field.values, field.values), 0.0))
    l2 = math.sqrt(integrate(field.values**2, g))
    linf = float(np.max(np.abs(field.values)))
    return h1, l2, linf


def poisson_solve(grid: Grid, rhs: np.ndarray) -> np.ndarray:
    """Solve the discrete ``-Laplacian(phi) = rhs`` with zero trace by DST-I.

    ``rhs`` may be full node data (only interior entries are used) or an
    interior-shaped array; the result is full node data.
    """
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape == grid.shape:
        rhs = rhs[grid.interior]
    coef = scipy.fft.dstn(rhs, type=1)
    sol = scipy.fft.idstn(coef / grid.laplacian_symbol, type=1)
    out = np.zeros(grid.shape)
    out[grid.interior] = sol
    return out


def interpolate(field: Field, target: Grid) -> Field:
    """Multilinear transfer of ``field`` onto ``target`` (same box)."""
    from scipy.interpolate import RegularGridInterpolator

    if not np.allclose(field.grid.extents, target.extents):
        raise ValueError("interpolation needs matching extents")
    if field.grid.nodes == target.nodes:
        return field
    interp = RegularGridInterpolator(field.grid.axes, field.values, method="linear")
    pts = np.stack(np.meshgrid(*target.axes, indexing="ij"), axis=-1)
    values = interp(pts.reshape(-1, target.dim)).reshape(target.shape)
    values[target.boundary_mask] = 0.0
    return Field(target, values)


def write_field(path: str | Path, field: Field) -> None:
    """Header ``dim extents... nodes...`` then one value per line, row-major."""
    g = field.grid
    header = " ".join([str(g.dim), *(repr(float(e)) for e in g.extents), *(str(n) for n in g.nodes)])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        np.savetxt(fh, field.values.ravel(order="C"), fmt="%.17g")


def read_field(path: str | Path, grid: Grid | None = None) -> Field:
    """Inverse of :func:`write_field`; checks the header against ``grid`` if given."""
    with open(path) as fh:
        header = fh.readline().split()
        if not header:
            raise ValueError(f"{path}: empty field file")
        dim = int(header[0])
        if len(header) != 1 + 2 * dim:
            raise ValueError(f"{path}: malformed header {' '.join(header)!r}")
        file_grid = build_grid(dim, [float(x) for x in header[1 : 1 + dim]], [int(x) for x in header[1 + dim :]])
        data = np.loadtxt(fh, ndmin=1)
    if grid is not None and (grid.nodes != file_grid.nodes or not np.allclose(grid.extents, file_grid.extents)):
        raise ValueError(f"{path}: grid {file_grid} does not match configured grid {grid}")
    expected = math.prod(file_grid.nodes)
    if data.size != expected:
        raise ValueError(f"{path}: expected {expected} values, found {data.size}")
    return Field(file_grid, data.reshape(file_grid.shape))
