"""Level surfaces of a field near the free boundary: the generalized flux
identity, the gradient-jump estimate and the nondegeneracy scan."""

from __future__ import annotations

import csv
import math
import warnings
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .grid import Field, VectorField, gradient, integrate

__all__ = [
    "LevelSetSurface",
    "FluxReport",
    "JumpEstimate",
    "JumpReport",
    "NondegeneracyReport",
    "level_set",
    "generalized_fbc",
    "fbc_sweep",
    "flux_jump",
    "admissible_delta",
    "nondegeneracy_scan",
    "write_surface_csv",
    "wall_bump_field",
    "FbcSweep",
]


@dataclass(frozen=True, eq=False)
class LevelSetSurface:
    """Triangulated level surface ``{u = level}``.

    ``normals`` point out of the band around the free boundary: along
    ``+grad u`` on the plus side and ``-grad u`` on the minus side.
    ``grad_sq`` is ``|grad u|^2`` interpolated to the facet centroids.
    """

    level: float
    side: str
    centroids: np.ndarray
    normals: np.ndarray
    areas: np.ndarray
    grad_sq: np.ndarray
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        if self.side not in ("plus", "minus"):
            raise ValueError(f"side must be 'plus' or 'minus', got {self.side!r}")

    def __len__(self) -> int:
        return len(self.areas)

    @property
    def area(self) -> float:
        return float(self.areas.sum())

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def flipped(self) -> LevelSetSurface:
        """Same facets with the other side tag and negated normals."""
        other = "minus" if self.side == "plus" else "plus"
        return LevelSetSurface(self.level, other, self.centroids, -self.normals, self.areas, self.grad_sq,
                               self.vertices, self.faces)


def _empty_surface(level: float, side: str, dim: int) -> LevelSetSurface:
    z = np.zeros((0, dim))
    return LevelSetSurface(level, side, z, z.copy(), np.zeros(0), np.zeros(0), z.copy(), np.zeros((0, 3), dtype=int))


def _interpolators(u: Field, grad: VectorField | None = None):
    g = u.grid
    grad = gradient(u) if grad is None else grad
    return [RegularGridInterpolator(g.axes, c, method="linear") for c in grad.components]


def _sard_level(values: np.ndarray, level: float) -> float:
    while np.any(values == level):
        level += 1e-12 * max(1.0, abs(level))
    return level


def level_set(u: Field, level: float, side: str | None = None, grad: VectorField | None = None) -> LevelSetSurface:
    """Marching-cubes surface ``{u = level}`` with gradient-based normals.

    ``side`` defaults to ``"plus"`` above 1 and ``"minus"`` otherwise.  A
    level hit exactly by a node value is nudged by 1e-12.
    """
    g = u.grid
    if g.dim != 3:
        raise ValueError("level surfaces are extracted in three dimensions only")
    side = side or ("plus" if level > 1.0 else "minus")
    level = _sard_level(u.values, float(level))
    vals = u.values
    if not (vals.min() < level < vals.max()):
        return _empty_surface(level, side, g.dim)
    verts, faces, _, _ = marching_cubes(vals, level, spacing=g.spacing, allow_degenerate=False)
    tri = verts[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    keep = areas > 0
    faces, tri, cross, areas = faces[keep], tri[keep], cross[keep], areas[keep]
    centroids = tri.mean(axis=1)
    grads = np.stack([ip(centroids) for ip in _interpolators(u, grad)], axis=1)
    gnorm = np.linalg.norm(grads, axis=1)
    # fall back on the facet normal, oriented along the gradient, where the gradient vanishes
    flat = gnorm <= 1e-14
    if flat.any():
        geo = cross[flat] / (2.0 * areas[flat, None])
        grads[flat] = geo
        gnorm[flat] = 1.0
    unit = grads / gnorm[:, None]
    unit /= np.linalg.norm(unit, axis=1)[:, None]
    normals = unit if side == "plus" else -unit
    grad_sq = np.where(flat, 0.0, gnorm**2)
    return LevelSetSurface(level, side, centroids, normals, areas, grad_sq, verts, faces)


@dataclass(frozen=True)
class FluxReport:
    """Both surface integrals of the generalized free boundary condition.

    With ``n`` the outward normal of the superlevel sets ``{u > 1 + delta}``
    (that is ``-grad u / |grad u|`` on both surfaces),
    ``plus_integral = int_{u = 1 + d+} (|grad u|^2 - 2) phi.n`` and
    ``minus_integral = int_{u = 1 - d-} |grad u|^2 phi.n``.  Writing the plus
    term as ``(2 - |grad u|^2) phi.n'`` with ``n'`` the outward normal of the
    band ``{1 - d- < u < 1 + d+}`` gives the same numbers.
    """

    delta_plus: float
    delta_minus: float
    plus_integral: float
    minus_integral: float
    defect: float
    band_fraction: float

    @property
    def scale(self) -> float:
        return max(abs(self.plus_integral), abs(self.minus_integral))


def _phi_at(phi: VectorField, points: np.ndarray) -> np.ndarray:
    g = phi.grid
    return np.stack([RegularGridInterpolator(g.axes, c, method="linear")(points) for c in phi.components], axis=1)


def generalized_fbc(
    u: Field,
    phi: VectorField,
    delta_plus: float,
    delta_minus: float,
    band_warn: float = 0.1,
    grad: VectorField | None = None,
) -> FluxReport:
    """Evaluate the weak free boundary identity on ``{u = 1 + d+}`` and ``{u = 1 - d-}``.

    Warns when the band ``{|u - 1| <= max(d+, d-)}`` covers more than
    ``band_warn`` of the support of ``phi``.
    """
    if not (delta_plus > 0 and delta_minus > 0):
        raise ValueError("delta_plus and delta_minus must be positive")
    if phi.grid != u.grid:
        raise ValueError("phi and u live on different grids")
    g = u.grid
    support = np.any(phi.components != 0.0, axis=0)
    supp_measure = integrate(support.astype(float), g)
    band = np.abs(u.values - 1.0) <= max(delta_plus, delta_minus)
    frac = integrate((band & support).astype(float), g) / supp_measure if supp_measure > 0 else 0.0
    if frac > band_warn:
        warnings.warn(f"band {{|u-1| <= delta}} covers {frac:.1%} of supp(phi)", RuntimeWarning, stacklevel=2)
    grad = gradient(u) if grad is None else grad
    integrals = []
    for level, side, weight in ((1.0 + delta_plus, "plus", -2.0), (1.0 - delta_minus, "minus", 0.0)):
        surf = level_set(u, level, side, grad)
        if len(surf) == 0:
            integrals.append(0.0)
            continue
        # superlevel-set outward normal is -grad u/|grad u| on both sides
        n = -surf.normals if side == "plus" else surf.normals
        phin = np.einsum("ij,ij->i", _phi_at(phi, surf.centroids), n)
        integrals.append(float(np.sum((surf.grad_sq + weight) * phin * surf.areas)))
    plus, minus = integrals
    return FluxReport(float(delta_plus), float(delta_minus), plus, minus, plus - minus, float(frac))


def _richardson(deltas: np.ndarray, values: np.ndarray) -> float:
    """Value at delta = 0 of the least-squares line (exact for two points)."""
    if len(deltas) < 2:
        return float(values[0])
    A = np.stack([np.ones_like(deltas), deltas], axis=1)
    coef, *_ = np.linalg.lstsq(A, values, rcond=None)
    return float(coef[0])


@dataclass(frozen=True)
class FbcSweep:
    reports: tuple[FluxReport, ...]
    extrapolated_defect: float
    extrapolated_plus: float
    extrapolated_minus: float

    @property
    def relative_defect(self) -> float:
        scale = max(abs(self.extrapolated_plus), abs(self.extrapolated_minus))
        return abs(self.extrapolated_defect) / scale if scale > 0 else 0.0


def fbc_sweep(u: Field, phi: VectorField, deltas: Sequence[float], **kw) -> FbcSweep:
    """Run :func:`generalized_fbc` with ``d+ = d- = delta`` and extrapolate to ``delta = 0``."""
    if len(deltas) == 0:
        raise ValueError("fbc_sweep needs at least one delta")
    grad = gradient(u)
    reports = tuple(generalized_fbc(u, phi, d, d, grad=grad, **kw) for d in deltas)
    ds = np.array([r.delta_plus for r in reports])
    return FbcSweep(
        reports,
        _richardson(ds, np.array([r.defect for r in reports])),
        _richardson(ds, np.array([r.plus_integral for r in reports])),
        _richardson(ds, np.array([r.minus_integral for r in reports])),
    )


def _subset(s: LevelSetSurface, keep: np.ndarray) -> LevelSetSurface:
    return LevelSetSurface(s.level, s.side, s.centroids[keep], s.normals[keep], s.areas[keep], s.grad_sq[keep],
                           s.vertices, s.faces[keep])


@dataclass(frozen=True)
class JumpEstimate:
    delta: float
    mean: float
    spread: float
    matched: int
    unmatched: int

    @property
    def unmatched_fraction(self) -> float:
        total = self.matched + self.unmatched
        return self.unmatched / total if total else 0.0


@dataclass(frozen=True)
class JumpReport:
    estimates: tuple[JumpEstimate, ...]
    extrapolated_mean: float

    @property
    def empty(self) -> bool:
        return all(e.matched == 0 for e in self.estimates)

    @property
    def finest(self) -> JumpEstimate | None:
        valid = [e for e in self.estimates if e.matched]
        return min(valid, key=lambda e: e.delta) if valid else None


def admissible_delta(u: Field, factor: float = 2.0) -> float:
    """Smallest delta whose level surfaces sit ``factor`` cells off the free boundary.

    Uses the largest ``|grad u|`` on nodes adjacent to ``{u = 1}``; returns 0
    when there is no free boundary.
    """
    g = u.grid
    above = u.values > 1.0
    near = np.zeros_like(above)
    for ax in range(g.dim):
        a = np.swapaxes(above, 0, ax)
        n = np.swapaxes(near, 0, ax)
        cross = a[1:] != a[:-1]
        n[1:] |= cross
        n[:-1] |= cross
    if not near.any():
        return 0.0
    gmax = float(gradient(u).magnitude()[near].max())
    return factor * g.max_spacing * gmax


def flux_jump(
    u: Field,
    deltas: Sequence[float],
    travel_factor: float = 3.0,
    unmatched_warn: float = 0.2,
    window=None,
    neighbours: int = 32,
) -> JumpReport:
    """Estimate ``|grad u+|^2 - |grad u-|^2`` across ``{u = 1}`` for each delta.

    Each facet of ``{u = 1 + delta}`` is paired with the facet of
    ``{u = 1 - delta}`` closest to the ray from its centroid along
    ``-grad u``, travelling at most ``travel_factor * delta / |grad u|``
    (among the ``neighbours`` nearest centroids).
    Returns area-weighted means and spreads of the paired differences and
    their linear extrapolation to ``delta = 0``.  ``window``, a predicate on
    an ``(n, dim)`` array of points, restricts the estimate to part of the
    free boundary.
    """
    deltas = [float(d) for d in deltas]
    if not deltas or any(d <= 0 for d in deltas):
        raise ValueError("deltas must be positive")
    grad = gradient(u)
    estimates = []
    for d in sorted(deltas):
        plus = level_set(u, 1.0 + d, "plus", grad)
        minus = level_set(u, 1.0 - d, "minus", grad)
        if window is not None and len(plus):
            plus = _subset(plus, np.asarray(window(plus.centroids), dtype=bool))
        if len(plus) == 0 or len(minus) == 0:
            estimates.append(JumpEstimate(d, math.nan, math.nan, 0, len(plus)))
            continue
        tree = cKDTree(minus.centroids)
        direction = -plus.normals
        cap = travel_factor * d / np.sqrt(np.maximum(plus.grad_sq, 1e-300))
        k = min(neighbours, len(minus))
        dist, idx = tree.query(plus.centroids, k=k, distance_upper_bound=float(cap.max()))
        dist, idx = dist.reshape(len(plus), k), idx.reshape(len(plus), k)
        found = np.isfinite(dist) & (dist <= cap[:, None])
        rel = minus.centroids[np.minimum(idx, len(minus) - 1)] - plus.centroids[:, None, :]
        along = np.einsum("ijk,ik->ij", rel, direction)
        perp = np.linalg.norm(rel - along[..., None] * direction[:, None, :], axis=2)
        perp = np.where(found & (along > 0), perp, np.inf)
        best = np.argmin(perp, axis=1)
        matched = np.isfinite(perp[np.arange(len(plus)), best])
        unmatched = int((~matched).sum())
        partner = idx[np.arange(len(plus)), best][matched]
        jumps = plus.grad_sq[matched] - minus.grad_sq[partner]
        weights = plus.areas[matched]
        if not len(jumps):
            estimates.append(JumpEstimate(d, math.nan, math.nan, 0, unmatched))
            continue
        mean = float(np.average(jumps, weights=weights))
        spread = float(math.sqrt(np.average((jumps - mean) ** 2, weights=weights)))
        est = JumpEstimate(d, mean, spread, len(jumps), unmatched)
        if est.unmatched_fraction > unmatched_warn:
            warnings.warn(f"{est.unmatched_fraction:.0%} of facets unmatched at delta={d:g}", RuntimeWarning, stacklevel=2)
        estimates.append(est)
    valid = [e for e in estimates if e.matched]
    extrap = _richardson(np.array([e.delta for e in valid]), np.array([e.mean for e in valid])) if valid else math.nan
    return JumpReport(tuple(estimates), extrap)


@dataclass(frozen=True)
class NondegeneracyReport:
    min_alpha: float
    points: np.ndarray
    distances: np.ndarray
    alphas: np.ndarray

    @property
    def empty(self) -> bool:
        return len(self.alphas) == 0

    @property
    def samples(self) -> list[tuple[np.ndarray, float, float]]:
        return [(p, float(r), float(a)) for p, r, a in zip(self.points, self.distances, self.alphas)]

    def binned_min(self, edges: Sequence[float]) -> np.ndarray:
        """Minimum alpha within each distance bin (NaN for empty bins)."""
        out = np.full(len(edges) - 1, np.nan)
        for k in range(len(edges) - 1):
            sel = (self.distances > edges[k]) & (self.distances <= edges[k + 1])
            if sel.any():
                out[k] = self.alphas[sel].min()
        return out


def _point_triangle_distance(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Euclidean distance from points ``p`` (n,3) to triangles ``tri`` (n,3,3)."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        # interior projection by default
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        closest = a + ab * v[:, None] + ac * w[:, None]
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    cases = [
        ((d1 <= 0) & (d2 <= 0), a),
        ((d3 >= 0) & (d4 <= d3), b),
        ((d6 >= 0) & (d5 <= d6), c),
        ((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + ab * t_ab[:, None]),
        ((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + ac * t_ac[:, None]),
        ((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + (c - b) * t_bc[:, None]),
    ]
    done = np.zeros(len(p), dtype=bool)
    result = np.empty_like(p)
    for mask, point in cases:
        sel = mask & ~done
        result[sel] = point[sel]
        done |= sel
    result[~done] = closest[~done]
    return np.linalg.norm(p - result, axis=1)


def nondegeneracy_scan(u: Field, r0: float, neighbours: int = 16) -> NondegeneracyReport:
    """Growth rate ``alpha = (u(x) - 1) / dist(x, {u <= 1})`` near the free boundary.

    Distances are exact distances to the piecewise-linear surface ``{u = 1}``
    from marching cubes (the nearest node with ``u <= 1`` would overestimate
    them by up to a cell).  Only nodes with ``u > 1`` and distance at most
    ``r0`` are sampled.
    """
    g = u.grid
    if not r0 > 2.0 * g.max_spacing:
        raise ValueError(f"r0 must exceed 2*max(h) = {2 * g.max_spacing}")
    empty = NondegeneracyReport(math.inf, np.zeros((0, g.dim)), np.zeros(0), np.zeros(0))
    inside = u.values > 1.0
    if not inside.any():
        return empty
    surf = level_set(u, 1.0, "plus")
    if len(surf) == 0:
        return empty
    pts = np.stack([c[inside] for c in np.meshgrid(*g.axes, indexing="ij")], axis=1)
    excess = u.values[inside] - 1.0
    tree = cKDTree(surf.centroids)
    k = min(neighbours, len(surf))
    # the nearest triangle has a centroid within (distance + max circumradius)
    _, idx = tree.query(pts, k=k)
    idx = idx.reshape(len(pts), k)
    tris = surf.triangles
    dist = np.full(len(pts), np.inf)
    for col in range(k):
        dist = np.minimum(dist, _point_triangle_distance(pts, tris[idx[:, col]]))
    keep = (dist <= r0) & (dist > 0)
    pts, dist, excess = pts[keep], dist[keep], excess[keep]
    if len(dist) == 0:
        return empty
    alphas = excess / dist
    return NondegeneracyReport(float(alphas.min()), pts, dist, alphas)


def write_surface_csv(path, surface: LevelSetSurface) -> None:
    """Facets as CSV: centroid, normal and area."""
    dim = surface.centroids.shape[1] if surface.centroids.ndim == 2 else 3
    names = "xyzw"[:dim]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"c{a}" for a in names] + [f"n{a}" for a in names] + ["area"])
        for c, n, a in zip(surface.centroids, surface.normals, surface.areas):
            w.writerow([repr(float(x)) for x in (*c, *n, a)])


def wall_bump_field(grid, width: float) -> VectorField:
    """Radial test field ``psi(x) (x - centre)`` with ``psi`` rising smoothly from
    0 on the boundary to 1 at distance ``width``; compactly supported inside."""
    if not width > 0:
        raise ValueError("width must be positive")
    psi = np.ones(grid.shape)
    for ax, x in enumerate(grid.coords()):
        ext = grid.extents[ax]
        for t in (x / width, (ext - x) / width):
            t = np.clip(t, 0.0, 1.0)
            psi = psi * t**3 * (10.0 - 15.0 * t + 6.0 * t**2)
    comps = [np.broadcast_to(x - 0.5 * grid.extents[ax], grid.shape) for ax, x in enumerate(grid.coords())]
    return VectorField(grid, np.stack(comps) * psi)
