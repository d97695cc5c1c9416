"""Water-height reconstruction and stage -> (extent, depth) inference.

Heights live on a coarse grid where one cell covers ``factor`` x ``factor``
DEM pixels. A flood extent is turned into a height map by sampling the DEM
along the shoreline, fixing those cells, and filling the rest of the wet
region with a discrete harmonic (Laplace) interpolant. A stack of such maps
indexed by gauge stage is then interpolated per cell at inference time.
"""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from scipy import ndimage

from ._io import atomic_write_json
from .errors import DataError, GeometryMismatchError
from .grids import Raster, binary_raster, read_ascii_grid, require_same_geometry, write_ascii_grid
from .inundation_threshold import EventCatalog, PixelThresholdMap, predict_extent

log = logging.getLogger(__name__)

DEFAULT_FACTOR = 32
SOR_OMEGA = 1.7
SOR_TOL = 1e-4
SOR_MAX_SWEEPS = 10_000
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("FLOODCAST_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class CoarseHeightMap:
    heights: np.ndarray  # NaN on invalid cells
    factor: int
    parent_shape: tuple

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.heights)

    def to_raster(self, dem: Raster) -> Raster:
        nr = self.heights.shape[0]
        yll = dem.yll - (nr * self.factor - dem.rows) * dem.cell_size
        return Raster(np.where(self.valid, self.heights, 0.0), dem.cell_size * self.factor,
                      dem.xll, yll, self.valid)


def coarse_shape(shape, factor):
    return -(-shape[0] // factor), -(-shape[1] // factor)


def _block_reduce(a, factor, how="sum"):
    rows, cols = a.shape
    nr, nc = coarse_shape(a.shape, factor)
    padded = np.pad(a, ((0, nr * factor - rows), (0, nc * factor - cols)))
    blocks = padded.reshape(nr, factor, nc, factor)
    return blocks.sum(axis=(1, 3)) if how == "sum" else blocks.any(axis=(1, 3))


def extract_boundaries(extent: Raster, include_edges: bool = True) -> np.ndarray:
    """Wet pixels with a 4-neighbour that is dry (or off-raster).

    With ``include_edges=False`` only neighbours that are valid dry pixels
    count, i.e. the result is the shoreline proper.
    """
    wet = extent.wet()
    dry = ~wet & extent.valid
    pad_val = include_edges
    dp = np.pad(dry, 1, constant_values=pad_val)
    touches = dp[:-2, 1:-1] | dp[2:, 1:-1] | dp[1:-1, :-2] | dp[1:-1, 2:]
    return wet & touches


# -- Laplace solver --------------------------------------------------------------


class LaplaceSolution(NamedTuple):
    heights: np.ndarray  # NaN outside the solvable region
    sweeps: int
    converged: bool
    max_update: float


def _neighbour_sum(h, valid):
    hv = np.pad(np.where(valid, h, 0.0), 1)
    return hv[:-2, 1:-1] + hv[2:, 1:-1] + hv[1:-1, :-2] + hv[1:-1, 2:]


def _neighbour_count(valid):
    v = np.pad(valid.astype(float), 1)
    return v[:-2, 1:-1] + v[2:, 1:-1] + v[1:-1, :-2] + v[1:-1, 2:]


def _plane_guess(values, fixed):
    r, c = np.nonzero(fixed)
    z = values[fixed]
    A = np.column_stack([np.ones_like(r, dtype=float), r, c])
    if len(z) >= 3 and np.linalg.matrix_rank(A) == 3:
        coef = np.linalg.lstsq(A, z, rcond=None)[0]
        rr, cc = np.indices(values.shape)
        guess = coef[0] + coef[1] * rr + coef[2] * cc
    else:
        guess = np.full(values.shape, z.mean())
    return np.clip(guess, z.min(), z.max())


def solve_laplace(values, fixed, valid, omega=SOR_OMEGA, tol=SOR_TOL,
                  max_sweeps=SOR_MAX_SWEEPS) -> LaplaceSolution:
    """Red-black SOR for the 5-point Laplace equation on an irregular region.

    ``fixed`` cells are Dirichlet data taken from ``values``; other
    ``valid`` cells are solved for. Neighbours outside ``valid`` are simply
    left out of the stencil (zero-flux edge). Connected pieces of the
    region without any fixed cell are unconstrained and come back NaN.
    """
    values = np.asarray(values, dtype=float)
    fixed = np.asarray(fixed, dtype=bool) & valid
    valid = np.asarray(valid, dtype=bool)
    labels, n = ndimage.label(valid, structure=FOUR_CONNECTED)
    anchored = np.zeros(n + 1, dtype=bool)
    anchored[np.unique(labels[fixed])] = True
    anchored[0] = False
    region = anchored[labels]
    out = np.full(values.shape, np.nan)
    if not fixed.any():
        return LaplaceSolution(out, 0, True, 0.0)

    h = _plane_guess(values, fixed)
    h[fixed] = values[fixed]
    free = region & ~fixed
    count = _neighbour_count(region)
    rr, cc = np.indices(values.shape)
    colours = [free & ((rr + cc) % 2 == k) & (count > 0) for k in (0, 1)]
    inv_count = np.where(count > 0, 1.0 / np.maximum(count, 1), 0.0)

    sweeps, max_upd, converged = 0, 0.0, not free.any()
    while not converged and sweeps < max_sweeps:
        sweeps += 1
        max_upd = 0.0
        for mask in colours:
            avg = _neighbour_sum(h, region) * inv_count
            delta = omega * (avg - h)
            delta = np.where(mask, delta, 0.0)
            h += delta
            max_upd = max(max_upd, float(np.abs(delta).max()))
        converged = max_upd < tol
    out[region] = h[region]
    return LaplaceSolution(out, sweeps, converged, max_upd)


def laplace_residual(h, valid):
    """|4h - sum of neighbours| style residual, normalized per neighbour count."""
    count = _neighbour_count(valid)
    res = np.where(valid, count * np.nan_to_num(h) - _neighbour_sum(np.nan_to_num(h), valid), 0.0)
    return res


# -- tension outliers -------------------------------------------------------------------


def tension_discrepancies(h, fixed, valid) -> np.ndarray:
    """Fixed-cell height minus the value a local plane through its neighbours implies.

    The plane is a least-squares fit over valid cells of the 3x3
    neighbourhood (centre excluded); a flat mean is used when fewer than
    three non-collinear neighbours exist. Non-fixed cells get 0.
    """
    rows, cols = h.shape
    out = np.zeros(h.shape)
    for r, c in zip(*np.nonzero(fixed)):
        pts, z = [], []
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == dc == 0:
                    continue
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols and valid[rr, cc] and np.isfinite(h[rr, cc]):
                    pts.append((1.0, dr, dc))
                    z.append(h[rr, cc])
        if not pts:
            continue
        A, z = np.array(pts), np.array(z)
        if len(z) >= 3 and np.linalg.matrix_rank(A) == 3:
            pred = np.linalg.lstsq(A, z, rcond=None)[0][0]
        else:
            pred = z.mean()
        out[r, c] = h[r, c] - pred
    return out


def remove_tension_outliers(values, fixed, valid, k=3.0, max_rounds=3, min_cells=4,
                            floor_m=0.1, **solver_kw):
    """Drop fixed cells that bend the harmonic surface too much.

    Per round: solve, score every fixed cell by :func:`tension_discrepancies`,
    and drop cells whose |discrepancy| exceeds max(k * MAD, ``floor_m``) and
    is the largest in their 3x3 neighbourhood of fixed cells. Never leaves
    fewer than ``min_cells`` fixed cells. Returns (fixed mask, dropped cells).
    """
    fixed = np.asarray(fixed, dtype=bool).copy()
    dropped = []
    for _ in range(max_rounds):
        n_fixed = int(fixed.sum())
        allowed = n_fixed - min_cells
        if allowed <= 0:
            break
        sol = solve_laplace(values, fixed, valid, **solver_kw)
        h = np.where(fixed, values, sol.heights)
        d = tension_discrepancies(h, fixed, valid)
        dv = d[fixed]
        mad = float(np.median(np.abs(dv - np.median(dv))))
        thr = max(k * mad, floor_m)
        mag = np.where(fixed, np.abs(d), 0.0)
        local_max = mag >= ndimage.maximum_filter(mag, size=3, mode="constant")
        cand = np.argwhere(fixed & (mag > thr) & local_max)
        if len(cand) == 0:
            break
        order = np.argsort(-mag[cand[:, 0], cand[:, 1]], kind="stable")
        for r, c in cand[order][:allowed]:
            fixed[r, c] = False
            dropped.append((int(r), int(c)))
    return fixed, dropped


# -- extent -> height ---------------------------------------------------------------------


def extent_to_height(dem: Raster, extent: Raster, factor=DEFAULT_FACTOR, remove_outliers=True,
                     omega=SOR_OMEGA, tol=SOR_TOL, max_sweeps=SOR_MAX_SWEEPS) -> CoarseHeightMap:
    require_same_geometry(dem, extent, "DEM and extent")
    shape = coarse_shape(dem.shape, factor)
    wet = extent.wet() & dem.valid
    if not wet.any():
        return CoarseHeightMap(np.full(shape, np.nan), factor, dem.shape)
    shore = extract_boundaries(extent.like(wet.astype(np.uint8), dem.valid), include_edges=False)
    shore &= dem.valid
    z = np.where(shore, np.nan_to_num(dem.values.astype(float)), 0.0)
    total = _block_reduce(z, factor)
    count = _block_reduce(shore.astype(float), factor)
    fixed = count > 0
    if not fixed.any():
        raise DataError("unconstrained interior: the extent has no shoreline")
    valid = _block_reduce(wet, factor, how="any")
    values = np.where(fixed, total / np.maximum(count, 1), 0.0)
    kw = dict(omega=omega, tol=tol, max_sweeps=max_sweeps)
    if remove_outliers:
        fixed, dropped = remove_tension_outliers(values, fixed, valid, **kw)
        if dropped:
            log.debug("dropped %d high-tension boundary cells", len(dropped))
    sol = solve_laplace(values, fixed, valid, **kw)
    if not sol.converged:
        log.warning("Laplace solve stopped at the sweep cap (max update %.3g m)", sol.max_update)
    return CoarseHeightMap(sol.heights, factor, dem.shape)


# -- height stack -------------------------------------------------------------------------


@dataclass
class HeightStack:
    gauge_id: str
    entries: list  # [(stage, CoarseHeightMap)] strictly increasing
    factor: int = DEFAULT_FACTOR
    dem_ref: Optional[str] = None

    def __post_init__(self):
        if not self.entries:
            raise DataError("height stack needs at least one entry")
        stages = [s for s, _ in self.entries]
        if any(b <= a for a, b in zip(stages, stages[1:])):
            raise DataError("height stack stages must be strictly increasing")

    @property
    def stages(self) -> np.ndarray:
        return np.array([s for s, _ in self.entries])


def build_height_stack(cat: EventCatalog, dem: Raster, thr_model: PixelThresholdMap,
                       factor=DEFAULT_FACTOR, **kw) -> HeightStack:
    """Height map for every distinct training stage, via Thresholding extents."""
    stages = sorted(set(float(s) for s in cat.stages))

    def one(stage):
        try:
            return stage, extent_to_height(dem, predict_extent(thr_model, stage), factor, **kw)
        except DataError as exc:
            log.warning("stage %.3f skipped: %s", stage, exc)
            return stage, None

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = list(pool.map(one, stages))
    entries = [(s, m) for s, m in results if m is not None]
    if not entries:
        raise DataError("no usable height maps in the catalog")
    return HeightStack(cat.gauge_id, entries, factor)


def height_at_stage(stack: HeightStack, stage: float) -> np.ndarray:
    """Coarse height map for ``stage`` by per-cell piecewise-linear interpolation.

    Above the top knot the top map is raised uniformly by the stage
    difference; below the bottom knot the bottom map is used unchanged.
    """
    stages = stack.stages
    maps = [m.heights for _, m in stack.entries]
    if stage >= stages[-1]:
        return maps[-1] + (stage - stages[-1]) if stage > stages[-1] else maps[-1].copy()
    if stage <= stages[0]:
        return maps[0].copy()
    j = int(np.searchsorted(stages, stage, side="left"))
    if stages[j] == stage:
        return maps[j].copy()
    lo, hi = stages[j - 1], stages[j]
    w = (stage - lo) / (hi - lo)
    return (1.0 - w) * maps[j - 1] + w * maps[j]


def upsample_bilinear(h: np.ndarray, factor: int, shape) -> np.ndarray:
    """Bilinear interpolation of coarse cell-centre values at every fine pixel.

    Invalid (NaN) corners are left out and the remaining weights
    renormalized; pixels with no valid corner are NaN. Outside the outer
    ring of cell centres the nearest centre row/column is used.
    """
    nr, nc = h.shape
    rows, cols = shape

    def axis(n_fine, n_coarse):
        y = (np.arange(n_fine) + 0.5) / factor - 0.5
        i0 = np.clip(np.floor(y).astype(int), 0, n_coarse - 1)
        i1 = np.minimum(i0 + 1, n_coarse - 1)
        w = np.clip(y - i0, 0.0, 1.0)
        w = np.where(i1 == i0, 0.0, w)
        return i0, i1, w

    r0, r1, wr = axis(rows, nr)
    c0, c1, wc = axis(cols, nc)
    valid = np.isfinite(h)
    hz = np.where(valid, h, 0.0)
    num = np.zeros(shape)
    den = np.zeros(shape)
    for ri, wy in ((r0, 1 - wr), (r1, wr)):
        for ci, wx in ((c0, 1 - wc), (c1, wc)):
            w = wy[:, None] * wx[None, :] * valid[np.ix_(ri, ci)]
            num += w * hz[np.ix_(ri, ci)]
            den += w
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)


def stage_to_depth(stack: HeightStack, dem: Raster, stage: float):
    """Extent and depth rasters for a gauge stage.

    A pixel is wet where the interpolated water surface is above the DEM;
    depth is the surface minus the DEM on wet pixels and 0 elsewhere.
    """
    for _, m in stack.entries:
        if tuple(m.parent_shape) != dem.shape:
            raise GeometryMismatchError("height stack was built on a different DEM")
    H = upsample_bilinear(height_at_stage(stack, stage), stack.factor, dem.shape)
    z = dem.values.astype(float)
    with np.errstate(invalid="ignore"):
        wet = np.isfinite(H) & dem.valid & (H > z)
    depth = np.where(wet, H - np.nan_to_num(z), 0.0)
    return binary_raster(wet, dem), dem.like(depth)


def stack_monotonicity_violations(stack: HeightStack) -> int:
    """Cells whose height falls, or that lose validity, as the stage rises."""
    bad = 0
    for (_, a), (_, b) in zip(stack.entries, stack.entries[1:]):
        both = a.valid & b.valid
        bad += int((b.heights[both] < a.heights[both]).sum())
        bad += int((a.valid & ~b.valid).sum())
    return bad


# -- artifacts -------------------------------------------------------------------------------


def stage_filename(stage: float) -> str:
    return f"h_{stage:.6f}.asc"


def save_height_stack(directory, stack: HeightStack, dem: Raster, dem_path=None):
    d = Path(directory)
    entries = []
    for stage, m in stack.entries:
        name = stage_filename(stage)
        write_ascii_grid(d / name, m.to_raster(dem))
        entries.append({"stage_m": stage, "file": name})
    atomic_write_json(d / "manifest.json", {
        "schema_version": 1,
        "gauge_id": stack.gauge_id,
        "dem_path": str(dem_path) if dem_path is not None else stack.dem_ref,
        "factor": stack.factor,
        "parent_shape": list(dem.shape),
        "stages": entries,
    })
    return d


def load_height_stack(directory) -> HeightStack:
    d = Path(directory)
    with open(d / "manifest.json") as fh:
        meta = json.load(fh)
    shape = tuple(meta["parent_shape"])
    entries = []
    for e in meta["stages"]:
        r = read_ascii_grid(d / e["file"])
        entries.append((float(e["stage_m"]),
                        CoarseHeightMap(np.where(r.valid, r.values, np.nan), int(meta["factor"]), shape)))
    return HeightStack(meta["gauge_id"], entries, int(meta["factor"]), meta.get("dem_path"))
