"""Raster container and ESRI ASCII-grid / PGM input-output.

Rows are stored north-first, matching the on-disk order of ASCII grids.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write_bytes, atomic_write_json, atomic_write_text
from .errors import DataError, GeometryMismatchError

NODATA = -9999.0
# +/-inf thresholds are serialized with these sentinels
INF_SENTINEL = 1e30

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


@dataclass
class Raster:
    """A 2-D grid with a validity mask.

    ``valid`` is True where the cell carries data; cells outside it are
    NODATA and never take part in any computation.
    """

    values: np.ndarray
    cell_size: float = 16.0
    xll: float = 0.0
    yll: float = 0.0
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise DataError(f"raster must be 2-D and non-empty, got shape {self.values.shape}")
        if self.cell_size <= 0:
            raise DataError("cell_size must be positive")
        if self.valid is None:
            self.valid = np.ones(self.values.shape, dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.values.shape:
                raise DataError("validity mask shape does not match values")

    @property
    def shape(self):
        return self.values.shape

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def cols(self):
        return self.values.shape[1]

    def same_geometry(self, other: "Raster") -> bool:
        return (
            self.shape == other.shape
            and np.isclose(self.cell_size, other.cell_size)
            and np.isclose(self.xll, other.xll)
            and np.isclose(self.yll, other.yll)
        )

    def like(self, values, valid=None) -> "Raster":
        """New raster with this geometry and the given values."""
        return Raster(
            np.asarray(values),
            self.cell_size,
            self.xll,
            self.yll,
            self.valid.copy() if valid is None else valid,
        )

    def wet(self) -> np.ndarray:
        """Boolean wet mask of a binary extent (NODATA counts as dry)."""
        return (self.values > 0) & self.valid


def require_same_geometry(a: Raster, b: Raster, what="rasters"):
    if not a.same_geometry(b):
        raise GeometryMismatchError(f"{what} do not share geometry: {a.shape} vs {b.shape}")


def binary_raster(mask, like: Raster) -> Raster:
    """0/1 uint8 raster on the geometry of ``like``; invalid cells stay 0."""
    mask = np.asarray(mask, dtype=bool) & like.valid
    return like.like(mask.astype(np.uint8))


def read_ascii_grid(path) -> Raster:
    path = Path(path)
    header = {}
    with open(path, "r") as fh:
        lines = fh.read().splitlines()
    i = 0
    while i < len(lines) and len(header) < 6:
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        key = parts[0].lower()
        if key in ("xllcenter", "yllcenter"):
            key = key.replace("center", "corner")
            header["_center"] = True
        if key not in _HEADER_KEYS:
            break
        header[key] = float(parts[1])
        i += 1
    missing = [k for k in _HEADER_KEYS if k not in header and k != "nodata_value"]
    if missing:
        raise DataError(f"{path}: missing header keys {missing}")
    nrows, ncols = int(header["nrows"]), int(header["ncols"])
    nodata = header.get("nodata_value", NODATA)
    body = " ".join(lines[i:]).split()
    if len(body) != nrows * ncols:
        raise DataError(f"{path}: expected {nrows * ncols} values, found {len(body)}")
    values = np.array(body, dtype=float).reshape(nrows, ncols)
    valid = values != nodata
    values = np.where(valid, values, np.nan)
    xll, yll = header["xllcorner"], header["yllcorner"]
    if header.get("_center"):
        xll -= header["cellsize"] / 2
        yll -= header["cellsize"] / 2
    return Raster(values, header["cellsize"], xll, yll, valid)


def _format_values(raster: Raster) -> str:
    vals = raster.values
    integral = np.issubdtype(vals.dtype, np.integer) or vals.dtype == bool
    out = []
    for r in range(raster.rows):
        row = []
        for c in range(raster.cols):
            if not raster.valid[r, c]:
                row.append("-9999")
            elif integral:
                row.append(str(int(vals[r, c])))
            else:
                v = float(vals[r, c])
                if np.isposinf(v):
                    v = INF_SENTINEL
                elif np.isneginf(v):
                    v = -INF_SENTINEL
                row.append(repr(v))
        out.append(" ".join(row))
    return "\n".join(out)


def format_ascii_grid(raster: Raster) -> str:
    head = (
        f"ncols {raster.cols}\n"
        f"nrows {raster.rows}\n"
        f"xllcorner {raster.xll!r}\n"
        f"yllcorner {raster.yll!r}\n"
        f"cellsize {float(raster.cell_size)!r}\n"
        f"NODATA_value -9999\n"
    )
    return head + _format_values(raster) + "\n"


def write_ascii_grid(path, raster: Raster) -> Path:
    return atomic_write_text(path, format_ascii_grid(raster))


def decode_infinities(values: np.ndarray) -> np.ndarray:
    out = np.array(values, dtype=float)
    out[out >= INF_SENTINEL] = np.inf
    out[out <= -INF_SENTINEL] = -np.inf
    return out


def render_pgm(raster: Raster, path, vmax=None) -> dict:
    """Render a grid as an 8-bit binary PGM, linear from 0 to ``vmax``.

    Values <= 0 and NODATA map to black. The scale is written to a JSON
    sidecar next to the image and returned.
    """
    vals = np.where(raster.valid, np.nan_to_num(raster.values.astype(float), nan=0.0), 0.0)
    vals = np.clip(vals, 0.0, None)
    if vmax is None:
        vmax = float(vals.max()) if vals.size else 0.0
    if vmax > 0:
        gray = np.clip(np.round(vals / vmax * 255.0), 0, 255).astype(np.uint8)
    else:
        gray = np.zeros(vals.shape, dtype=np.uint8)
    head = f"P5\n{raster.cols} {raster.rows}\n255\n".encode("ascii")
    path = Path(path)
    atomic_write_bytes(path, head + gray.tobytes())
    scale = {"black_value": 0.0, "white_value": vmax, "levels": 255, "units": "m"}
    atomic_write_json(path.with_suffix(path.suffix + ".json"), scale)
    return scale


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise DataError("not a binary PGM")
    cols, rows = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(rows, cols)


def downsample_majority(raster: Raster, factor: int = 4) -> Raster:
    """Aggregate a binary extent by ``factor`` x ``factor`` majority vote.

    A block is wet when at least half of its valid pixels are wet; blocks
    without valid pixels are NODATA. Partial edge blocks are kept.
    """
    rows, cols = raster.shape
    nr, nc = -(-rows // factor), -(-cols // factor)
    pad = ((0, nr * factor - rows), (0, nc * factor - cols))
    wet = np.pad(raster.wet(), pad).reshape(nr, factor, nc, factor).sum(axis=(1, 3))
    n_valid = np.pad(raster.valid, pad).reshape(nr, factor, nc, factor).sum(axis=(1, 3))
    valid = n_valid > 0
    out = (2 * wet >= n_valid) & valid
    return Raster(
        out.astype(np.uint8),
        raster.cell_size * factor,
        raster.xll,
        raster.yll + (rows - nr * factor) * raster.cell_size,
        valid,
    )
