"""Patch datasets, preprocessing, file formats, and mosaic rendering.

Covers the full input side of the pipeline — grayscale images in (PGM),
random patch extraction, DC removal with unit normalization, PCA
whitening — plus a small binary matrix format used for every numeric
artifact, and the grid renderer that turns a dictionary back into an
image.
"""

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionError, FormatError, NumericError

logger = logging.getLogger(__name__)

__all__ = [
    "GrayImage",
    "PatchDataset",
    "WhiteningTransform",
    "read_pgm",
    "write_pgm",
    "extract_patches",
    "center_and_normalize",
    "fit_whitening",
    "apply_whitening",
    "save_whitening",
    "load_whitening",
    "save_matrix",
    "load_matrix",
    "render_mosaic",
]

MATRIX_MAGIC = b"SSDL"
MATRIX_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")  # magic, version, rows, cols


@dataclass(frozen=True)
class GrayImage:
    """8-bit grayscale image; ``pixels`` is row-major, shape (h, w)."""

    height: int
    width: int
    pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.shape != (self.height, self.width):
            raise DimensionError(
                f"pixel array {px.shape} does not match "
                f"{self.height}x{self.width}"
            )
        if self.height < 1 or self.width < 1:
            raise DimensionError("image must have positive dimensions")
        object.__setattr__(self, "pixels", px)


@dataclass(frozen=True)
class PatchDataset:
    """Signals as columns of ``Y`` plus their patch geometry."""

    Y: np.ndarray = field(repr=False)
    patch_h: int = 0
    patch_w: int = 0
    provenance: str = ""

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim != 2 or Y.shape[1] < 1:
            raise DimensionError(
                f"dataset must be a matrix with >= 1 column, got {Y.shape}"
            )
        if not np.all(np.isfinite(Y)):
            raise ValueError("dataset contains non-finite entries")
        if self.patch_h * self.patch_w != Y.shape[0]:
            raise DimensionError(
                f"patch dims {self.patch_h}x{self.patch_w} do not match "
                f"signal length {Y.shape[0]}"
            )
        object.__setattr__(self, "Y", Y)

    @property
    def m(self):
        return self.Y.shape[0]

    @property
    def n(self):
        return self.Y.shape[1]


@dataclass(frozen=True)
class WhiteningTransform:
    """Affine map ``y -> W (y - mean)`` decorrelating the fitting data."""

    mean: np.ndarray
    W: np.ndarray = field(repr=False)
    eps: float = 1e-5
    retained_dims: int = 0

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        W = np.asarray(self.W, dtype=float)
        if W.ndim != 2 or W.shape[0] != W.shape[1] or \
                mean.shape != (W.shape[0],):
            raise DimensionError(
                f"inconsistent transform shapes: W {W.shape}, "
                f"mean {mean.shape}"
            )
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(mean))):
            raise ValueError("whitening transform has non-finite entries")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "W", W)


# -- PGM image I/O ---------------------------------------------------------


def _next_token(data, pos):
    """Skip whitespace/comments, return (token_bytes, next_pos, tok_pos)."""
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise FormatError("unexpected end of header", offset=pos)
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() \
            and data[pos:pos + 1] != b"#":
        pos += 1
    return data[start:pos], pos, start


def read_pgm(path):
    """Read a binary (P5) grayscale image with maxval 255."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic, pos, at = _next_token(data, 0)
    if magic != b"P5":
        raise FormatError(f"not a binary PGM file (got {magic!r})", offset=at)
    fields = []
    for name in ("width", "height", "maxval"):
        tok, pos, at = _next_token(data, pos)
        if not tok.isdigit():
            raise FormatError(f"bad {name} field {tok!r}", offset=at)
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"bad image dimensions {width}x{height}", offset=0)
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}", offset=at)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("missing raster separator", offset=pos)
    pos += 1
    need = width * height
    raster = data[pos:pos + need]
    if len(raster) < need:
        raise FormatError(
            f"truncated raster: expected {need} bytes, got {len(raster)}",
            offset=len(data),
        )
    if len(data) > pos + need:
        raise FormatError("trailing bytes after raster", offset=pos + need)
    px = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return GrayImage(height=height, width=width, pixels=px.copy())


def write_pgm(path, image):
    """Write a GrayImage as binary PGM (P5, maxval 255)."""
    header = f"P5\n{image.width} {image.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(image.pixels.tobytes())


# -- patch extraction and preprocessing ------------------------------------


def extract_patches(image, size, count, seed):
    """Sample square patches at uniform positions, scaled to [0, 1].

    Each patch is flattened row-major into one column.  Corners are
    drawn with a seeded generator, so the dataset is reproducible.
    """
    size = int(size)
    count = int(count)
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if size < 1 or size > min(image.height, image.width):
        raise DimensionError(
            f"patch size {size} does not fit a "
            f"{image.height}x{image.width} image"
        )
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, image.height - size + 1, size=count)
    cols = rng.integers(0, image.width - size + 1, size=count)
    Y = np.empty((size * size, count))
    px = image.pixels
    for k in range(count):
        block = px[rows[k]:rows[k] + size, cols[k]:cols[k] + size]
        Y[:, k] = block.ravel() / 255.0
    prov = (f"{count} patches of {size}x{size} from "
            f"{image.height}x{image.width} image, seed={seed}")
    return PatchDataset(Y=Y, patch_h=size, patch_w=size, provenance=prov)


def center_and_normalize(ds):
    """Remove each column's mean, scale to unit norm, drop degenerates.

    Columns whose norm after centering falls below 1e-10 carry no
    signal (they were constant) and are removed; the drop count is
    logged and recorded in the provenance string.
    """
    Y = ds.Y - ds.Y.mean(axis=0)
    norms = np.linalg.norm(Y, axis=0)
    keep = norms >= 1e-10
    dropped = int(Y.shape[1] - np.count_nonzero(keep))
    if not np.any(keep):
        raise ValueError("every column is constant; nothing left to keep")
    if dropped:
        logger.info("center_and_normalize: dropped %d degenerate columns",
                    dropped)
    Y = Y[:, keep] / norms[keep]
    prov = ds.provenance + f"; centered+normalized (dropped {dropped})"
    return PatchDataset(Y=Y, patch_h=ds.patch_h, patch_w=ds.patch_w,
                        provenance=prov)


def fit_whitening(ds, eps=1e-5):
    """PCA whitening fitted to the dataset columns.

    Eigenvalues of the sample covariance are floored at ``eps`` times
    the largest one before inversion, so rank-deficient data cannot
    produce non-finite output; ``retained_dims`` counts the directions
    above the floor.  Rows of ``W`` come out in decreasing eigenvalue
    order.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    Y = ds.Y
    m, n = Y.shape
    if n < 2:
        raise DimensionError("whitening needs at least 2 columns")
    if n < m:
        logger.warning("fit_whitening: only %d samples for %d dims", n, m)
    mean = Y.mean(axis=1)
    Xc = Y - mean[:, None]
    cov = (Xc @ Xc.T) / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    evals = evals[::-1]
    evecs = evecs[:, ::-1]
    lam_max = float(evals[0])
    if lam_max <= 0:
        raise NumericError("sample covariance has no positive eigenvalue")
    floor = eps * lam_max
    retained = int(np.count_nonzero(evals >= floor))
    lam_tilde = np.maximum(evals, floor)
    W = evecs.T / np.sqrt(lam_tilde)[:, None]
    return WhiteningTransform(mean=mean, W=W, eps=float(eps),
                              retained_dims=retained)


def apply_whitening(ds, transform):
    """Map every column through ``W (y - mean)``.

    Note this is a one-way preprocessing step: applying the transform
    to already-whitened data is well defined but is not the identity.
    """
    if transform.W.shape[1] != ds.m:
        raise DimensionError(
            f"transform expects {transform.W.shape[1]} dims, "
            f"dataset has {ds.m}"
        )
    Y = transform.W @ (ds.Y - transform.mean[:, None])
    prov = ds.provenance + f"; whitened (eps={transform.eps:g})"
    return PatchDataset(Y=Y, patch_h=ds.patch_h, patch_w=ds.patch_w,
                        provenance=prov)


def save_whitening(path, transform):
    """Persist a transform: W as a matrix file plus a JSON sidecar."""
    save_matrix(path, transform.W)
    sidecar = {
        "mean": [float(v) for v in transform.mean],
        "eps": float(transform.eps),
        "retained_dims": int(transform.retained_dims),
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True)
        fh.write("\n")


def load_whitening(path):
    W = load_matrix(path)
    with open(str(path) + ".json", "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    return WhiteningTransform(
        mean=np.asarray(sidecar["mean"], dtype=float),
        W=W,
        eps=float(sidecar["eps"]),
        retained_dims=int(sidecar["retained_dims"]),
    )


# -- binary matrix format ---------------------------------------------------
#
# Layout: magic "SSDL" | version u32 | rows u64 | cols u64 | payload,
# where the payload is rows*cols IEEE-754 binary64 values stored
# column-major.  Everything is little-endian; the header is 24 bytes.


def save_matrix(path, M):
    """Write a matrix; round-trips bit-exactly through load_matrix."""
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    if M.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {M.shape}")
    header = _HEADER.pack(MATRIX_MAGIC, MATRIX_VERSION,
                          M.shape[0], M.shape[1])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(M.astype("<f8", copy=False).tobytes(order="F"))


def load_matrix(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise FormatError(
            f"truncated header: {len(data)} of {_HEADER.size} bytes",
            offset=len(data),
        )
    magic, version, rows, cols = _HEADER.unpack_from(data)
    if magic != MATRIX_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != MATRIX_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    expected = _HEADER.size + rows * cols * 8
    if len(data) < expected:
        raise FormatError(
            f"truncated payload: {len(data)} of {expected} bytes",
            offset=len(data),
        )
    if len(data) > expected:
        raise FormatError("trailing bytes after payload", offset=expected)
    flat = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    return flat.reshape((rows, cols), order="F").copy()


# -- rendering ---------------------------------------------------------------


def render_mosaic(D, atom_h, atom_w, grid_rows, grid_cols, pad=1):
    """Lay dictionary atoms out on a padded grid as one grayscale image.

    Every atom is affinely mapped to the full [0, 255] range on its own
    (so the rendering is invariant to per-atom positive rescaling); a
    constant atom becomes a flat 128 block.  Separators and unused grid
    cells are 128.  Atoms fill the grid row-major.
    """
    mat = np.asarray(getattr(D, "matrix", D), dtype=float)
    m, p = mat.shape
    atom_h, atom_w = int(atom_h), int(atom_w)
    grid_rows, grid_cols = int(grid_rows), int(grid_cols)
    pad = int(pad)
    if atom_h * atom_w != m:
        raise DimensionError(
            f"atom dims {atom_h}x{atom_w} do not match signal length {m}"
        )
    if grid_rows * grid_cols < p:
        raise DimensionError(
            f"grid {grid_rows}x{grid_cols} cannot hold {p} atoms"
        )
    if pad < 0:
        raise ValueError("pad must be >= 0")
    height = grid_rows * atom_h + (grid_rows + 1) * pad
    width = grid_cols * atom_w + (grid_cols + 1) * pad
    canvas = np.full((height, width), 128, dtype=np.uint8)
    for j in range(p):
        r, c = divmod(j, grid_cols)
        atom = mat[:, j].reshape(atom_h, atom_w)
        lo, hi = float(atom.min()), float(atom.max())
        if hi - lo <= 0.0:
            block = np.full((atom_h, atom_w), 128, dtype=np.uint8)
        else:
            scaled = np.rint((atom - lo) / (hi - lo) * 255.0)
            block = np.clip(scaled, 0, 255).astype(np.uint8)
        top = pad + r * (atom_h + pad)
        left = pad + c * (atom_w + pad)
        canvas[top:top + atom_h, left:left + atom_w] = block
    return GrayImage(height=height, width=width, pixels=canvas)
