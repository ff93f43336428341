"""Procedural diffusion phantoms: SH fields, fODF peaks, masks, ground truth.

The spherical-harmonic convention used throughout (and by the PHN1 file
format): real symmetric basis, even orders l in {0,2,4,6,8}, entries ordered
by l ascending then m from -l to l (45 coefficients). Peak-to-SH synthesis
is a delta projection with per-order apodization 1/(1 + l(l+1)/16) so lobes
stay smooth under trilinear interpolation.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import sph_harm_y

PHN_MAGIC = b"PHN1"
SH_ORDERS = (0, 2, 4, 6, 8)
N_SH = 45
MAX_PEAKS = 3
_MERGE_DOT = 0.985  # peaks closer than ~10 degrees collapse into one


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class VoxelGrid:
    dims: tuple
    voxel_size: float = 1.0

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 8 for d in self.dims):
            raise PhantomError(f"grid dims must be 3 values each >= 8, got {self.dims}")
        if self.voxel_size <= 0:
            raise PhantomError(f"voxel_size must be positive, got {self.voxel_size}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))


@dataclass(frozen=True)
class BundleSpec:
    """One synthetic bundle: a tube around an analytic centerline."""

    name: str
    kind: str  # straight-tube | arc | helix | crossing-pair
    radius: float = 2.0
    start: tuple = None
    end: tuple = None
    center: tuple = None
    arc_radius: float = None
    pitch: float = 4.0
    turns: float = 1.0

    def __post_init__(self):
        if self.kind not in ("straight-tube", "arc", "helix", "crossing-pair"):
            raise PhantomError(f"unknown bundle kind '{self.kind}'")
        if self.radius < 1.0:
            raise PhantomError(f"tube radius must be >= 1 voxel, got {self.radius}")


@dataclass(frozen=True)
class PhantomSpec:
    grid: VoxelGrid
    bundles: tuple
    rng_seed: int = 0
    n_gt_streamlines: int = 16
    gt_point_spacing: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "bundles", tuple(self.bundles))
        if not self.bundles:
            raise PhantomError("phantom needs at least one bundle")


@dataclass
class TractMask:
    bundle_name: str
    values: np.ndarray  # (X,Y,Z) uint8

    def __post_init__(self):
        if not self.values.any():
            raise PhantomError(f"mask for '{self.bundle_name}' has no voxels set")


@dataclass
class Phantom:
    grid: VoxelGrid
    sh: np.ndarray           # (X,Y,Z,45) float32
    peak_counts: np.ndarray  # (X,Y,Z) uint8
    peak_dirs: np.ndarray    # (X,Y,Z,3,3) float32
    masks: list = field(default_factory=list)
    bundles: dict = field(default_factory=dict)  # name -> list of (n,3) arrays

    def mask_for(self, bundle_name):
        for m in self.masks:
            if m.bundle_name == bundle_name:
                return m
        raise KeyError(f"no mask for bundle '{bundle_name}'")

    def peaks_at(self, position):
        """Nearest-voxel fODF peaks at a voxel-space position; (k,3) array."""
        idx = np.clip(np.rint(position).astype(int), 0, np.asarray(self.grid.dims) - 1)
        k = int(self.peak_counts[idx[0], idx[1], idx[2]])
        return self.peak_dirs[idx[0], idx[1], idx[2], :k]


# -- spherical harmonics ------------------------------------------------------

def sh_basis(dirs):
    """Real symmetric SH basis (orders 0..8 even) at unit directions.

    dirs: (..., 3). Returns (..., 45), ordered by l then m from -l to l.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    theta = np.arccos(np.clip(z, -1.0, 1.0))
    phi = np.arctan2(y, x)
    cols = []
    for l in SH_ORDERS:
        for m in range(-l, l + 1):
            am = abs(m)
            ylm = sph_harm_y(l, am, theta, phi)
            if m < 0:
                col = np.sqrt(2.0) * (-1.0) ** am * ylm.imag
            elif m == 0:
                col = ylm.real
            else:
                col = np.sqrt(2.0) * (-1.0) ** am * ylm.real
            cols.append(col)
    return np.stack(cols, axis=-1)


def sh_apodization():
    """Per-coefficient smoothing weights 1/(1 + l(l+1)/16)."""
    w = []
    for l in SH_ORDERS:
        w.extend([1.0 / (1.0 + l * (l + 1) / 16.0)] * (2 * l + 1))
    return np.asarray(w)


def sh_project_peaks(peaks):
    """Project unit peak directions onto the apodized SH basis; (45,) vector."""
    peaks = np.asarray(peaks, dtype=np.float64).reshape(-1, 3)
    if peaks.shape[0] == 0:
        return np.zeros(N_SH)
    norms = np.linalg.norm(peaks, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        warnings.warn("non-unit peak normalized before SH projection")
        peaks = peaks / norms[:, None]
    return (sh_basis(peaks) * sh_apodization()).sum(axis=0)


# -- field sampling -----------------------------------------------------------

def sample_field(values, positions):
    """Trilinear interpolation at voxel-space positions, zero outside the grid.

    values: (X,Y,Z) or (X,Y,Z,C); positions: (...,3). Integer coordinates are
    voxel centers.
    """
    values = np.asarray(values)
    pos = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    squeeze = np.asarray(positions).ndim == 1
    dims = np.asarray(values.shape[:3])
    scalar = values.ndim == 3
    vals = values[..., None] if scalar else values
    nc = vals.shape[3]

    base = np.floor(pos).astype(np.int64)
    frac = pos - base
    out = np.zeros(pos.shape[:-1] + (nc,), dtype=np.float64)
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        idx = base + off
        inb = np.all((idx >= 0) & (idx < dims), axis=-1)
        w = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=-1)
        cidx = np.clip(idx, 0, dims - 1)
        contrib = vals[cidx[..., 0], cidx[..., 1], cidx[..., 2]].astype(np.float64)
        out += (w * inb)[..., None] * contrib
    if scalar:
        out = out[..., 0]
    return out[0] if squeeze else out


# -- centerlines --------------------------------------------------------------

def _centerline(spec, grid):
    """Dense (points, tangents) samples of a bundle centerline, in voxels."""
    dims = np.asarray(grid.dims, dtype=np.float64)
    margin = spec.radius + 0.5
    if spec.kind == "straight-tube":
        start = np.asarray(spec.start if spec.start is not None else [margin, dims[1] / 2, dims[2] / 2])
        end = np.asarray(spec.end if spec.end is not None else [dims[0] - 1 - margin, dims[1] / 2, dims[2] / 2])
        n = max(8, int(np.linalg.norm(end - start) * 4))
        t = np.linspace(0.0, 1.0, n)[:, None]
        pts = start + t * (end - start)
        tans = np.tile((end - start) / np.linalg.norm(end - start), (n, 1))
    elif spec.kind == "arc":
        center = np.asarray(spec.center if spec.center is not None else dims / 2)
        r = spec.arc_radius if spec.arc_radius is not None else min(dims[0], dims[1]) / 2 - margin - 1
        ang = np.linspace(0.0, np.pi, max(16, int(np.pi * r * 4)))
        pts = np.stack([center[0] + r * np.cos(ang),
                        center[1] + r * np.sin(ang),
                        np.full_like(ang, center[2])], axis=1)
        tans = np.stack([-np.sin(ang), np.cos(ang), np.zeros_like(ang)], axis=1)
    elif spec.kind == "helix":
        center = np.asarray(spec.center if spec.center is not None else dims / 2)
        r = spec.arc_radius if spec.arc_radius is not None else min(dims[0], dims[1]) / 2 - margin - 1
        z_span = dims[2] - 2 * margin - 1
        ang = np.linspace(0.0, 2 * np.pi * spec.turns, max(32, int(8 * z_span)))
        z = center[2] - z_span / 2 + z_span * ang / ang[-1]
        pts = np.stack([center[0] + r * np.cos(ang), center[1] + r * np.sin(ang), z], axis=1)
        dz = z_span / ang[-1]
        tans = np.stack([-r * np.sin(ang), r * np.cos(ang), np.full_like(ang, dz)], axis=1)
        tans /= np.linalg.norm(tans, axis=1, keepdims=True)
    else:
        raise PhantomError(f"no centerline for kind '{spec.kind}'")
    if np.any(pts < 0) or np.any(pts > dims - 1):
        raise PhantomError(f"bundle '{spec.name}' centerline leaves the grid")
    return pts, tans


def _expand_bundles(spec):
    """Resolve crossing-pair descriptors into two straight tubes."""
    out = []
    dims = np.asarray(spec.grid.dims, dtype=np.float64)
    for b in spec.bundles:
        if b.kind != "crossing-pair":
            out.append(b)
            continue
        margin = b.radius + 0.5
        c = np.asarray(b.center if b.center is not None else dims / 2)
        out.append(BundleSpec(name=b.name + "_a", kind="straight-tube", radius=b.radius,
                              start=(margin, c[1], c[2]), end=(dims[0] - 1 - margin, c[1], c[2])))
        out.append(BundleSpec(name=b.name + "_b", kind="straight-tube", radius=b.radius,
                              start=(c[0], margin, c[2]), end=(c[0], dims[1] - 1 - margin, c[2])))
    return out


def _offset_streamline(pts, tans, radius_frac, angle, rng_jitter, radius):
    """Centerline shifted sideways inside the tube, for ground-truth variety."""
    ref = np.array([0.12, 0.78, 0.61])
    n1 = np.cross(tans, ref)
    bad = np.linalg.norm(n1, axis=1) < 1e-6
    if bad.any():
        n1[bad] = np.cross(tans[bad], np.array([1.0, 0.0, 0.0]))
    n1 /= np.linalg.norm(n1, axis=1, keepdims=True)
    n2 = np.cross(tans, n1)
    r = radius_frac * radius
    return pts + r * (np.cos(angle) * n1 + np.sin(angle) * n2) + rng_jitter


def generate_phantom(spec):
    """Build a deterministic Phantom (SH field, peaks, masks, ground truth)."""
    rng = np.random.default_rng(spec.rng_seed)
    grid = spec.grid
    dims = grid.dims
    bundles = _expand_bundles(spec)

    xs, ys, zs = np.meshgrid(*(np.arange(d) for d in dims), indexing="ij")
    centers = np.stack([xs, ys, zs], axis=-1).reshape(-1, 3).astype(np.float64)

    peak_counts = np.zeros(dims, dtype=np.uint8)
    peak_dirs = np.zeros(dims + (MAX_PEAKS, 3), dtype=np.float32)
    masks = []
    gt = {}

    flat_counts = peak_counts.reshape(-1)
    flat_dirs = peak_dirs.reshape(-1, MAX_PEAKS, 3)

    for b in bundles:
        pts, tans = _centerline(b, grid)
        tree = cKDTree(pts)
        dist, nearest = tree.query(centers)
        inside = dist <= b.radius
        mask = inside.reshape(dims).astype(np.uint8)
        masks.append(TractMask(bundle_name=b.name, values=mask))

        for vi in np.nonzero(inside)[0]:
            tan = tans[nearest[vi]]
            k = flat_counts[vi]
            dots = np.abs(flat_dirs[vi, :k] @ tan)
            if k > 0 and np.any(dots > _MERGE_DOT):
                continue
            if k < MAX_PEAKS:
                flat_dirs[vi, k] = tan
                flat_counts[vi] = k + 1

        # ground-truth streamlines: the centerline plus offset copies
        arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
        n_pts = max(2, int(arc[-1] / spec.gt_point_spacing))
        s = np.linspace(0.0, arc[-1], n_pts)
        line = np.stack([np.interp(s, arc, pts[:, i]) for i in range(3)], axis=1)
        line_t = np.stack([np.interp(s, arc, tans[:, i]) for i in range(3)], axis=1)
        line_t /= np.linalg.norm(line_t, axis=1, keepdims=True)
        streams = [line.astype(np.float32)]
        for _ in range(spec.n_gt_streamlines - 1):
            frac = rng.uniform(0.15, 0.7)
            ang = rng.uniform(0.0, 2 * np.pi)
            sl = _offset_streamline(line, line_t, frac, ang, 0.0, b.radius)
            streams.append(np.clip(sl, 0, np.asarray(dims) - 1).astype(np.float32))
        gt[b.name] = streams

    sh = np.zeros(dims + (N_SH,), dtype=np.float32)
    flat_sh = sh.reshape(-1, N_SH)
    occupied = np.nonzero(flat_counts > 0)[0]
    for vi in occupied:
        k = flat_counts[vi]
        flat_sh[vi] = sh_project_peaks(flat_dirs[vi, :k]).astype(np.float32)

    return Phantom(grid=grid, sh=sh, peak_counts=peak_counts, peak_dirs=peak_dirs,
                   masks=masks, bundles=gt)


# -- PHN1 file format ---------------------------------------------------------

def save_phantom(phantom, path):
    """Write the PHN1 binary layout (little-endian, C voxel order)."""
    dims = phantom.grid.dims
    n = dims[0] * dims[1] * dims[2]
    with open(path, "wb") as f:
        f.write(PHN_MAGIC)
        f.write(struct.pack("<3I", *dims))
        f.write(struct.pack("<f", phantom.grid.voxel_size))
        f.write(struct.pack("<I", len(phantom.masks)))
        f.write(phantom.sh.astype("<f4").reshape(n, N_SH).tobytes())
        counts = phantom.peak_counts.reshape(n)
        dirs = phantom.peak_dirs.astype("<f4").reshape(n, MAX_PEAKS * 3)
        block = np.zeros((n, 1 + MAX_PEAKS * 3 * 4), dtype=np.uint8)
        block[:, 0] = counts
        block[:, 1:] = dirs.view(np.uint8).reshape(n, -1)
        f.write(block.tobytes())
        for mask in phantom.masks:
            f.write(mask.values.astype(np.uint8).reshape(n).tobytes())
            nb = mask.bundle_name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)


def load_phantom(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != PHN_MAGIC:
        raise PhantomError(f"bad phantom magic in {path}: {raw[:4]!r}")
    off = 4
    dims = struct.unpack_from("<3I", raw, off)
    off += 12
    (voxel_size,) = struct.unpack_from("<f", raw, off)
    off += 4
    (n_bundles,) = struct.unpack_from("<I", raw, off)
    off += 4
    n = dims[0] * dims[1] * dims[2]
    sh = np.frombuffer(raw, dtype="<f4", count=n * N_SH, offset=off).reshape(dims + (N_SH,)).copy()
    off += 4 * n * N_SH
    stride = 1 + MAX_PEAKS * 3 * 4
    block = np.frombuffer(raw, dtype=np.uint8, count=n * stride, offset=off).reshape(n, stride)
    off += n * stride
    counts = block[:, 0].reshape(dims).copy()
    dirs = block[:, 1:].copy().view("<f4").reshape(dims + (MAX_PEAKS, 3))
    masks = []
    for _ in range(n_bundles):
        mvals = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off).reshape(dims).copy()
        off += n
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        masks.append(TractMask(bundle_name=name, values=mvals))
    if off != len(raw):
        raise PhantomError(f"trailing bytes in phantom file at offset {off}")
    grid = VoxelGrid(dims=dims, voxel_size=float(voxel_size))
    return Phantom(grid=grid, sh=sh, peak_counts=counts, peak_dirs=dirs.astype(np.float32),
                   masks=masks, bundles={})
