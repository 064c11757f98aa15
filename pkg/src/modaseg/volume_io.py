"""Volumes, preprocessing, file formats, phantoms, and slice streaming.

Preprocessing protocol (applied by the pipeline in this order): resample to
target spacing, conform to the target grid, clip to mean +/- 3 std, then map
the intensity range to [-1, 1] for the bounded-output translation nets.

The phantom generator stands in for the gated clinical data: both domains
draw anatomy (two ellipsoidal structures) from the same distribution and
differ only in appearance (class mean intensities, optional contrast
inversion, noise, smooth bias field).
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

DOMAINS = ("source", "mapped_source", "target")
AXIAL = 2  # training slices are taken along the third axis


@dataclass
class Volume:
    """3D scalar grid with physical voxel spacing (mm per voxel)."""

    data: np.ndarray
    spacing: tuple

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValidationError(f"volume must be 3D with positive shape, got {self.data.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValidationError(f"spacing must be 3 positive components, got {self.spacing}")
        bad = ~np.isfinite(self.data)
        if bad.any():
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise ValidationError(f"non-finite intensity at voxel {idx}")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class LabelVolume:
    """Integer class grid, values in [0, num_classes)."""

    data: np.ndarray
    spacing: tuple
    num_classes: int = 3

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if not np.issubdtype(self.data.dtype, np.integer):
            raise ValidationError(f"labels must be integer, got {self.data.dtype}")
        self.data = self.data.astype(np.int16)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.data.ndim != 3:
            raise ValidationError(f"label volume must be 3D, got {self.data.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValidationError(f"spacing must be 3 positive components, got {self.spacing}")
        if self.data.size and (self.data.min() < 0 or self.data.max() >= self.num_classes):
            raise ValidationError(
                f"label values must lie in [0, {self.num_classes}), got "
                f"[{self.data.min()}, {self.data.max()}]")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class SliceSample:
    """One 2D axial training slice with provenance."""

    image: np.ndarray
    mask: np.ndarray | None
    domain: str
    volume_id: str
    slice_index: int

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValidationError(f"unknown domain {self.domain!r}")
        if self.mask is not None:
            if self.domain == "target":
                raise ValidationError("target-domain slices carry no mask during training")
            if self.mask.shape != self.image.shape:
                raise ValidationError(
                    f"mask shape {self.mask.shape} != image shape {self.image.shape}")


# -- preprocessing operations ----------------------------------------------------


def _resample_axis(data, axis, n_out, ratio, nearest):
    n_in = data.shape[axis]
    coords = np.arange(n_out, dtype=np.float64) * ratio
    if nearest:
        idx = np.clip(np.floor(coords + 0.5).astype(np.int64), 0, n_in - 1)
        return np.take(data, idx, axis=axis)
    i0 = np.clip(np.floor(coords).astype(np.int64), 0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = np.clip(coords - i0, 0.0, 1.0)
    lo = np.take(data, i0, axis=axis)
    hi = np.take(data, i1, axis=axis)
    shape = [1, 1, 1]
    shape[axis] = n_out
    return lo + frac.reshape(shape) * (hi - lo)


def resample(vol, target_spacing, interp: str = "linear"):
    """Resample to a new voxel spacing.

    Output shape per axis is round(n_in * s_in / s_out) (at least 1). Linear
    interpolation is separable per axis; coordinates past the last sample are
    clamped to the edge. Labels must use nearest.
    """
    target_spacing = tuple(float(s) for s in target_spacing)
    if min(target_spacing) <= 0:
        raise ValidationError(f"target spacing must be positive, got {target_spacing}")
    if interp not in ("linear", "nearest"):
        raise ValidationError(f"unknown interpolation {interp!r}")
    is_labels = isinstance(vol, LabelVolume)
    if is_labels and interp != "nearest":
        raise ValidationError("label volumes must be resampled with nearest interpolation")
    data = vol.data.astype(np.float64) if is_labels else vol.data
    for axis in range(3):
        ratio = target_spacing[axis] / vol.spacing[axis]
        n_out = max(1, int(np.floor(vol.shape[axis] / ratio + 0.5)))
        data = _resample_axis(data, axis, n_out, ratio, interp == "nearest")
    if is_labels:
        return LabelVolume(np.rint(data).astype(np.int16), target_spacing, vol.num_classes)
    return Volume(data, target_spacing)


def conform_shape(vol, target_shape, fill=0.0):
    """Center-crop oversized axes and symmetrically pad undersized ones."""
    target_shape = tuple(int(t) for t in target_shape)
    if min(target_shape) < 1:
        raise ValidationError(f"target shape must be positive, got {target_shape}")
    data = vol.data
    for axis in range(3):
        n, t = data.shape[axis], target_shape[axis]
        if n > t:
            start = (n - t) // 2
            sl = [slice(None)] * 3
            sl[axis] = slice(start, start + t)
            data = data[tuple(sl)]
        elif n < t:
            before = (t - n) // 2
            widths = [(0, 0)] * 3
            widths[axis] = (before, t - n - before)
            data = np.pad(data, widths, mode="constant", constant_values=fill)
    if isinstance(vol, LabelVolume):
        return LabelVolume(data.astype(np.int16), vol.spacing, vol.num_classes)
    return Volume(data.copy(), vol.spacing)


def clip_intensities(vol: Volume) -> Volume:
    """Clamp intensities to mean +/- 3 std of the input volume (population std)."""
    mu = float(np.mean(vol.data))
    sd = float(np.std(vol.data))
    return Volume(np.clip(vol.data, mu - 3.0 * sd, mu + 3.0 * sd), vol.spacing)


def clip_bounds(vol: Volume):
    mu = float(np.mean(vol.data))
    sd = float(np.std(vol.data))
    return mu - 3.0 * sd, mu + 3.0 * sd


def normalize(vol: Volume) -> Volume:
    """Affine map of [min, max] onto [-1, 1]; constant volumes map to zero."""
    lo = float(vol.data.min())
    hi = float(vol.data.max())
    if hi == lo:
        return Volume(np.zeros_like(vol.data), vol.spacing)
    return Volume(-1.0 + 2.0 * (vol.data - lo) / (hi - lo), vol.spacing)


# -- phantom generation ------------------------------------------------------------


@dataclass(frozen=True)
class DomainAppearance:
    """Per-domain intensity model: class means, inversion, noise, bias field."""

    class_means: tuple = (30.0, 70.0, 95.0)
    invert_contrast: bool = False
    noise_level: float = 2.0
    bias_amplitude: float = 4.0

    def effective_means(self):
        m = self.class_means
        if not self.invert_contrast:
            return tuple(float(v) for v in m)
        pivot = max(m) + min(m)
        return tuple(float(pivot - v) for v in m)


@dataclass(frozen=True)
class PhantomSpec:
    n_source: int = 6
    n_target: int = 6
    grid_shape: tuple = (64, 64, 16)
    spacing: tuple = (1.0, 1.0, 1.0)
    tumor_radius: tuple = (9.0, 14.0)       # class 1: in-plane radius range (voxels)
    tumor_z_radius: tuple = (3.0, 6.0)
    cochlea_radius: tuple = (2.5, 4.0)      # class 2: small structure
    cochlea_z_radius: tuple = (1.5, 2.5)
    source: DomainAppearance = field(default_factory=DomainAppearance)
    target: DomainAppearance = field(default_factory=lambda: DomainAppearance(
        class_means=(30.0, 70.0, 95.0), invert_contrast=True))
    seed: int = 0

    def __post_init__(self):
        nx, ny, nz = self.grid_shape
        if self.n_source < 1 or self.n_target < 1:
            raise ValidationError("need at least one volume per domain")
        for rng_xy, rng_z in ((self.tumor_radius, self.tumor_z_radius),
                              (self.cochlea_radius, self.cochlea_z_radius)):
            if rng_xy[1] * 2 >= min(nx, ny) or rng_z[1] * 2 >= nz:
                raise ValidationError(
                    f"structure radius {rng_xy}/{rng_z} cannot fit in grid {self.grid_shape}")


def _ellipsoid(grid_shape, center, radii):
    nx, ny, nz = grid_shape
    x = np.arange(nx)[:, None, None]
    y = np.arange(ny)[None, :, None]
    z = np.arange(nz)[None, None, :]
    return (((x - center[0]) / radii[0]) ** 2
            + ((y - center[1]) / radii[1]) ** 2
            + ((z - center[2]) / radii[2]) ** 2) <= 1.0


def _sample_structure(rng, grid_shape, r_xy, r_z):
    rx = rng.uniform(*r_xy)
    ry = rng.uniform(*r_xy)
    rz = rng.uniform(*r_z)
    nx, ny, nz = grid_shape
    cx = rng.uniform(rx, nx - 1 - rx)
    cy = rng.uniform(ry, ny - 1 - ry)
    cz = rng.uniform(rz, nz - 1 - rz)
    return (cx, cy, cz), (rx, ry, rz)


def _phantom_labels(rng, spec: PhantomSpec) -> np.ndarray:
    labels = np.zeros(spec.grid_shape, dtype=np.int16)
    c1, r1 = _sample_structure(rng, spec.grid_shape, spec.tumor_radius, spec.tumor_z_radius)
    tumor = _ellipsoid(spec.grid_shape, c1, r1)
    labels[tumor] = 1
    for _ in range(50):
        c2, r2 = _sample_structure(rng, spec.grid_shape, spec.cochlea_radius,
                                   spec.cochlea_z_radius)
        small = _ellipsoid(spec.grid_shape, c2, r2)
        if not (small & tumor).any():
            break
    labels[small] = 2
    return labels


def _render_appearance(rng, labels: np.ndarray, app: DomainAppearance) -> np.ndarray:
    means = app.effective_means()
    img = np.asarray(means, dtype=np.float64)[labels]
    if app.bias_amplitude > 0:
        nx, ny, nz = labels.shape
        fx, fy = rng.uniform(0.5, 1.5, size=2)
        px, py = rng.uniform(0.0, 1.0, size=2)
        bias = (np.cos(2 * np.pi * (fx * np.arange(nx)[:, None] / nx + px))
                * np.cos(2 * np.pi * (fy * np.arange(ny)[None, :] / ny + py)))
        img += app.bias_amplitude * bias[:, :, None]
    if app.noise_level > 0:
        img += rng.normal(0.0, app.noise_level, size=labels.shape)
    return img


def make_phantom_dataset(spec: PhantomSpec):
    """Synthesize (source pairs, target volumes, held-out target truth).

    Deterministic in ``spec.seed``. Anatomy for both domains comes from the
    same sampler; only the appearance model differs. The target labels are
    returned separately and are for evaluation only.
    """
    source = []
    target = []
    target_truth = []
    for domain_tag, count in (("source", spec.n_source), ("target", spec.n_target)):
        for k in range(count):
            tag = 0 if domain_tag == "source" else 1
            anat_rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 101, tag, k)))
            app_rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 202, tag, k)))
            labels = _phantom_labels(anat_rng, spec)
            app = spec.source if domain_tag == "source" else spec.target
            img = _render_appearance(app_rng, labels, app)
            vol = Volume(img, spec.spacing)
            lab = LabelVolume(labels, spec.spacing)
            if domain_tag == "source":
                source.append((vol, lab))
            else:
                target.append(vol)
                target_truth.append(lab)
    return source, target, target_truth


# -- slice streaming ------------------------------------------------------------------


def slice_iterator(volumes, axis: int = AXIAL, batch_size: int = 4, shuffle_seed=None):
    """Yield one epoch of SliceSample batches.

    ``volumes``: iterable of (volume_id, Volume, LabelVolume-or-None, domain).
    Every slice of every volume appears exactly once. Without a shuffle seed
    the order is lexicographic in (volume_id, slice_index); with one it is a
    deterministic permutation of that order.
    """
    if axis not in (0, 1, 2):
        raise ValidationError(f"axis must be 0, 1 or 2, got {axis}")
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    entries = []
    table = {}
    for vid, vol, lab, domain in sorted(volumes, key=lambda t: t[0]):
        if vid in table:
            raise ValidationError(f"duplicate volume id {vid!r}")
        table[vid] = (vol, lab, domain)
        for k in range(vol.shape[axis]):
            entries.append((vid, k))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(entries))
        entries = [entries[i] for i in order]
    batch = []
    for vid, k in entries:
        vol, lab, domain = table[vid]
        image = np.ascontiguousarray(np.take(vol.data, k, axis=axis))
        mask = None
        if lab is not None:
            mask = np.ascontiguousarray(np.take(lab.data, k, axis=axis))
        batch.append(SliceSample(image, mask, domain, vid, k))
        if len(batch) == batch_size:
            yield batch
            batch = []
    if batch:
        yield batch


def batch_images(batch) -> np.ndarray:
    """Stack a SliceSample batch into an (B,1,H,W) array."""
    return np.stack([s.image for s in batch])[:, None, :, :]


def batch_masks(batch) -> np.ndarray:
    if any(s.mask is None for s in batch):
        raise ValidationError("batch contains unlabeled slices")
    return np.stack([s.mask for s in batch])


# -- file formats ------------------------------------------------------------------

_RAW_MAGIC = b"RAWVOL1\n"

_NIFTI_DTYPES = {2: np.dtype("|u1"), 4: np.dtype("<i2"), 8: np.dtype("<i4"),
                 16: np.dtype("<f4"), 64: np.dtype("<f8"), 512: np.dtype("<u2")}
_NIFTI_CODES = {np.dtype("|u1"): 2, np.dtype("<i2"): 4, np.dtype("<i4"): 8,
                np.dtype("<f4"): 16, np.dtype("<f8"): 64}


def save_volume(path, vol) -> None:
    """Write a Volume/LabelVolume as .rawvol, .nii or .nii.gz (by extension)."""
    path = Path(path)
    name = path.name.lower()
    if name.endswith(".rawvol"):
        _save_rawvol(path, vol)
    elif name.endswith(".nii") or name.endswith(".nii.gz"):
        _save_nifti(path, vol)
    else:
        raise ValidationError(f"unknown volume format: {path.name}")


def load_volume(path) -> Volume:
    data, spacing = _load_any(path)
    return Volume(data.astype(np.float64), spacing)


def load_label_volume(path, num_classes: int = 3) -> LabelVolume:
    data, spacing = _load_any(path)
    if not np.allclose(data, np.rint(data)):
        raise ValidationError(f"{path}: non-integer label data")
    return LabelVolume(np.rint(data).astype(np.int16), spacing, num_classes)


def _load_any(path):
    path = Path(path)
    if not path.exists():
        raise OSError(f"no such volume file: {path}")
    name = path.name.lower()
    if name.endswith(".rawvol"):
        return _load_rawvol(path)
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return _load_nifti(path)
    raise ValidationError(f"unknown volume format: {path.name}")


def _save_rawvol(path, vol) -> None:
    data = vol.data
    dtype = "<i2" if isinstance(vol, LabelVolume) else "<f8"
    header = json.dumps({
        "shape": list(data.shape),
        "spacing": list(vol.spacing),
        "dtype": dtype,
        "kind": "labels" if isinstance(vol, LabelVolume) else "image",
    }, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_RAW_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(np.ascontiguousarray(data.astype(dtype)).tobytes(order="C"))
    tmp.replace(path)


def _load_rawvol(path):
    with open(path, "rb") as f:
        if f.read(len(_RAW_MAGIC)) != _RAW_MAGIC:
            raise ValidationError(f"{path}: not a rawvol file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        data = np.frombuffer(f.read(), dtype=header["dtype"]).reshape(header["shape"])
    return data.copy(), tuple(header["spacing"])


def _save_nifti(path, vol) -> None:
    data = vol.data
    arr = data.astype("<i2") if isinstance(vol, LabelVolume) else data.astype("<f8")
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    dims = (3,) + tuple(arr.shape) + (1, 1, 1, 1)
    struct.pack_into("<8h", hdr, 40, *dims)
    struct.pack_into("<h", hdr, 70, _NIFTI_CODES[arr.dtype])
    struct.pack_into("<h", hdr, 72, arr.dtype.itemsize * 8)
    pixdims = (1.0,) + tuple(float(s) for s in vol.spacing) + (0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<8f", hdr, 76, *pixdims)
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)    # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)    # scl_inter
    hdr[344:348] = b"n+1\x00"
    opener = gzip.open if path.name.lower().endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00" * 4)  # extension flag
        f.write(arr.tobytes(order="F"))


def _load_nifti(path):
    opener = gzip.open if str(path).lower().endswith(".gz") else open
    with opener(path, "rb") as f:
        blob = f.read()
    if len(blob) < 352:
        raise ValidationError(f"{path}: truncated NIfTI file")
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    swapped = sizeof_hdr != 348
    end = ">" if swapped else "<"
    if swapped and struct.unpack_from(">i", blob, 0)[0] != 348:
        raise ValidationError(f"{path}: not a NIfTI-1 file")
    dims = struct.unpack_from(f"{end}8h", blob, 40)
    ndim = dims[0]
    if not 1 <= ndim <= 7:
        raise ValidationError(f"{path}: bad dim[0]={ndim}")
    shape = tuple(max(1, d) for d in dims[1:4])
    (datatype,) = struct.unpack_from(f"{end}h", blob, 70)
    pixdim = struct.unpack_from(f"{end}8f", blob, 76)
    (vox_offset,) = struct.unpack_from(f"{end}f", blob, 108)
    (slope,) = struct.unpack_from(f"{end}f", blob, 112)
    (inter,) = struct.unpack_from(f"{end}f", blob, 116)
    if datatype not in _NIFTI_DTYPES:
        raise ValidationError(f"{path}: unsupported NIfTI datatype {datatype}")
    dt = _NIFTI_DTYPES[datatype]
    if swapped:
        dt = dt.newbyteorder(">")
    count = int(np.prod(shape))
    offset = int(vox_offset) if vox_offset else 352
    raw = np.frombuffer(blob, dtype=dt, count=count, offset=offset)
    data = raw.reshape(shape, order="F").astype(np.float64)
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data * (slope if slope != 0.0 else 1.0) + inter
    spacing = tuple(abs(float(p)) if p else 1.0 for p in pixdim[1:4])
    return data, spacing


# -- dataset manifest -----------------------------------------------------------------


def write_manifest(path, source_pairs, target_images, target_truth, meta=None) -> None:
    """Record dataset file layout: per-domain volume paths (truth eval-only)."""
    doc = {
        "source": [{"image": str(i), "mask": str(m)} for i, m in source_pairs],
        "target": [{"image": str(i)} for i in target_images],
        "target_truth": [{"mask": str(m), "evaluation_only": True} for m in target_truth],
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise OSError(f"no such manifest: {path}")
    return json.loads(path.read_text())
