"""Volume containers, the SVOL/SMSK file formats, HU handling, label interpolation and reslicing."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

BACKGROUND, ISCHEMIC, HEMORRHAGIC = 0, 1, 2
KINDS = ("raw", "hu", "windowed", "probability", "binary", "score")


class FormatError(ValueError):
    """Malformed SVOL/SMSK header or payload."""


@dataclass
class VolumeGrid:
    """Scalar field on a (z, y, x) voxel grid; spacing in millimetres."""

    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = "hu"
    rescale_slope: float = 1.0
    rescale_intercept: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ValueError(f"volume needs three non-empty dims, got {self.values.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown volume kind {self.kind!r}")
        if self.kind in ("windowed", "probability", "binary") and self.values.size and (
                self.values.min() < 0 or self.values.max() > 1):
            raise ValueError(f"{self.kind} volume has values outside [0, 1]")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass
class LabelVolume:
    """Per-voxel class labels: 0 background, 1 ischemic, 2 hemorrhagic."""

    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ValueError(f"label volume needs three dims, got {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > 2):
            raise ValueError("labels must be in {0, 1, 2}")
        self.labels = self.labels.astype(np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    def mask(self, label: int) -> np.ndarray:
        return self.labels == label


class Projection(enum.Enum):
    AXIAL = "axial"
    CORONAL = "coronal"
    SAGITTAL = "sagittal"


# ---------------------------------------------------------------- file formats
#
# Each file is a JSON header line terminated by "\n" followed by the raw payload.

def _write(path, header: dict, payload: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode() + b"\n")
        fh.write(payload)


def _read(path, magic: str):
    with open(path, "rb") as fh:
        blob = fh.read()
    nl = blob.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing header terminator")
    try:
        header = json.loads(blob[:nl])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: header is not valid JSON ({exc})") from None
    if header.get("magic") != magic:
        raise FormatError(f"{path}: bad magic {header.get('magic')!r}, expected {magic!r}")
    dims = header.get("dims")
    if not (isinstance(dims, list) and len(dims) == 3 and all(isinstance(d, int) and d >= 1 for d in dims)):
        raise FormatError(f"{path}: dims must be three positive integers, got {dims!r}")
    return header, blob[nl + 1:], nl + 1


def write_svol(path, vol: VolumeGrid) -> None:
    header = {"magic": "SVOL1", "dims": list(vol.dims), "spacing_mm": list(vol.spacing),
              "dtype": "f32le", "kind": vol.kind,
              "rescale_slope": vol.rescale_slope, "rescale_intercept": vol.rescale_intercept}
    _write(path, header, np.ascontiguousarray(vol.values, dtype="<f4").tobytes())


def read_svol(path) -> VolumeGrid:
    header, payload, offset = _read(path, "SVOL1")
    if header.get("dtype") != "f32le":
        raise FormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    dims = tuple(header["dims"])
    expected = int(np.prod(dims)) * 4
    if len(payload) != expected:
        raise FormatError(f"{path}: payload at byte offset {offset} has {len(payload)} bytes, "
                          f"expected {expected}")
    values = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return VolumeGrid(values, tuple(header["spacing_mm"]), header.get("kind", "raw"),
                      header.get("rescale_slope", 1.0), header.get("rescale_intercept", 0.0))


def write_smsk(path, lab: LabelVolume) -> None:
    header = {"magic": "SMSK1", "dims": list(lab.dims), "spacing_mm": list(lab.spacing),
              "dtype": "u8", "rescale_slope": 1.0, "rescale_intercept": 0.0}
    _write(path, header, np.ascontiguousarray(lab.labels, dtype=np.uint8).tobytes())


def read_smsk(path) -> LabelVolume:
    header, payload, offset = _read(path, "SMSK1")
    if header.get("dtype") != "u8":
        raise FormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    dims = tuple(header["dims"])
    expected = int(np.prod(dims))
    if len(payload) != expected:
        raise FormatError(f"{path}: payload at byte offset {offset} has {len(payload)} bytes, "
                          f"expected {expected}")
    labels = np.frombuffer(payload, dtype=np.uint8)
    bad = np.flatnonzero(labels > 2)
    if bad.size:
        raise FormatError(f"{path}: label byte {labels[bad[0]]} at byte offset {offset + int(bad[0])} "
                          f"is not in {{0,1,2}}")
    return LabelVolume(labels.reshape(dims).copy(), tuple(header["spacing_mm"]))


# ---------------------------------------------------------------- intensities

def hu_normalize(raw: VolumeGrid, slope: float | None = None, intercept: float | None = None) -> VolumeGrid:
    """Map stored values to Hounsfield units: ``raw * slope + intercept``.

    Slope/intercept default to the ones carried by the volume header.
    """
    if raw.kind != "raw":
        raise ValueError(f"hu_normalize expects a raw volume, got kind {raw.kind!r}")
    slope = raw.rescale_slope if slope is None else slope
    intercept = raw.rescale_intercept if intercept is None else intercept
    if slope == 0:
        raise ValueError("rescale slope must be non-zero")
    hu = raw.values.astype(np.float64) * slope + intercept
    return VolumeGrid(hu.astype(np.float32), raw.spacing, "hu")


def window_scale(hu: VolumeGrid, lo: float = 0.0, hi: float = 80.0) -> VolumeGrid:
    """Clip to the [lo, hi] HU window and map linearly onto [0, 1]."""
    if not lo < hi:
        raise ValueError(f"window needs lo < hi, got [{lo}, {hi}]")
    v = (np.clip(hu.values, lo, hi) - lo) / (hi - lo)
    return VolumeGrid(np.clip(v, 0, 1).astype(np.float32), hu.spacing, "windowed")


# ---------------------------------------------------------------- thick -> thin labels

def interpolate_labels(thick: LabelVolume, thick_z, thin_z) -> LabelVolume:
    """Linearly interpolate per-class masks along z onto new slice positions.

    Each class is treated as a 0/1 field and kept where the interpolated value
    is >= 0.5. Where both classes qualify the hemorrhagic label wins.
    """
    thick_z = np.asarray(thick_z, dtype=np.float64)
    thin_z = np.asarray(thin_z, dtype=np.float64)
    if thick_z.ndim != 1 or thick_z.size != thick.dims[0]:
        raise ValueError(f"need one z position per thick slice ({thick.dims[0]}), got {thick_z.size}")
    if thick_z.size > 1 and np.any(np.diff(thick_z) <= 0):
        raise ValueError("thick slice positions must be strictly increasing")
    if thin_z.size and (thin_z.min() < thick_z[0] or thin_z.max() > thick_z[-1]):
        raise ValueError(f"thin positions [{thin_z.min()}, {thin_z.max()}] fall outside the thick range "
                         f"[{thick_z[0]}, {thick_z[-1]}]; extrapolation is not supported")
    hi = np.clip(np.searchsorted(thick_z, thin_z, side="right"), 1, max(thick_z.size - 1, 1))
    lo = hi - 1
    if thick_z.size == 1:
        lo = hi = np.zeros(thin_z.size, dtype=int)
        frac = np.zeros(thin_z.size)
    else:
        frac = (thin_z - thick_z[lo]) / (thick_z[hi] - thick_z[lo])
    out = np.zeros((thin_z.size,) + thick.dims[1:], dtype=np.uint8)
    for label in (ISCHEMIC, HEMORRHAGIC):  # hemorrhagic written last so it wins collisions
        m = (thick.labels == label).astype(np.float64)
        f = frac[:, None, None]
        field = (1 - f) * m[lo] + f * m[hi]
        out[field >= 0.5 - 1e-12] = label
    dz = float(np.median(np.diff(thin_z))) if thin_z.size > 1 else thick.spacing[0]
    return LabelVolume(out, (dz if dz > 0 else thick.spacing[0],) + thick.spacing[1:])


# ---------------------------------------------------------------- reslicing

_PERM = {Projection.AXIAL: (0, 1, 2), Projection.CORONAL: (1, 0, 2), Projection.SAGITTAL: (2, 0, 1)}


def _as_projection(p) -> Projection:
    return p if isinstance(p, Projection) else Projection(p)


def reslice_array(arr: np.ndarray, p) -> np.ndarray:
    """Axial (z,y,x) -> coronal (y,z,x) or sagittal (x,z,y)."""
    return np.ascontiguousarray(arr.transpose(_PERM[_as_projection(p)]))


def unreslice_array(arr: np.ndarray, p) -> np.ndarray:
    """Inverse of :func:`reslice_array`."""
    return np.ascontiguousarray(arr.transpose(np.argsort(_PERM[_as_projection(p)])))


def _permute_spacing(spacing, perm):
    return tuple(spacing[i] for i in perm)


def reslice(v, p, inverse: bool = False):
    """Permute a VolumeGrid or LabelVolume into (or back from) another projection."""
    p = _as_projection(p)
    perm = _PERM[p]
    if inverse:
        perm = tuple(int(i) for i in np.argsort(perm))
    if isinstance(v, LabelVolume):
        return LabelVolume(np.ascontiguousarray(v.labels.transpose(perm)), _permute_spacing(v.spacing, perm))
    return replace(v, values=np.ascontiguousarray(v.values.transpose(perm)),
                   spacing=_permute_spacing(v.spacing, perm))


# ---------------------------------------------------------------- resampling

def _target_dims(dims, spacing, target_mm):
    out = tuple(int(round(d * s / target_mm)) for d, s in zip(dims, spacing))
    if min(out) < 1:
        raise ValueError(f"resampling {dims} at {spacing} mm to {target_mm} mm gives empty dims {out}")
    return out


def _coords(n_in, n_out, s_in, s_out):
    # voxel centres: physical position (i + 0.5) * s, mapped back to input index space
    return ((np.arange(n_out) + 0.5) * s_out) / s_in - 0.5


def resample_isotropic(v, target_mm: float = 1.0):
    """Trilinear (values) or nearest (labels) resampling onto an isotropic grid."""
    if target_mm <= 0:
        raise ValueError("target spacing must be positive")
    is_label = isinstance(v, LabelVolume)
    arr = v.labels if is_label else v.values
    dims = _target_dims(arr.shape, v.spacing, target_mm)
    axes = [_coords(n, m, s, target_mm) for n, m, s in zip(arr.shape, dims, v.spacing)]
    grid = np.meshgrid(*axes, indexing="ij")
    if is_label:
        out = ndimage.map_coordinates(arr, grid, order=0, mode="nearest")
        return LabelVolume(out.astype(np.uint8), (target_mm,) * 3)
    out = ndimage.map_coordinates(arr.astype(np.float64), grid, order=1, mode="nearest")
    return replace(v, values=out.astype(np.float32), spacing=(target_mm,) * 3)
