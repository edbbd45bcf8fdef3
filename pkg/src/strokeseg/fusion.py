"""Three-projection prediction, threshold fusion, closing, V_pred scores and the three-way classifier."""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .metrics import dsc
from .volume import (HEMORRHAGIC, ISCHEMIC, LabelVolume, Projection, VolumeGrid,
                     reslice_array, unreslice_array)

PROJECTIONS = (Projection.AXIAL, Projection.CORONAL, Projection.SAGITTAL)
CHANNEL_OF = {"ischemic": 0, "hemorrhagic": 1}


@dataclass
class FusionParams:
    k_axial: float = 0.47
    k_coronal: float = 0.56
    k_sagittal: float = 0.56
    closing_radius: int = 3

    def __post_init__(self):
        for k in (self.k_axial, self.k_coronal, self.k_sagittal):
            if not 0 < k < 1:
                raise ValueError(f"fusion thresholds must lie in (0, 1), got {k}")
        if self.closing_radius < 0 or int(self.closing_radius) != self.closing_radius:
            raise ValueError("closing_radius must be a non-negative integer")

    @property
    def ks(self) -> tuple[float, float, float]:
        return self.k_axial, self.k_coronal, self.k_sagittal

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ClassifierParams:
    voxel_floor: float = 0.9
    ischemic_mean_thresh: float = 1.16
    hemorrhagic_mean_thresh: float = 1.52

    def __post_init__(self):
        if min(self.voxel_floor, self.ischemic_mean_thresh, self.hemorrhagic_mean_thresh) <= 0:
            raise ValueError("classifier constants must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FusedPrediction:
    """Per-class arrays shaped (2, D, H, W): channel 0 ischemic, channel 1 hemorrhagic."""

    binary: np.ndarray
    vpred: np.ndarray

    def label_volume(self, spacing=(1.0, 1.0, 1.0)) -> LabelVolume:
        return binary_to_labels(self.binary, spacing)


@dataclass
class ClassResult:
    predicted_class: str
    m_isch: float | None
    m_hem: float | None

    def to_dict(self, case_id: str | None = None) -> dict:
        out = {} if case_id is None else {"case_id": case_id}
        out.update(predicted_class=self.predicted_class, m_isch=self.m_isch, m_hem=self.m_hem)
        return out


def binary_to_labels(binary: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> LabelVolume:
    labels = np.zeros(binary.shape[1:], dtype=np.uint8)
    labels[binary[0] > 0] = ISCHEMIC
    labels[binary[1] > 0] = HEMORRHAGIC  # hemorrhagic wins where both fire
    return LabelVolume(labels, spacing)


# ---------------------------------------------------------------- prediction

def _mean_prediction(models, slices: np.ndarray) -> np.ndarray:
    if not models:
        raise ValueError("no models supplied for a projection")
    acc = None
    for m in models:
        p = np.asarray(m(slices), dtype=np.float64)
        acc = p if acc is None else acc + p
    return (acc / len(models)).astype(np.float32)


def predict_projections(models_by_projection, volume) -> dict[Projection, np.ndarray]:
    """Per-projection class probabilities, each mapped back to axial (z, y, x) order.

    ``models_by_projection`` maps a projection (enum or name) to a list of
    callables taking [N,1,H,W] slices and returning [N,2,H,W] probabilities;
    the list is averaged. ``volume`` is a windowed VolumeGrid or array.
    """
    arr = volume.values if isinstance(volume, VolumeGrid) else np.asarray(volume, dtype=np.float32)
    out = {}
    for key, models in models_by_projection.items():
        p = key if isinstance(key, Projection) else Projection(key)
        stack = reslice_array(arr, p)
        probs = _mean_prediction(models, stack[:, None])  # (N, 2, h, w)
        per_class = np.stack([unreslice_array(probs[:, c], p) for c in range(probs.shape[1])])
        assert per_class.shape[1:] == arr.shape, (per_class.shape, arr.shape)
        out[p] = per_class
    return out


# ---------------------------------------------------------------- fusion

def _check_aligned(*arrays):
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"projection maps are not aligned: dims {sorted(shapes)}")


def fuse_projections(pa, pc, ps, params: FusionParams | None = None) -> np.ndarray:
    """1 where any projection exceeds its own threshold (strictly), else 0."""
    params = params or FusionParams()
    pa, pc, ps = (np.asarray(x) for x in (pa, pc, ps))
    _check_aligned(pa, pc, ps)
    return ((pa > params.k_axial) | (pc > params.k_coronal) | (ps > params.k_sagittal)).astype(np.uint8)


def ball(radius: int) -> np.ndarray:
    """Discrete Euclidean ball: offsets o with |o| <= radius."""
    r = int(radius)
    z, y, x = np.ogrid[-r:r + 1, -r:r + 1, -r:r + 1]
    return (z * z + y * y + x * x) <= r * r


def morph_close(binary, radius: int = 3) -> np.ndarray:
    """Dilate then erode by a ball, treating everything outside the volume as background."""
    b = np.asarray(binary).astype(bool)
    if radius == 0 or not b.any():
        return b.astype(np.uint8)
    r = int(radius)
    se = ball(r)
    padded = np.pad(b, r)
    closed = ndimage.binary_erosion(ndimage.binary_dilation(padded, se), se, border_value=0)
    return closed[r:-r, r:-r, r:-r].astype(np.uint8)


def v_pred(pa, pc, ps, params: FusionParams | None = None) -> np.ndarray:
    """Sum of each projection's probability divided by its fusion threshold."""
    params = params or FusionParams()
    pa, pc, ps = (np.asarray(x, dtype=np.float64) for x in (pa, pc, ps))
    _check_aligned(pa, pc, ps)
    return pa / params.k_axial + pc / params.k_coronal + ps / params.k_sagittal


def floor_mean(vp, floor: float) -> float | None:
    """Mean of the scores strictly above ``floor``; None when no voxel qualifies."""
    vals = np.asarray(vp, dtype=np.float64).ravel()
    sel = np.sort(vals[vals > floor])  # sorted so the sum is independent of voxel order
    if sel.size == 0:
        return None
    return float(sel.sum() / sel.size)


def classify(vpred_isch, vpred_hem, params: ClassifierParams | None = None) -> ClassResult:
    params = params or ClassifierParams()
    m_i = floor_mean(vpred_isch, params.voxel_floor)
    m_h = floor_mean(vpred_hem, params.voxel_floor)
    return decide(m_i, m_h, params)


def decide(m_i: float | None, m_h: float | None, params: ClassifierParams) -> ClassResult:
    isch = m_i is not None and m_i > params.ischemic_mean_thresh
    hem = m_h is not None and m_h > params.hemorrhagic_mean_thresh
    if isch and hem:
        ri = m_i / params.ischemic_mean_thresh
        rh = m_h / params.hemorrhagic_mean_thresh
        label = "ischemic" if ri > rh else "hemorrhagic"
    elif isch:
        label = "ischemic"
    elif hem:
        label = "hemorrhagic"
    else:
        label = "healthy"
    return ClassResult(label, m_i, m_h)


def fuse(maps: dict, fparams: FusionParams | None = None, closing: bool = True) -> FusedPrediction:
    """Fuse aligned per-projection maps (each (2, D, H, W)) into masks and V_pred scores."""
    fparams = fparams or FusionParams()
    pa, pc, ps = (maps[p] for p in PROJECTIONS)
    binary = fuse_projections(pa, pc, ps, fparams)
    if closing:
        binary = np.stack([morph_close(binary[c], fparams.closing_radius) for c in range(binary.shape[0])])
    return FusedPrediction(binary, v_pred(pa, pc, ps, fparams))


def fuse_and_classify(maps: dict, fparams: FusionParams | None = None,
                      cparams: ClassifierParams | None = None):
    fused = fuse(maps, fparams)
    return fused, classify(fused.vpred[0], fused.vpred[1], cparams)


# ---------------------------------------------------------------- tuning

DEFAULT_K_GRID = tuple(float(v) for v in np.round(np.arange(0.35, 0.9501, 0.03), 2))
DEFAULT_FLOOR_GRID = (0.7, 0.8, 0.9, 1.0, 1.1)
DEFAULT_ISCH_GRID = tuple(float(v) for v in np.round(np.arange(1.0, 1.801, 0.04), 2))
DEFAULT_HEM_GRID = tuple(float(v) for v in np.round(np.arange(1.2, 2.401, 0.04), 2))


def tune_fusion(val_set, grid=DEFAULT_K_GRID, closing_radius: int = 3) -> FusionParams:
    """Grid-search the three thresholds for the best mean patientwise DSC.

    ``val_set`` items are ``(maps, gt_labels, cls)`` with ``maps`` keyed by
    projection; healthy cases are skipped. Ties keep the lexicographically
    smallest (k_axial, k_coronal, k_sagittal).
    """
    cases = [(m, getattr(g, "labels", g), c) for m, g, c in val_set if c != "healthy"]
    if not cases:
        raise ValueError("tune_fusion needs at least one lesion case")
    grid = sorted(float(k) for k in grid)
    # per case, per projection, the thresholded mask for every grid value
    pre = []
    for maps, gt, cls in cases:
        ch = CHANNEL_OF[cls]
        truth = gt == (ISCHEMIC if cls == "ischemic" else HEMORRHAGIC)
        pre.append((truth, [[maps[p][ch] > k for k in grid] for p in PROJECTIONS]))
    best, best_score = None, -1.0
    for ia, ic, is_ in itertools.product(range(len(grid)), repeat=3):
        score = np.mean([dsc(m[0][ia] | m[1][ic] | m[2][is_], truth) for truth, m in pre])
        if score > best_score:
            best, best_score = (grid[ia], grid[ic], grid[is_]), score
    return FusionParams(*best, closing_radius=closing_radius)


def tune_classifier(tuning_set, floors=DEFAULT_FLOOR_GRID, isch_grid=DEFAULT_ISCH_GRID,
                    hem_grid=DEFAULT_HEM_GRID) -> ClassifierParams:
    """Grid-search classifier constants for the best three-way accuracy.

    ``tuning_set`` items are ``(vpred_isch, vpred_hem, true_class)``.
    """
    items = list(tuning_set)
    if not items:
        raise ValueError("tune_classifier needs a non-empty tuning set")
    best, best_acc = None, -1.0
    for floor in sorted(floors):
        means = [(floor_mean(vi, floor), floor_mean(vh, floor), t) for vi, vh, t in items]
        for ti in sorted(isch_grid):
            for th in sorted(hem_grid):
                params = ClassifierParams(floor, ti, th)
                acc = np.mean([decide(mi, mh, params).predicted_class == t for mi, mh, t in means])
                if acc > best_acc:
                    best, best_acc = params, acc
    return best
