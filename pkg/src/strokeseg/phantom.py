"""Deterministic synthetic head-CT phantoms with ischemic or hemorrhagic lesions."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .volume import (HEMORRHAGIC, ISCHEMIC, LabelVolume, VolumeGrid, write_smsk, write_svol)

CLASSES = ("healthy", "ischemic", "hemorrhagic")
CLASS_LABEL = {"healthy": 0, "ischemic": ISCHEMIC, "hemorrhagic": HEMORRHAGIC}

AIR_HU = -1000.0
SKULL_HU = 1000.0
BRAIN_HU = 33.0
RESCALE_SLOPE = 1.0
RESCALE_INTERCEPT = -1024.0


class PhantomError(RuntimeError):
    pass


@dataclass
class PhantomSpec:
    cls: str = "healthy"
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    lesion_count: int | None = None  # None: drawn from {1, 2}
    noise_sigma: float = 2.0

    def __post_init__(self):
        if self.cls not in CLASSES:
            raise ValueError(f"unknown phantom class {self.cls!r}")
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.dims) != 3 or min(self.dims) < 16:
            raise ValueError(f"dims must be three sizes >= 16, got {self.dims}")
        if self.dims[1] % 32 or self.dims[2] % 32:
            raise ValueError(f"in-plane dims must be divisible by 32, got {self.dims}")
        if self.lesion_count is not None and self.lesion_count not in (1, 2):
            raise ValueError("lesion_count must be 1 or 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def _ellipsoid(shape, center, semi):
    zz, yy, xx = np.ogrid[tuple(slice(0, n) for n in shape)]
    return (((zz - center[0]) / semi[0]) ** 2 + ((yy - center[1]) / semi[1]) ** 2
            + ((xx - center[2]) / semi[2]) ** 2) <= 1.0


def _place_lesion(rng, brain_core, dims, max_tries=200):
    lo = 0.10 * min(dims)
    hi = 0.20 * min(dims)
    candidates = np.argwhere(brain_core)
    for _ in range(max_tries):
        semi = rng.uniform(lo, hi, size=3)
        center = candidates[rng.integers(len(candidates))] + rng.uniform(-0.5, 0.5, size=3)
        mask = _ellipsoid(dims, center, semi)
        if mask.any() and not np.any(mask & ~brain_core):
            return mask
    raise PhantomError(f"could not place a lesion inside the brain after {max_tries} tries")


def gen_phantom(spec: PhantomSpec) -> tuple[VolumeGrid, LabelVolume]:
    """Return (HU volume, label volume) for ``spec``; a pure function of the spec."""
    rng = np.random.default_rng(spec.seed)
    dims = spec.dims
    c = np.array(dims, dtype=float) / 2 - 0.5
    head_semi = np.array(dims) * rng.uniform([0.40, 0.42, 0.38], [0.44, 0.46, 0.42])
    skull_t = max(1.5, 0.05 * min(dims))
    head = _ellipsoid(dims, c, head_semi)
    brain = _ellipsoid(dims, c, head_semi - skull_t)

    hu = np.full(dims, AIR_HU)
    hu[head] = SKULL_HU
    texture = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=min(dims) / 10)
    texture *= 2.0 / (texture.std() + 1e-12)
    hu[brain] = BRAIN_HU + texture[brain]

    labels = np.zeros(dims, dtype=np.uint8)
    if spec.cls != "healthy":
        count = spec.lesion_count or int(rng.integers(1, 3))
        core = ndimage.binary_erosion(brain, iterations=2)
        for _ in range(count):
            mask = _place_lesion(rng, core, dims)
            if spec.cls == "hemorrhagic":
                hu[mask] = rng.uniform(60.0, 80.0)
            else:
                # subtle hypodensity with a soft edge, confined to the brain
                contrast = rng.uniform(-14.0, -10.0)
                soft = ndimage.gaussian_filter(mask.astype(float), sigma=1.0)
                hu[brain] += contrast * soft[brain]
            labels[mask] = CLASS_LABEL[spec.cls]

    hu[brain] += rng.normal(0.0, spec.noise_sigma, size=int(brain.sum())) if spec.noise_sigma else 0.0
    return (VolumeGrid(hu.astype(np.float32), spec.spacing, "hu"),
            LabelVolume(labels, spec.spacing))


def hu_to_raw(vol: VolumeGrid) -> VolumeGrid:
    """Encode a HU volume as stored scanner values with the standard -1024 intercept."""
    raw = (vol.values.astype(np.float64) - RESCALE_INTERCEPT) / RESCALE_SLOPE
    return VolumeGrid(raw.astype(np.float32), vol.spacing, "raw", RESCALE_SLOPE, RESCALE_INTERCEPT)


# ---------------------------------------------------------------- datasets

def largest_remainder(n: int, fractions) -> list[int]:
    quotas = [n * f for f in fractions]
    counts = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _normalize_mix(class_mix) -> dict[str, float]:
    mix = dict(class_mix)
    unknown = set(mix) - set(CLASSES)
    if unknown:
        raise ValueError(f"unknown classes in mix: {sorted(unknown)}")
    if any(v < 0 for v in mix.values()) or abs(sum(mix.values()) - 1.0) > 1e-9:
        raise ValueError(f"class mix fractions must be non-negative and sum to 1, got {mix}")
    return {c: float(mix.get(c, 0.0)) for c in ("ischemic", "hemorrhagic", "healthy")}


def plan_dataset(n: int, class_mix, seed: int, val_fraction: float = 0.1,
                 test_fraction: float = 0.0) -> list[dict]:
    """Case list (class, seed, split) for a dataset; val and test splits are stratified per class."""
    if n < 1:
        raise ValueError("dataset needs at least one case")
    if val_fraction < 0 or test_fraction < 0 or val_fraction + test_fraction >= 1:
        raise ValueError("val_fraction and test_fraction must be >= 0 and sum below 1")
    mix = _normalize_mix(class_mix)
    counts = largest_remainder(n, list(mix.values()))
    classes = [c for c, k in zip(mix, counts) for _ in range(k)]
    seeds = np.random.SeedSequence(seed).generate_state(n).tolist()
    rng = np.random.default_rng([seed, 1])
    n_val = largest_remainder(int(round(n * val_fraction)), [k / n for k in counts])
    n_test = largest_remainder(int(round(n * test_fraction)), [k / n for k in counts])
    split = ["train"] * n
    start = 0
    for k, v, t in zip(counts, n_val, n_test):
        perm = rng.permutation(k)
        for j in perm[:v]:
            split[start + int(j)] = "val"
        for j in perm[v:v + t]:
            split[start + int(j)] = "test"
        start += k
    return [{"case_id": f"case_{i:03d}", "class": classes[i], "seed": int(seeds[i]), "split": split[i]}
            for i in range(n)]


def gen_dataset(n: int, class_mix, seed: int, out_dir, dims=(64, 64, 64),
                spacing=(1.0, 1.0, 1.0), noise_sigma: float = 2.0, test_fraction: float = 0.0) -> dict:
    """Write SVOL/SMSK pairs plus ``manifest.json`` and return the manifest."""
    cases = plan_dataset(n, class_mix, seed, test_fraction=test_fraction)
    os.makedirs(out_dir, exist_ok=True)
    for case in cases:
        spec = PhantomSpec(case["class"], tuple(dims), tuple(spacing), case["seed"], None, noise_sigma)
        vol, lab = gen_phantom(spec)
        case["volume"] = case["case_id"] + ".svol"
        case["mask"] = case["case_id"] + ".smsk"
        write_svol(os.path.join(out_dir, case["volume"]), hu_to_raw(vol))
        write_smsk(os.path.join(out_dir, case["mask"]), lab)
    manifest = {
        "seed": seed, "count": n, "class_mix": _normalize_mix(class_mix),
        "dims": list(dims), "spacing_mm": list(spacing), "noise_sigma": noise_sigma,
        "test_fraction": test_fraction, "cases": cases,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest


def regenerate(manifest: dict, out_dir) -> dict:
    """Rebuild a dataset from its manifest alone."""
    return gen_dataset(manifest["count"], manifest["class_mix"], manifest["seed"], out_dir,
                       tuple(manifest["dims"]), tuple(manifest["spacing_mm"]), manifest["noise_sigma"],
                       manifest.get("test_fraction", 0.0))


def spec_dict(spec: PhantomSpec) -> dict:
    return asdict(spec)
