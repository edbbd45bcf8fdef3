"""End-to-end phantom experiment: data, per-projection training, ensembling, fusion, scoring.

Everything written under the output directory is a pure function of the
configuration, so two runs with the same seed give byte-identical files.
Wall-clock timings are returned to the caller but never written.
"""
from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
import multiprocessing as mp

import numpy as np

from .fusion import (CHANNEL_OF, PROJECTIONS, binary_to_labels, classify, fuse,
                     predict_projections, tune_classifier, tune_fusion)
from .metrics import classification_report, dsc, patientwise_report
from .model import ModelConfig, SegModel
from .phantom import gen_dataset
from .train import (TTA, Ensemble, SliceDataset, TrainConfig, VolumeCase, save_run,
                    select_best, train, validation_iou)
from .volume import HEMORRHAGIC, ISCHEMIC, Projection, hu_normalize, read_smsk, read_svol, window_scale

log = logging.getLogger(__name__)

_CLASS_LABEL = {"ischemic": ISCHEMIC, "hemorrhagic": HEMORRHAGIC}


def _default_train() -> TrainConfig:
    return TrainConfig(steps=2000, lr0=1e-3, eval_every=100)


@dataclass
class ExperimentConfig:
    n_cases: int = 60
    class_mix: dict = field(default_factory=lambda: {"ischemic": 0.4, "hemorrhagic": 0.2, "healthy": 0.4})
    seed: int = 2024
    dims: tuple = (32, 32, 32)
    spacing: tuple = (2.0, 2.0, 2.0)
    noise_sigma: float = 2.0
    test_fraction: float = 0.2
    model: ModelConfig = field(default_factory=ModelConfig.tiny)
    train: TrainConfig = field(default_factory=_default_train)
    axial_seeds: int = 6
    ensemble_size: int = 3
    other_seeds: int = 1
    tta: bool = True
    workers: int = 0  # 0: one per available core

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if not 1 <= self.ensemble_size <= self.axial_seeds:
            raise ValueError("ensemble_size must lie in [1, axial_seeds]")
        if self.other_seeds < 1:
            raise ValueError("other_seeds must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"], d["spacing"] = list(self.dims), list(self.spacing)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- data

def load_case(data_dir, entry: dict) -> VolumeCase:
    """Read one manifest entry and return windowed intensities plus labels."""
    raw = read_svol(os.path.join(data_dir, entry["volume"]))
    lab = read_smsk(os.path.join(data_dir, entry["mask"]))
    win = window_scale(hu_normalize(raw))
    return VolumeCase(entry["case_id"], win.values, lab.labels, entry["class"])


def load_splits(data_dir, manifest: dict) -> dict[str, list[VolumeCase]]:
    out: dict[str, list[VolumeCase]] = {"train": [], "val": [], "test": []}
    for entry in manifest["cases"]:
        out[entry["split"]].append(load_case(data_dir, entry))
    return out


# ---------------------------------------------------------------- training jobs

def job_seed(base: int, projection: Projection, replica: int) -> int:
    return int(np.random.SeedSequence([base, PROJECTIONS.index(projection), replica]).generate_state(1)[0])


def _train_job(args):
    data_dir, manifest, proj_name, seed, model_cfg, train_cfg, out_dir = args
    projection = Projection(proj_name)
    splits = load_splits(data_dir, manifest)
    ds = SliceDataset(splits["train"], projection)
    cfg = TrainConfig.from_dict({**train_cfg, "seed": seed})
    model = SegModel(ModelConfig.from_dict(model_cfg), init_seed=seed)
    t0 = time.perf_counter()
    result = train(cfg, ds, splits["val"], model)
    save_run(out_dir, result, cfg, extra={"projection": proj_name})
    return {"dir": out_dir, "projection": proj_name, "seed": seed,
            "best_step": result.best.step, "val_iou": result.best.val_iou,
            "seconds": time.perf_counter() - t0}


def _run_jobs(jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [_train_job(j) for j in jobs]
    # fresh interpreters so each worker starts with single-threaded BLAS
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = "1"
    with ProcessPoolExecutor(max_workers=workers, mp_context=mp.get_context("spawn")) as pool:
        return list(pool.map(_train_job, jobs))


# ---------------------------------------------------------------- scoring helpers

def _class_dsc(binary_for_class, case: VolumeCase) -> float:
    return dsc(binary_for_class, case.labels == _CLASS_LABEL[case.cls])


def _mean(xs):
    return float(np.mean(xs)) if xs else float("nan")


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def run_experiment(cfg: ExperimentConfig, out_dir) -> dict:
    """Run the whole experiment and write ``metrics.json``; returns metrics plus timings."""
    t_start = time.perf_counter()
    os.makedirs(out_dir, exist_ok=True)
    data_dir = os.path.join(out_dir, "data")
    manifest = gen_dataset(cfg.n_cases, cfg.class_mix, cfg.seed, data_dir, cfg.dims, cfg.spacing,
                           cfg.noise_sigma, test_fraction=cfg.test_fraction)
    _dump(os.path.join(out_dir, "experiment_config.json"), cfg.to_dict())
    splits = load_splits(data_dir, manifest)

    jobs = []
    for p in PROJECTIONS:
        for r in range(cfg.axial_seeds if p is Projection.AXIAL else cfg.other_seeds):
            s = job_seed(cfg.seed, p, r)
            jobs.append((data_dir, manifest, p.value, s, cfg.model.to_dict(), cfg.train.to_dict(),
                         os.path.join(out_dir, "models", p.value, f"seed_{r}")))
    workers = cfg.workers or (os.cpu_count() or 1)
    runs = _run_jobs(jobs, min(workers, len(jobs)))
    t_train = time.perf_counter() - t_start

    # reload from disk so scoring uses exactly the saved weights
    members: dict[Projection, list] = {}
    for p in PROJECTIONS:
        cand = [(r, SegModel.load(r["dir"])) for r in runs if r["projection"] == p.value]
        k = cfg.ensemble_size if p is Projection.AXIAL else len(cand)
        members[p] = select_best(cand, k, key=lambda c: c[0]["val_iou"])

    # ensemble check on the axial validation IoU (plain predictions, no TTA)
    axial_models = [m for _, m in members[Projection.AXIAL]]
    member_ious = [validation_iou(m, splits["val"], Projection.AXIAL) for m in axial_models]
    ens_iou = validation_iou(Ensemble(axial_models), splits["val"], Projection.AXIAL)

    predictors = {}
    for p in PROJECTIONS:
        ens = Ensemble([m for _, m in members[p]])
        predictors[p] = [TTA(ens) if cfg.tta else ens]

    def maps_for(cases):
        return [predict_projections(predictors, c.image) for c in cases]

    val_maps = maps_for(splits["val"])
    test_maps = maps_for(splits["test"])

    fparams = tune_fusion([(m, c.labels, c.cls) for m, c in zip(val_maps, splits["val"])])

    # fusion benefit on the validation set
    lesion_val = [(m, c) for m, c in zip(val_maps, splits["val"]) if c.cls != "healthy"]
    single = {p.value: _mean([_class_dsc(m[p][CHANNEL_OF[c.cls]] > 0.5, c) for m, c in lesion_val])
              for p in PROJECTIONS}
    pre = _mean([_class_dsc(fuse(m, fparams, closing=False).binary[CHANNEL_OF[c.cls]], c) for m, c in lesion_val])
    post = _mean([_class_dsc(fuse(m, fparams).binary[CHANNEL_OF[c.cls]], c) for m, c in lesion_val])

    # classifier constants from validation scores, accuracy on test
    val_fused = [fuse(m, fparams) for m in val_maps]
    cparams = tune_classifier([(f.vpred[0], f.vpred[1], c.cls) for f, c in zip(val_fused, splits["val"])])

    test_rows, truth, predicted, class_rows = [], [], [], []
    for m, c in zip(test_maps, splits["test"]):
        fused = fuse(m, fparams)
        res = classify(fused.vpred[0], fused.vpred[1], cparams)
        truth.append(c.cls)
        predicted.append(res.predicted_class)
        class_rows.append(res.to_dict(c.case_id))
        test_rows.append((c.case_id, binary_to_labels(fused.binary).labels, c.labels, c.cls))
    report = patientwise_report(test_rows)
    cls_report = classification_report(truth, predicted)

    metrics = {
        "seed": cfg.seed,
        "test": report.to_dict(),
        "test_classification": {**cls_report.to_dict()["classification"], "cases": class_rows},
        "validation": {
            "single_projection_dsc": single,
            "fused_dsc_pre_closing": pre,
            "fused_dsc_post_closing": post,
            "ensemble_iou": ens_iou,
            "member_ious": member_ious,
        },
        "fusion_params": fparams.to_dict(),
        "classifier_params": cparams.to_dict(),
        "models": [{k: r[k] for k in ("projection", "seed", "best_step", "val_iou")} for r in runs],
        "selected_axial": [r["seed"] for r, _ in members[Projection.AXIAL]],
    }
    _dump(os.path.join(out_dir, "metrics.json"), metrics)
    log.info("experiment done in %.1f s", time.perf_counter() - t_start)
    return {"metrics": metrics, "report": report,
            "timing": {"total_s": time.perf_counter() - t_start, "train_s": t_train,
                       "per_model_s": [r["seconds"] for r in runs]}}
