"""Command-line pipeline: phantom -> train -> predict -> fuse -> classify -> evaluate, plus stats and gradcheck.

Exit codes: 0 success, 1 a verification check failed, 2 bad usage or
arguments, 3 I/O or file-format failure, 4 numeric failure during training.
Every stage writes JSON to disk and prints a JSON document to stdout.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .fusion import PROJECTIONS, ClassifierParams, FusionParams, classify, fuse, predict_projections
from .metrics import classification_report, fisher_exact, patientwise_report
from .model import ModelConfig, SegModel
from .phantom import CLASSES, gen_dataset
from .train import TTA, Ensemble, SliceDataset, TrainConfig, TrainingError, save_run, train
from .volume import FormatError, Projection, VolumeGrid, read_smsk, read_svol, write_smsk, write_svol

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- configuration

@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig.tiny)
    train: TrainConfig = field(default_factory=TrainConfig)
    fusion: FusionParams = field(default_factory=FusionParams)
    classifier: ClassifierParams = field(default_factory=ClassifierParams)
    paths: dict = field(default_factory=lambda: {"data": "data", "models": "models", "out": "out"})
    seed: int = 0

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(),
                "fusion": self.fusion.to_dict(), "classifier": self.classifier.to_dict(),
                "paths": dict(self.paths), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        out = cls(
            model=ModelConfig.from_dict({**base.model.to_dict(), **d.get("model", {})}),
            train=TrainConfig.from_dict({**base.train.to_dict(), **d.get("train", {})}),
            fusion=_strict(FusionParams, {**base.fusion.to_dict(), **d.get("fusion", {})}),
            classifier=_strict(ClassifierParams, {**base.classifier.to_dict(), **d.get("classifier", {})}),
            paths={**base.paths, **d.get("paths", {})},
            seed=int(d.get("seed", base.seed)),
        )
        unknown_paths = set(out.paths) - set(base.paths)
        if unknown_paths:
            raise UsageError(f"unknown config keys: paths.{sorted(unknown_paths)}")
        return out


def _strict(cls, d):
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def load_config(path) -> RunConfig:
    if not path:
        return RunConfig()
    with open(path) as fh:
        return RunConfig.from_dict(json.load(fh))


def _override(obj, **kw):
    """Dataclass copy with every non-None keyword applied."""
    vals = {k: v for k, v in kw.items() if v is not None}
    return type(obj)(**{**asdict(obj), **vals}) if vals else obj


# ---------------------------------------------------------------- helpers

def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2) + "\n")


def _dump(path, obj) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def parse_mix(text: str) -> dict:
    """``ischemic=0.4,hemorrhagic=0.2,healthy=0.4`` or a JSON object."""
    text = text.strip()
    if text.startswith("{"):
        mix = json.loads(text)
    else:
        mix = {}
        for part in text.split(","):
            if "=" not in part:
                raise UsageError(f"bad mix entry {part!r}; expected class=fraction")
            k, v = part.split("=", 1)
            mix[k.strip()] = float(v)
    unknown = set(mix) - set(CLASSES)
    if unknown:
        raise UsageError(f"unknown classes in mix: {sorted(unknown)}")
    if abs(sum(mix.values()) - 1.0) > 1e-9 or any(v < 0 for v in mix.values()):
        raise UsageError(f"mix fractions must be non-negative and sum to 1 (got {sum(mix.values()):.6g})")
    return mix


def _triple(text, kind=float):
    parts = [kind(p) for p in str(text).replace("x", ",").split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise UsageError(f"expected one or three values, got {text!r}")
    return tuple(parts)


def _dataset_cases(data_dir, split=None):
    from .experiment import load_case
    manifest = _load_json(os.path.join(data_dir, "manifest.json"))
    entries = [c for c in manifest["cases"] if split in (None, "all") or c["split"] == split]
    return manifest, entries, [load_case(data_dir, c) for c in entries]


# ---------------------------------------------------------------- commands

def cmd_defaults(args) -> int:
    _emit(load_config(args.config).to_dict())
    return EXIT_OK


def cmd_phantom(args) -> int:
    cfg = load_config(args.config)
    mix = parse_mix(args.mix)
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    seed = cfg.seed if args.seed is None else args.seed
    out = args.out or cfg.paths["data"]
    manifest = gen_dataset(args.count, mix, seed, out, _triple(args.dims, int), _triple(args.spacing),
                           args.noise_sigma, test_fraction=args.test_fraction)
    for c in manifest["cases"]:
        sys.stderr.write(f"{c['case_id']}  {c['class']:<12} {c['split']:<6} seed={c['seed']}\n")
    _emit({"stage": "phantom", "out": out, "count": manifest["count"], "seed": seed,
           "classes": {k: sum(c["class"] == k for c in manifest["cases"]) for k in CLASSES}})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    tc = _override(cfg.train, steps=args.steps, lr0=args.lr0, batch_size=args.batch_size,
                   eval_every=args.eval_every, seed=args.seed)
    data = args.data or cfg.paths["data"]
    projection = Projection(args.projection)
    _, _, train_cases = _dataset_cases(data, "train")
    _, _, val_cases = _dataset_cases(data, "val")
    if not train_cases:
        raise UsageError(f"train: no training cases in {data}")
    extra = []
    if tc.extra_healthy:
        from .experiment import load_case
        manifest = gen_dataset(tc.extra_healthy, {"healthy": 1.0}, tc.seed + 1,
                               os.path.join(args.out, "extra_healthy"), train_cases[0].image.shape)
        extra = [load_case(os.path.join(args.out, "extra_healthy"), c) for c in manifest["cases"]]
    ds = SliceDataset(train_cases, projection, extra)
    model = SegModel(cfg.model, init_seed=tc.seed)
    t0 = time.perf_counter()
    result = train(tc, ds, val_cases, model,
                   progress=lambda c: sys.stderr.write(f"step {c.step} loss {c.loss:.5f} val_iou {c.val_iou:.4f}\n"))
    save_run(args.out, result, tc, extra={"projection": projection.value})
    sys.stderr.write(f"trained in {time.perf_counter() - t0:.1f} s\n")
    _emit({"stage": "train", "out": args.out, "projection": projection.value,
           "best_step": result.best.step, "best_val_iou": result.best.val_iou})
    return EXIT_OK


def _models_arg(specs) -> dict:
    out = {}
    for spec in specs:
        if "=" not in spec:
            raise UsageError(f"--models entries look like axial=DIR[,DIR...], got {spec!r}")
        name, dirs = spec.split("=", 1)
        try:
            p = Projection(name)
        except ValueError:
            raise UsageError(f"unknown projection {name!r}") from None
        out[p] = [SegModel.load(d) for d in dirs.split(",") if d]
    missing = [p.value for p in PROJECTIONS if p not in out]
    if missing:
        raise UsageError(f"predict: no models for projection(s) {missing}")
    return out


def cmd_predict(args) -> int:
    loaded = _models_arg(args.models)
    predictors = {}
    for p, ms in loaded.items():
        ens = Ensemble(ms)
        predictors[p] = [TTA(ens) if args.tta else ens]
    _, entries, cases = _dataset_cases(args.data, args.split)
    os.makedirs(args.out, exist_ok=True)
    index = []
    for entry, case in zip(entries, cases):
        maps = predict_projections(predictors, case.image)
        files = {}
        for p in PROJECTIONS:
            files[p.value] = {}
            for ch, name in enumerate(("ischemic", "hemorrhagic")):
                fname = f"{case.case_id}.{p.value}.{name}.svol"
                write_svol(os.path.join(args.out, fname),
                           VolumeGrid(np.clip(maps[p][ch], 0, 1), (1, 1, 1), "probability"))
                files[p.value][name] = fname
        index.append({"case_id": case.case_id, "dims": list(case.image.shape), "maps": files})
    _dump(os.path.join(args.out, "predictions.json"), {"data": args.data, "tta": args.tta, "cases": index})
    _emit({"stage": "predict", "out": args.out, "cases": len(index)})
    return EXIT_OK


def _read_maps(pred_dir, entry) -> dict:
    maps = {}
    for p in PROJECTIONS:
        chans = [read_svol(os.path.join(pred_dir, entry["maps"][p.value][n])).values
                 for n in ("ischemic", "hemorrhagic")]
        maps[p] = np.stack(chans)
    dims = {p.value: list(m.shape[1:]) for p, m in maps.items()}
    if len({tuple(d) for d in dims.values()}) != 1:
        raise UsageError(f"fuse: projection maps of {entry['case_id']} have mismatched dims {dims}")
    return maps


def cmd_fuse(args) -> int:
    cfg = load_config(args.config)
    fp = _override(cfg.fusion, k_axial=args.k_axial, k_coronal=args.k_coronal,
                   k_sagittal=args.k_sagittal, closing_radius=args.closing_radius)
    index = _load_json(os.path.join(args.pred, "predictions.json"))
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for entry in index["cases"]:
        fused = fuse(_read_maps(args.pred, entry), fp, closing=not args.no_closing)
        cid = entry["case_id"]
        write_smsk(os.path.join(args.out, f"{cid}.smsk"), fused.label_volume())
        vp = {}
        for ch, name in enumerate(("ischemic", "hemorrhagic")):
            vp[name] = f"{cid}.vpred.{name}.svol"
            write_svol(os.path.join(args.out, vp[name]), VolumeGrid(fused.vpred[ch], (1, 1, 1), "score"))
        rows.append({"case_id": cid, "mask": f"{cid}.smsk", "vpred": vp,
                     "voxels": {"ischemic": int(fused.binary[0].sum()), "hemorrhagic": int(fused.binary[1].sum())}})
    doc = {"fusion_params": fp.to_dict(), "closing": not args.no_closing, "data": index.get("data"), "cases": rows}
    _dump(os.path.join(args.out, "fused.json"), doc)
    _emit({"stage": "fuse", "out": args.out, **doc})
    return EXIT_OK


def cmd_classify(args) -> int:
    cfg = load_config(args.config)
    cp = _override(cfg.classifier, voxel_floor=args.voxel_floor,
                   ischemic_mean_thresh=args.ischemic_thresh, hemorrhagic_mean_thresh=args.hemorrhagic_thresh)
    fused = _load_json(os.path.join(args.fused, "fused.json"))
    rows = []
    for entry in fused["cases"]:
        vi = read_svol(os.path.join(args.fused, entry["vpred"]["ischemic"])).values
        vh = read_svol(os.path.join(args.fused, entry["vpred"]["hemorrhagic"])).values
        rows.append(classify(vi, vh, cp).to_dict(entry["case_id"]))
    doc = {"classifier_params": cp.to_dict(), "cases": rows}
    _dump(os.path.join(args.fused, "classes.json"), doc)
    _emit({"stage": "classify", **doc})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    out = {"stage": "evaluate"}
    if args.true_labels or args.pred_labels:
        if not (args.true_labels and args.pred_labels):
            raise UsageError("evaluate: --true-labels and --pred-labels go together")
        truth, pred = _load_json(args.true_labels), _load_json(args.pred_labels)
        if len(truth) != len(pred):
            raise UsageError(f"evaluate: label lists differ in length ({len(truth)} vs {len(pred)})")
        bad = sorted(set(truth + pred) - set(CLASSES))
        if bad:
            raise UsageError(f"evaluate: unknown class labels {bad}")
        out["classification"] = classification_report(truth, pred).to_dict()["classification"]
    if args.fused:
        fused = _load_json(os.path.join(args.fused, "fused.json"))
        data = args.data or fused.get("data")
        manifest = _load_json(os.path.join(data, "manifest.json"))
        by_id = {c["case_id"]: c for c in manifest["cases"]}
        rows = []
        for entry in fused["cases"]:
            gt_entry = by_id[entry["case_id"]]
            pred = read_smsk(os.path.join(args.fused, entry["mask"]))
            gt = read_smsk(os.path.join(data, gt_entry["mask"]))
            if pred.labels.shape != gt.labels.shape:
                raise UsageError(f"evaluate: {entry['case_id']} prediction dims {pred.labels.shape} "
                                 f"vs ground truth {gt.labels.shape}")
            rows.append((entry["case_id"], pred, gt, gt_entry["class"]))
        if any(r[3] != "healthy" for r in rows):
            report = patientwise_report(rows)
            out["segmentation"] = report.to_dict()
            sys.stderr.write(report.table() + "\n")
        classes = os.path.join(args.fused, "classes.json")
        if os.path.exists(classes) and "classification" not in out:
            pred_cls = {r["case_id"]: r["predicted_class"] for r in _load_json(classes)["cases"]}
            truth = [by_id[e["case_id"]]["class"] for e in fused["cases"]]
            pred = [pred_cls[e["case_id"]] for e in fused["cases"]]
            out["classification"] = classification_report(truth, pred).to_dict()["classification"]
    if len(out) == 1:
        raise UsageError("evaluate: give --fused DIR and/or --true-labels/--pred-labels")
    if args.out:
        _dump(args.out, out)
    _emit(out)
    return EXIT_OK


def cmd_stats(args) -> int:
    try:
        res = fisher_exact(args.a, args.b, args.n)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _emit(res.to_dict())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_gradcheck
    results = run_gradcheck(seed=args.seed)
    for r in results:
        sys.stderr.write(f"{r.name:<20} {r.max_rel_err:.3e}  {'ok' if r.passed else 'FAIL'}\n")
    _emit({"stage": "gradcheck", "tolerance": TOLERANCE,
           "results": [{"op": r.name, "max_rel_err": r.max_rel_err, "checked": r.checked,
                        "skipped_kinks": r.skipped, "passed": r.passed} for r in results]})
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="strokeseg", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="RunConfig JSON; flags override its values")
        p.set_defaults(func=fn)
        return p

    add("defaults", cmd_defaults, "print the full default configuration")

    p = add("phantom", cmd_phantom, "generate a synthetic dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--mix", default="ischemic=0.4,hemorrhagic=0.2,healthy=0.4")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--dims", default="32,32,32")
    p.add_argument("--spacing", default="2")
    p.add_argument("--noise-sigma", type=float, default=2.0)
    p.add_argument("--test-fraction", type=float, default=0.0)

    p = add("train", cmd_train, "train one model on one projection")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--projection", default="axial", choices=[q.value for q in PROJECTIONS])
    p.add_argument("--steps", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--seed", type=int)

    p = add("predict", cmd_predict, "per-projection probability volumes")
    p.add_argument("--data", required=True)
    p.add_argument("--models", nargs="+", required=True, metavar="PROJ=DIR[,DIR]")
    p.add_argument("--split", default="all")
    p.add_argument("--out", required=True)
    p.add_argument("--tta", action=argparse.BooleanOptionalAction, default=True)

    p = add("fuse", cmd_fuse, "threshold fusion, closing and V_pred scores")
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k-axial", type=float)
    p.add_argument("--k-coronal", type=float)
    p.add_argument("--k-sagittal", type=float)
    p.add_argument("--closing-radius", type=int)
    p.add_argument("--no-closing", action="store_true")

    p = add("classify", cmd_classify, "three-way patient classification from V_pred")
    p.add_argument("--fused", required=True)
    p.add_argument("--voxel-floor", type=float)
    p.add_argument("--ischemic-thresh", type=float)
    p.add_argument("--hemorrhagic-thresh", type=float)

    p = add("evaluate", cmd_evaluate, "DSC/IoU report and classification accuracy")
    p.add_argument("--fused")
    p.add_argument("--data")
    p.add_argument("--true-labels", help="JSON list of true class names")
    p.add_argument("--pred-labels", help="JSON list of predicted class names")
    p.add_argument("--out")

    p = add("stats", cmd_stats, "two-sided Fisher exact test on error counts")
    p.add_argument("--a", type=int, required=True, help="errors of rater A")
    p.add_argument("--b", type=int, required=True, help="errors of rater B")
    p.add_argument("--n", type=int, required=True, help="cases per rater")

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every op")
    p.add_argument("--seed", type=int, default=0)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse exits on --help and on bad flags
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    stage = args.command
    try:
        return args.func(args)
    except TrainingError as exc:
        sys.stderr.write(f"{stage}: numeric failure at {exc}\n")
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        sys.stderr.write(f"{stage}: I/O error: {exc}\n")
        return EXIT_IO
    except (UsageError, ValueError, KeyError, json.JSONDecodeError) as exc:
        sys.stderr.write(f"{stage}: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
