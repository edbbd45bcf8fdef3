"""A shortened version of the full phantom experiment, end to end.

Generates 20 phantoms, trains one model per projection for a few hundred steps,
fuses the three projections and reports held-out DSC and classification accuracy.
Takes about a minute on one core. The full setting is ``ExperimentConfig()``.

Run:  python demos/small_experiment.py [out_dir]
"""
import json
import sys
import tempfile

from strokeseg.experiment import ExperimentConfig, run_experiment
from strokeseg.train import TrainConfig


def main(out_dir):
    cfg = ExperimentConfig(n_cases=20, axial_seeds=1, ensemble_size=1,
                           train=TrainConfig(steps=300, lr0=1e-3, eval_every=100))
    res = run_experiment(cfg, out_dir)
    m = res["metrics"]
    print(res["report"].table())
    print("validation:", json.dumps(m["validation"], indent=1))
    print("fusion thresholds:", m["fusion_params"])
    print(f"test classification accuracy {m['test_classification']['accuracy']:.3f}")
    print(f"total {res['timing']['total_s']:.0f} s, outputs in {out_dir}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="strokeseg_"))
