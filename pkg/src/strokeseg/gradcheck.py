"""Finite-difference gradient checks for every differentiable op and the composed blocks.

Each check builds a scalar ``sum(f(inputs) * R)`` for a fixed random ``R``
in 64-bit, compares the analytic gradient of every input against central
differences on a sample of entries, and reports

    max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-12)

per input; the op's score is the worst input. Entries whose one-sided
slopes disagree sit on a kink (ReLU at zero, a max-pool switch) within the
step and are replaced by other entries; the number skipped is reported.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import DecoderStage, DPNBlock, ModelConfig, SEBlock, SegModel
from .tensor import Tensor

TOLERANCE = 1e-5


@dataclass
class GradResult:
    name: str
    max_rel_err: float
    checked: int
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


def _rel_err(a: np.ndarray, n: np.ndarray, scale: float) -> float:
    denom = max(scale, float(np.abs(n).max(initial=0.0)), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / denom)


def check(name: str, fn, inputs: dict[str, Tensor], rng: np.random.Generator,
          max_entries: int = 16, h: float = 1e-6) -> GradResult:
    """Compare analytic and central-difference gradients of ``fn(**inputs)``."""
    out = fn(**inputs)
    proj = None
    if out.data.size != 1:
        proj = Tensor(rng.standard_normal(out.shape))

    def scalar():
        y = fn(**inputs)
        return y if proj is None else T.tensor_sum(T.mul(y, proj))

    for t in inputs.values():
        t.zero_grad()
    loss = scalar()
    loss.backward()
    worst, checked, skipped = 0.0, 0, 0
    with T.no_grad():
        f0 = float(scalar().data)
        for key, t in inputs.items():
            if not t.requires_grad:
                continue
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            scale = float(np.abs(analytic).max(initial=0.0))
            flat = t.data.reshape(-1)
            a, num = [], []
            for i in rng.permutation(flat.size):
                if len(a) == max_entries:
                    break
                orig = flat[i]
                flat[i] = orig + h
                fp = float(scalar().data)
                flat[i] = orig - h
                fm = float(scalar().data)
                flat[i] = orig
                right, left = (fp - f0) / h, (f0 - fm) / h
                if abs(right - left) > 1e-3 * max(abs(right), abs(left), scale, 1e-12):
                    skipped += 1
                    continue
                a.append(analytic.reshape(-1)[i])
                num.append((fp - fm) / (2 * h))
            worst = max(worst, _rel_err(np.array(a), np.array(num), scale))
            checked += len(a)
    return GradResult(name, worst, checked, skipped)


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap + x, x)


def _distinct(rng, shape):
    # well-separated values so max-pool routing is stable under the step
    return rng.permutation(np.prod(shape)).reshape(shape) * 0.01 + rng.uniform(-0.001, 0.001, shape)


def _module_case(module, *args):
    params = module.named_parameters()
    inputs = {f"x{i}": a for i, a in enumerate(args)}
    inputs.update({f"p:{k}": v for k, v in params.items()})
    return lambda **kw: module(*[kw[f"x{i}"] for i in range(len(args))]), inputs


def cases(rng: np.random.Generator):
    """(name, fn, inputs, max_entries, step) for every checked op and block."""
    P = lambda a: Tensor(a, requires_grad=True)  # noqa: E731
    n = rng.standard_normal
    out = [
        ("add", lambda a, b: T.add(a, b), {"a": P(n((2, 3))), "b": P(n((2, 3)))}, 16, 1e-6),
        ("mul", lambda a, b: T.mul(a, b), {"a": P(n((2, 3))), "b": P(n((2, 3)))}, 16, 1e-6),
        ("scale", lambda a: T.scale(a, -1.7), {"a": P(n((3, 4)))}, 16, 1e-6),
        ("sum", lambda a: T.tensor_sum(a), {"a": P(n((3, 4)))}, 16, 1e-6),
        ("mean", lambda a: T.tensor_mean(a), {"a": P(n((3, 4)))}, 16, 1e-6),
        ("relu", lambda a: T.relu(a), {"a": P(_away_from_zero(rng, (3, 5)))}, 16, 1e-6),
        ("sigmoid", lambda a: T.sigmoid(a), {"a": P(n((3, 5)) * 4)}, 16, 1e-6),
        ("channel_mul", lambda x, g: T.channel_mul(x, g),
         {"x": P(n((2, 3, 4, 4))), "g": P(n((2, 3, 1, 1)))}, 16, 1e-6),
        ("concat", lambda a, b: T.concat([a, b], 1),
         {"a": P(n((2, 2, 3, 3))), "b": P(n((2, 3, 3, 3)))}, 16, 1e-6),
        ("take_channels", lambda a: T.take_channels(a, 1, 3), {"a": P(n((2, 4, 3, 3)))}, 16, 1e-6),
        ("maxpool2d", lambda a: T.maxpool2d(a, 2), {"a": P(_distinct(rng, (2, 2, 4, 4)))}, 16, 1e-6),
        ("global_avg_pool", lambda a: T.global_avg_pool(a), {"a": P(n((2, 3, 4, 4)))}, 16, 1e-6),
        ("upsample_nearest", lambda a: T.upsample(a, 2, "nearest"), {"a": P(n((1, 2, 3, 3)))}, 16, 1e-6),
        ("upsample_bilinear", lambda a: T.upsample(a, 2, "bilinear"), {"a": P(n((1, 2, 3, 3)))}, 16, 1e-6),
        ("conv2d", lambda x, w, b: T.conv2d(x, w, b, 1, 1),
         {"x": P(n((2, 3, 6, 6))), "w": P(n((4, 3, 3, 3))), "b": P(n(4))}, 16, 1e-6),
        ("conv2d_stride2", lambda x, w: T.conv2d(x, w, None, 2, 1),
         {"x": P(n((2, 3, 6, 6))), "w": P(n((4, 3, 3, 3)))}, 16, 1e-6),
        ("conv2d_1x1", lambda x, w, b: T.conv2d(x, w, b),
         {"x": P(n((2, 3, 4, 4))), "w": P(n((5, 3, 1, 1))), "b": P(n(5))}, 16, 1e-6),
        ("conv2d_grouped", lambda x, w: T.conv2d(x, w, None, 1, 1, groups=2),
         {"x": P(n((2, 4, 5, 5))), "w": P(n((6, 2, 3, 3)))}, 16, 1e-6),
        ("conv2d_depthwise", lambda x, w, b: T.conv2d(x, w, b, 1, 1, groups=3),
         {"x": P(n((2, 3, 5, 5))), "w": P(n((3, 1, 3, 3))), "b": P(n(3))}, 16, 1e-6),
        ("batchnorm2d", lambda x, g, b: T.batchnorm2d(x, g, b, T.RunningStats.fresh(3), True),
         {"x": P(n((2, 3, 4, 4))), "g": P(n(3)), "b": P(n(3))}, 16, 1e-6),
        ("focal_loss", lambda z: T.focal_loss(z, target), {"z": P(n((2, 2, 4, 4)) * 2)}, 16, 1e-6),
    ]
    target = (rng.random((2, 2, 4, 4)) < 0.3).astype(np.float64)

    blk = DPNBlock(rng, 12, 8, 4)
    fn, inp = _module_case(blk, P(n((2, 12, 6, 6))))
    out.append(("dpn_block", fn, inp, 6, 1e-6))
    se = SEBlock(rng, 16, 4)
    fn, inp = _module_case(se, P(n((2, 16, 4, 4))))
    out.append(("se_block", fn, inp, 8, 1e-6))
    dec = DecoderStage(rng, 6, 8)
    fn, inp = _module_case(dec, P(n((2, 8, 4, 4))), P(n((2, 6, 8, 8))))
    out.append(("decoder_stage", fn, inp, 6, 1e-6))
    model = SegModel(ModelConfig.tiny(), init_seed=int(rng.integers(1 << 31)))
    fn, inp = _module_case(model, P(rng.random((2, 1, 32, 32))))
    # ~10^5 ReLU units: a smaller step keeps kink crossings out of the differences
    out.append(("tiny_model_32x32", lambda **kw: model.logits(kw["x0"]), inp, 2, 1e-8))
    return out


def run_gradcheck(seed: int = 0, only=None) -> list[GradResult]:
    """Run every check in 64-bit and return one result per op or block."""
    results = []
    with T.float64_mode():
        rng = np.random.default_rng(seed)
        for name, fn, inputs, k, h in cases(rng):
            if only and name not in only:
                continue
            results.append(check(name, fn, inputs, rng, max_entries=k, h=h))
    return results
