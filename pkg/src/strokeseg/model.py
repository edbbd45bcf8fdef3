"""DPN-encoder U-Net with a slim 16-channel decoder and a hypercolumn head."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import RunningStats, Tensor


@dataclass
class ModelConfig:
    stage_blocks: list[int] = field(default_factory=lambda: [1, 1, 1, 1])
    stem_channels: int = 16
    residual_width: list[int] = field(default_factory=lambda: [8, 16, 24, 32])
    dense_growth: list[int] = field(default_factory=lambda: [4, 8, 12, 16])
    decoder_channels: int = 16
    use_se: bool = False
    se_reduction: int = 16
    head: str = "separable"  # or "pointwise"
    input_channels: int = 3
    output_channels: int = 2

    def __post_init__(self):
        n = len(self.stage_blocks)
        if n != 4 or len(self.residual_width) != n or len(self.dense_growth) != n:
            raise ValueError("stage_blocks, residual_width and dense_growth need one entry per "
                             "encoder stage (4)")
        if self.decoder_channels < 1:
            raise ValueError("decoder_channels must be >= 1")
        if self.output_channels != 2:
            raise ValueError("output_channels must be 2 (ischemic, hemorrhagic)")
        if self.head not in ("separable", "pointwise"):
            raise ValueError(f"unknown head {self.head!r}")
        if any(b < 1 for b in self.stage_blocks):
            raise ValueError("every stage needs at least one block")

    @classmethod
    def tiny(cls, **kw) -> ModelConfig:
        """Width-8 configuration used for end-to-end gradient checks."""
        base = dict(stem_channels=8, residual_width=[8, 8, 8, 8], dense_growth=[4, 4, 4, 4],
                    decoder_channels=8)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class Module:
    """Minimal container: parameters are Tensors with requires_grad, buffers are RunningStats."""

    training = True

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, (Module, Tensor, RunningStats)):
                yield name, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in self._children():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(prefix + name + "."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, RunningStats]:
        out: dict[str, RunningStats] = {}
        for name, value in self._children():
            if isinstance(value, RunningStats):
                out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value.named_buffers(prefix + name + "."))
        return out

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.named_parameters().values())

    def train(self, mode: bool = True):
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args):
        return self.forward(*args)


def _kaiming(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return Tensor(w, requires_grad=True)


class Conv2d(Module):
    def __init__(self, rng, cin, cout, k=3, stride=1, groups=1, bias=False):
        self.stride, self.padding, self.groups = stride, k // 2, groups
        fan_in = (cin // groups) * k * k
        self.weight = _kaiming(rng, (cout, cin // groups, k, k), fan_in)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running = RunningStats.fresh(channels)

    def forward(self, x):
        return T.batchnorm2d(x, self.gamma, self.beta, self.running, self.training)


class ConvBNReLU(Module):
    def __init__(self, rng, cin, cout, k=3, stride=1):
        self.conv = Conv2d(rng, cin, cout, k, stride)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))


class DPNBlock(Module):
    """Dual-path block: shared 1x1-3x3-1x1 path feeding a residual sum and a dense concat.

    Input channels are laid out as [residual (R) | dense (rest)]; output is
    [R | dense_in | g].
    """

    def __init__(self, rng, in_channels: int, residual_width: int, dense_growth: int):
        if in_channels < residual_width:
            raise ValueError(f"dpn_block: input has {in_channels} channels, fewer than R={residual_width}")
        self.r, self.g = residual_width, dense_growth
        self.in_channels = in_channels
        mid = residual_width + dense_growth
        self.reduce = ConvBNReLU(rng, in_channels, mid, k=1)
        self.spatial = ConvBNReLU(rng, mid, mid, k=3)
        self.expand = ConvBNReLU(rng, mid, residual_width + dense_growth, k=1)

    @property
    def out_channels(self) -> int:
        return self.in_channels + self.g

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"dpn_block: expected {self.in_channels} channels, got {x.shape[1]}")
        path = self.expand(self.spatial(self.reduce(x)))
        res = T.add(T.take_channels(x, 0, self.r), T.take_channels(path, 0, self.r))
        new_dense = T.take_channels(path, self.r, self.r + self.g)
        parts = [res]
        if self.in_channels > self.r:
            parts.append(T.take_channels(x, self.r, self.in_channels))
        parts.append(new_dense)
        return T.concat(parts, axis=1)


class SEBlock(Module):
    """Squeeze-and-excitation channel gate."""

    def __init__(self, rng, channels: int, reduction: int = 16):
        hidden = max(1, channels // reduction)
        self.fc1 = Conv2d(rng, channels, hidden, k=1, bias=True)
        self.fc2 = Conv2d(rng, hidden, channels, k=1, bias=True)

    def gate(self, x):
        return T.sigmoid(self.fc2(T.relu(self.fc1(T.global_avg_pool(x)))))

    def forward(self, x):
        return T.channel_mul(x, self.gate(x))


class EncoderStage(Module):
    """Max-pool, 1x1 entry projection to R+g channels, then dual-path blocks."""

    def __init__(self, rng, in_channels, blocks, residual_width, dense_growth, use_se, se_reduction):
        self.entry = ConvBNReLU(rng, in_channels, residual_width + dense_growth, k=1)
        ch = residual_width + dense_growth
        self.blocks = []
        for _ in range(blocks):
            blk = DPNBlock(rng, ch, residual_width, dense_growth)
            self.blocks.append(blk)
            ch = blk.out_channels
        self.out_channels = ch
        self.se = SEBlock(rng, ch, se_reduction) if use_se else None

    def forward(self, x):
        x = self.entry(T.maxpool2d(x, 2))
        for blk in self.blocks:
            x = blk(x)
        if self.se is not None:
            x = self.se(x)
        return x


class DecoderStage(Module):
    """Skip bottleneck (3x3 conv-BN-ReLU), add upsampled decoder features, 3x3 conv-BN-ReLU."""

    def __init__(self, rng, skip_channels: int, channels: int = 16):
        self.bottleneck = ConvBNReLU(rng, skip_channels, channels, k=3)
        self.conv = ConvBNReLU(rng, channels, channels, k=3)
        self.channels = channels

    def forward(self, d, skip):
        up = T.upsample(d, 2, "nearest")
        if up.shape[2:] != skip.shape[2:]:
            raise ValueError(f"decoder_stage: upsampled {list(up.shape)} does not match skip {list(skip.shape)}")
        if up.shape[1] != self.channels:
            raise ValueError(f"decoder_stage: decoder input has {d.shape[1]} channels, "
                             f"expected {self.channels}")
        return self.conv(T.add(self.bottleneck(skip), up))


class HypercolumnHead(Module):
    """Upsample every decoder output to full size, stack, and map to two logit channels."""

    def __init__(self, rng, stages: int, channels: int, out_channels: int = 2, mode: str = "separable"):
        total = stages * channels
        self.mode = mode
        self.depthwise = Conv2d(rng, total, total, k=3, groups=total) if mode == "separable" else None
        self.pointwise = Conv2d(rng, total, out_channels, k=1, bias=True)

    def hypercolumn(self, outputs):
        n, _, h, w = outputs[0].shape
        cols = []
        for o in outputs:
            if o.shape[0] != n:
                raise ValueError("hypercolumn_head: decoder outputs disagree on batch size")
            f = h // o.shape[2]
            if f * o.shape[2] != h or f * o.shape[3] != w:
                raise ValueError(f"hypercolumn_head: {list(o.shape)} does not divide {h}x{w}")
            cols.append(T.upsample(o, f, "nearest"))
        return T.concat(cols, axis=1)

    def forward(self, outputs):
        # callers pass outputs ordered from full resolution downwards
        x = self.hypercolumn(outputs)
        if self.depthwise is not None:
            x = self.depthwise(x)
        return self.pointwise(x)


class SegModel(Module):
    """Full segmentation network; ``forward`` returns per-class sigmoid probabilities."""

    def __init__(self, config: ModelConfig | None = None, init_seed: int = 0):
        self.config = config = config or ModelConfig()
        self.init_seed = init_seed
        rng = np.random.default_rng(init_seed)
        self.stem = ConvBNReLU(rng, config.input_channels, config.stem_channels, k=3)
        self.stages = []
        ch = config.stem_channels
        skip_channels = [ch]
        for i in range(4):
            st = EncoderStage(rng, ch, config.stage_blocks[i], config.residual_width[i],
                              config.dense_growth[i], config.use_se, config.se_reduction)
            self.stages.append(st)
            ch = st.out_channels
            skip_channels.append(ch)
        dc = config.decoder_channels
        self.center = ConvBNReLU(rng, ch, dc, k=3)
        self.decoder = [DecoderStage(rng, sc, dc) for sc in reversed(skip_channels)]
        self.head = HypercolumnHead(rng, len(self.decoder), dc, config.output_channels, config.head)

    def encoder_modules(self):
        return [self.stem, *self.stages]

    def decoder_modules(self):
        return [self.center, *self.decoder, self.head]

    def logits(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if c != 1:
            raise ValueError(f"forward: expected single-channel slices, got {c} channels")
        if h % 32 or w % 32:
            ph, pw = (-h) % 32, (-w) % 32
            raise ValueError(f"forward: spatial size {h}x{w} must be divisible by 32 "
                             f"(pad by {ph} rows and {pw} columns)")
        x = T.concat([x] * self.config.input_channels, axis=1)
        skips = [self.stem(x)]
        for st in self.stages:
            skips.append(st(skips[-1]))
        d = self.center(T.maxpool2d(skips[-1], 2))
        outs = []
        for stage, skip in zip(self.decoder, reversed(skips)):
            d = stage(d, skip)
            outs.append(d)
        return self.head(outs[::-1])

    def forward(self, x: Tensor) -> Tensor:
        return T.sigmoid(self.logits(x))

    def predict(self, slices: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """Eval-mode probabilities for an [N,1,H,W] (or [N,H,W]) array, no graph kept."""
        arr = np.asarray(slices, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[:, None]
        was_training = self.training
        self.eval()
        try:
            outs = []
            with T.no_grad():
                for i in range(0, arr.shape[0], batch_size):
                    outs.append(self.forward(Tensor(arr[i:i + batch_size])).data)
        finally:
            self.train(was_training)
        return np.concatenate(outs, axis=0).astype(np.float32)

    __call__ = predict

    # ---- persistence

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.named_parameters().items()}
        for k, b in self.named_buffers().items():
            out[k + ".mean"] = b.mean.copy()
            out[k + ".var"] = b.var.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        expected = set(params) | {k + s for k in buffers for s in (".mean", ".var")}
        if set(state) != expected:
            missing, extra = expected - set(state), set(state) - expected
            raise ValueError(f"state mismatch; missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for k, p in params.items():
            if state[k].shape != p.data.shape:
                raise ValueError(f"{k}: shape {state[k].shape} vs {p.data.shape}")
            p.data[...] = state[k]
        for k, b in buffers.items():
            b.mean[...] = state[k + ".mean"]
            b.var[...] = state[k + ".var"]

    def save(self, directory, step: int = 0, state: T.OptimState | None = None, extra=None) -> None:
        T.save_checkpoint(directory, self.state_dict(), step=step, state=state, extra=extra)
        with open(os.path.join(directory, "config.json"), "w") as fh:
            json.dump({"model": self.config.to_dict(), "init_seed": self.init_seed}, fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, directory) -> SegModel:
        with open(os.path.join(directory, "config.json")) as fh:
            meta = json.load(fh)
        model = cls(ModelConfig.from_dict(meta["model"]), meta.get("init_seed", 0))
        arrays, _, _, _ = T.load_checkpoint(directory)
        model.load_state_dict(arrays)
        return model
