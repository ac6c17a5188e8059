"""The dual-path multi-scale fusion counting network.

A 13-layer VGG-style backbone taps feature maps at 1/2, 1/4, 1/8 and 1/16
resolution. Two structurally identical decoders fuse the taps through
concat -> 1x1 conv -> 3x3 conv -> 2x upsample blocks: the density path
regresses people-per-pixel, the attention path produces a head-region
probability map that gates the density features before the final 1x1
projection. Disabling the attention path reproduces the backbone+density
ablation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import (
    BatchNormState,
    Parameter,
    Tensor,
    batchnorm2d,
    concat_channels,
    conv2d,
    maxpool2x2,
    mul_broadcast_channel,
    relu,
    sigmoid,
    upsample2x,
)

# base channel plan: backbone blocks and decoder stages, scaled by the
# width multiplier at build time
FME_CHANNELS = (64, 128, 256, 512, 512)
FME_DEPTHS = (2, 2, 3, 3, 3)
T1_CHANNELS = 256
T2_CHANNELS = 128
HEAD_CHANNELS = (64, 64, 32)

INIT_STD = 0.01


@dataclass(frozen=True)
class ModelConfig:
    """Instantiation knobs for the network.

    ``width_multiplier`` scales every channel count (round half up, floor 1)
    so the full architecture runs at desk scale. ``amp_enabled=False* drops
    the attention path entirely.
    """

    width_multiplier: float = 1.0
    amp_enabled: bool = True
    upsample_mode: str = "nearest"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    init_seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if not (0.0 < self.width_multiplier <= 1.0):
            raise ValueError(f"width_multiplier must be in (0, 1], got {self.width_multiplier}")
        if self.upsample_mode != "nearest":
            raise ValueError(f"unsupported upsample mode {self.upsample_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    def scaled(self, channels: int) -> int:
        return max(1, int(channels * self.width_multiplier + 0.5))

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


@dataclass
class FeaturePyramid:
    """Backbone taps at 1/2, 1/4, 1/8 and 1/16 of the input resolution."""

    c22: Tensor
    c33: Tensor
    c43: Tensor
    c53: Tensor


@dataclass
class ModelOutput:
    """Forward results: density and attention at half input resolution.

    ``attention_logits`` carries the pre-sigmoid map for the fused
    cross-entropy loss; it is None when the attention path is disabled.
    """

    density: Tensor
    attention: Tensor
    refined_features: Tensor
    attention_logits: Tensor | None = None


class Conv2d:
    def __init__(self, prefix: str, cin: int, cout: int, k: int, rng, dtype,
                 bias: bool = False):
        w = rng.normal(0.0, INIT_STD, size=(cout, cin, k, k)).astype(dtype)
        self.weight = Parameter(f"{prefix}.weight", w)
        self.bias = Parameter(f"{prefix}.bias", np.zeros(cout, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]


class BatchNorm2d:
    def __init__(self, prefix: str, channels: int, dtype, eps: float, momentum: float):
        self.prefix = prefix
        self.gamma = Parameter(f"{prefix}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter(f"{prefix}.beta", np.zeros(channels, dtype=dtype))
        self.state = BatchNormState.create(channels, dtype)
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batchnorm2d(x, self.gamma, self.beta, self.state, training,
                           eps=self.eps, momentum=self.momentum)

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {
            f"{self.prefix}.running_mean": self.state.running_mean,
            f"{self.prefix}.running_var": self.state.running_var,
            f"{self.prefix}.num_batches": np.asarray(float(self.state.num_batches)),
        }


class ConvUnit:
    """conv -> BN -> ReLU, the repeating unit everywhere except output heads."""

    def __init__(self, prefix: str, index: int, cin: int, cout: int, k: int,
                 rng, cfg: ModelConfig):
        self.conv = Conv2d(f"{prefix}.conv{index}", cin, cout, k, rng, cfg.np_dtype)
        self.bn = BatchNorm2d(f"{prefix}.bn{index}", cout, cfg.np_dtype,
                              cfg.bn_eps, cfg.bn_momentum)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return relu(self.bn(self.conv(x), training))

    def parameters(self):
        return self.conv.parameters() + self.bn.parameters()

    def buffers(self):
        return self.bn.buffers()


class DecoderPath:
    """Two transfer blocks plus the head block of one decoder path.

    T1: concat(up2(c53), c43) -> 1x1 -> 3x3 -> up2
    T2: concat(., c33)        -> 1x1 -> 3x3 -> up2
    H:  concat(., c22)        -> 1x1 -> 3x3 -> 3x3
    followed by a bias-carrying 1x1x1 projection owned by the caller.
    """

    def __init__(self, prefix: str, tap_channels: tuple[int, int, int, int],
                 rng, cfg: ModelConfig):
        c22, c33, c43, c53 = tap_channels
        t1 = cfg.scaled(T1_CHANNELS)
        t2 = cfg.scaled(T2_CHANNELS)
        h1, h2, h3 = (cfg.scaled(c) for c in HEAD_CHANNELS)
        self.t1 = [
            ConvUnit(f"{prefix}.t1", 1, c53 + c43, t1, 1, rng, cfg),
            ConvUnit(f"{prefix}.t1", 2, t1, t1, 3, rng, cfg),
        ]
        self.t2 = [
            ConvUnit(f"{prefix}.t2", 1, t1 + c33, t2, 1, rng, cfg),
            ConvUnit(f"{prefix}.t2", 2, t2, t2, 3, rng, cfg),
        ]
        self.head = [
            ConvUnit(f"{prefix}.head", 1, t2 + c22, h1, 1, rng, cfg),
            ConvUnit(f"{prefix}.head", 2, h1, h2, 3, rng, cfg),
            ConvUnit(f"{prefix}.head", 3, h2, h3, 3, rng, cfg),
        ]
        self.out_channels = h3

    def __call__(self, pyr: FeaturePyramid, training: bool) -> Tensor:
        x = concat_channels(upsample2x(pyr.c53), pyr.c43)
        for unit in self.t1:
            x = unit(x, training)
        x = concat_channels(upsample2x(x), pyr.c33)
        for unit in self.t2:
            x = unit(x, training)
        x = concat_channels(upsample2x(x), pyr.c22)
        for unit in self.head:
            x = unit(x, training)
        return x

    def units(self):
        return self.t1 + self.t2 + self.head


class SFANet:
    """Backbone, decoders and output heads wired per the architecture."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.init_seed)

        self.fme_blocks: list[list[ConvUnit]] = []
        cin = 3
        for bi, (cout_base, depth) in enumerate(zip(FME_CHANNELS, FME_DEPTHS), start=1):
            cout = config.scaled(cout_base)
            block = []
            for ci in range(1, depth + 1):
                block.append(ConvUnit(f"fme.block{bi}", ci, cin, cout, 3, rng, config))
                cin = cout
            self.fme_blocks.append(block)

        taps = tuple(config.scaled(c) for c in (FME_CHANNELS[1], FME_CHANNELS[2],
                                                FME_CHANNELS[3], FME_CHANNELS[4]))
        self.dmp = DecoderPath("dmp", taps, rng, config)
        self.dmp_out = Conv2d("dmp.out", self.dmp.out_channels, 1, 1, rng,
                              config.np_dtype, bias=True)
        if config.amp_enabled:
            self.amp = DecoderPath("amp", taps, rng, config)
            self.amp_out = Conv2d("amp.out", self.amp.out_channels, 1, 1, rng,
                                  config.np_dtype, bias=True)
        else:
            self.amp = None
            self.amp_out = None

    # -- forward ---------------------------------------------------------

    def pyramid(self, images: Tensor, training: bool) -> FeaturePyramid:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected [N,3,H,W] images, got {images.shape}")
        h, w = images.shape[2], images.shape[3]
        if h % 16 or w % 16:
            raise ValueError(f"input H and W must be multiples of 16, got {h}x{w}")
        x = images
        taps = {}
        for bi, block in enumerate(self.fme_blocks, start=1):
            if bi > 1:
                x = maxpool2x2(x)
            for unit in block:
                x = unit(x, training)
            taps[bi] = x
        return FeaturePyramid(c22=taps[2], c33=taps[3], c43=taps[4], c53=taps[5])

    def forward(self, images: Tensor, training: bool = False) -> ModelOutput:
        pyr = self.pyramid(images, training)
        f_den = self.dmp(pyr, training)
        if self.amp is not None:
            f_att = self.amp(pyr, training)
            logits = self.amp_out(f_att)
            attention = sigmoid(logits)
            refined = mul_broadcast_channel(f_den, attention)
        else:
            logits = None
            n, _, hh, ww = f_den.shape
            attention = Tensor(np.ones((n, 1, hh, ww), dtype=f_den.dtype))
            refined = f_den
        density = self.dmp_out(refined)
        return ModelOutput(density=density, attention=attention,
                           refined_features=refined, attention_logits=logits)

    def __call__(self, images: Tensor, training: bool = False) -> ModelOutput:
        return self.forward(images, training)

    # -- parameter / state access -----------------------------------------

    def _units(self):
        for block in self.fme_blocks:
            yield from block
        yield from self.dmp.units()
        if self.amp is not None:
            yield from self.amp.units()

    def parameters(self) -> list[Parameter]:
        params = []
        for unit in self._units():
            params.extend(unit.parameters())
        params.extend(self.dmp_out.parameters())
        if self.amp_out is not None:
            params.extend(self.amp_out.parameters())
        return params

    def named_parameters(self) -> dict[str, Parameter]:
        named = {p.name: p for p in self.parameters()}
        if len(named) != len(self.parameters()):
            raise RuntimeError("duplicate parameter names")
        return named

    def named_buffers(self) -> dict[str, np.ndarray]:
        buffers = {}
        for unit in self._units():
            buffers.update(unit.buffers())
        return buffers

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    # -- persistence -------------------------------------------------------

    def state_records(self) -> dict[str, np.ndarray]:
        records = {name: p.data for name, p in self.named_parameters().items()}
        records.update(self.named_buffers())
        return records

    def load_state_records(self, records: dict[str, np.ndarray], strict: bool = True):
        """Install parameter/buffer values. Validates everything before
        touching the model, so a failed load leaves it unmodified."""
        own_params = self.named_parameters()
        own_sizes = {name: p.data.shape for name, p in own_params.items()}
        bn_layers = {}
        for unit in self._units():
            bn = unit.bn
            bn_layers[bn.prefix] = bn
            own_sizes[f"{bn.prefix}.running_mean"] = bn.state.running_mean.shape
            own_sizes[f"{bn.prefix}.running_var"] = bn.state.running_var.shape
            own_sizes[f"{bn.prefix}.num_batches"] = ()

        if strict:
            missing = sorted(set(own_sizes) - set(records))
            unexpected = sorted(set(records) - set(own_sizes))
            if missing or unexpected:
                raise ValueError(
                    f"strict load failed: missing {missing[:5]}, unexpected {unexpected[:5]}"
                )
        names = [n for n in records if n in own_sizes]
        for name in names:
            got = np.asarray(records[name]).shape
            want = own_sizes[name]
            if got != want:
                raise ValueError(f"shape mismatch for {name!r}: file {got} vs model {want}")

        dtype = self.config.np_dtype
        for name in names:
            value = np.asarray(records[name])
            if name in own_params:
                own_params[name].data = value.astype(dtype)
            elif name.endswith(".num_batches"):
                bn_layers[name.rsplit(".", 1)[0]].state.num_batches = int(round(float(value)))
            elif name.endswith(".running_mean"):
                bn_layers[name.rsplit(".", 1)[0]].state.running_mean = value.astype(dtype)
            elif name.endswith(".running_var"):
                bn_layers[name.rsplit(".", 1)[0]].state.running_var = value.astype(dtype)


def build_model(config: ModelConfig) -> SFANet:
    return SFANet(config)
