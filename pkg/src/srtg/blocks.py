"""Residual blocks with optional gated recurrent units, and small networks.

Simple blocks run two 3x3x3 convolutions, bottleneck blocks run a 1x1x1
reduce / 3x3x3 / 1x1x1 expand triple (stride on the middle conv). Either kind
can swap full 3D convolutions for a (2+1)D factorization: a 1xkxk spatial
conv followed by a kx1x1 temporal conv with norm and activation in between.
A gated unit can be wired at six insertion points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from srtg import tensor as tt
from srtg.config import NetworkSpec
from srtg.gate import init_lstm_params, srtg_unit
from srtg.tensor import Tensor

__all__ = [
    "BlockSpecError",
    "BlockSpec",
    "SIMPLE_PLACEMENTS",
    "BOTTLENECK_PLACEMENTS",
    "build_block",
    "Network",
    "network_forward",
]

SIMPLE_PLACEMENTS = ("none", "start", "mid", "res", "final")
BOTTLENECK_PLACEMENTS = ("none", "start", "top", "mid", "end", "res", "final")
BOTTLENECK_EXPANSION = 4


class BlockSpecError(ValueError):
    """Invalid block construction descriptor."""


@dataclass
class BlockSpec:
    depth_kind: str  # simple | bottleneck
    conv_kind: str  # full_3d | two_plus_one_d
    placement: str
    in_channels: int
    out_channels: int
    stride: tuple[int, int, int] = (1, 1, 1)
    fusion_mode: str = "multiplicative"
    gate_active: bool = True

    def __post_init__(self):
        if self.depth_kind not in ("simple", "bottleneck"):
            raise BlockSpecError(f"unknown depth_kind {self.depth_kind!r}")
        if self.conv_kind not in ("full_3d", "two_plus_one_d"):
            raise BlockSpecError(f"unknown conv_kind {self.conv_kind!r}")
        allowed = SIMPLE_PLACEMENTS if self.depth_kind == "simple" else BOTTLENECK_PLACEMENTS
        if self.placement not in allowed:
            raise BlockSpecError(
                f"placement {self.placement!r} not valid for {self.depth_kind} blocks "
                f"(allowed: {', '.join(allowed)})"
            )
        if self.in_channels < 1 or self.out_channels < 1:
            raise BlockSpecError("channel counts must be positive")
        if self.depth_kind == "bottleneck" and self.out_channels % BOTTLENECK_EXPANSION:
            raise BlockSpecError(
                f"bottleneck out_channels must be divisible by {BOTTLENECK_EXPANSION}"
            )

    @property
    def mid_channels(self) -> int:
        return self.out_channels // BOTTLENECK_EXPANSION


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Conv3dLayer:
    def __init__(self, in_ch, out_ch, kernel, stride=(1, 1, 1), rng=None, bias=False):
        rng = rng or np.random.default_rng()
        kt, kh, kw = kernel
        fan_in = in_ch * kt * kh * kw
        std = np.sqrt(2.0 / fan_in)
        self.kernel = kernel
        self.stride = stride
        self.padding = (kt // 2, kh // 2, kw // 2)
        self.weight = Tensor(rng.standard_normal((out_ch, in_ch, kt, kh, kw)) * std,
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None

    def __call__(self, x):
        return tt.conv3d(x, self.weight, self.bias, self.stride, self.padding)

    def named_params(self, prefix):
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


class BatchNorm3dLayer:
    def __init__(self, channels):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, x, training):
        return tt.batch_norm(x, self.gamma, self.beta,
                             self.running_mean, self.running_var, training)

    def named_params(self, prefix):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def named_buffers(self, prefix):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var


class STConv:
    """One spatio-temporal conv unit: a full kxkxk conv, or the (2+1)D pair.

    1x1x1 convolutions are never factorized. The factorized pair keeps the
    intermediate width equal to out_ch and normalizes between the two convs.
    """

    def __init__(self, in_ch, out_ch, kernel, stride, conv_kind, rng):
        kt, kh, kw = kernel
        self.factorized = conv_kind == "two_plus_one_d" and (kt, kh, kw) != (1, 1, 1)
        if self.factorized:
            st, sh, sw = stride
            self.spatial = Conv3dLayer(in_ch, out_ch, (1, kh, kw), (1, sh, sw), rng)
            self.mid_bn = BatchNorm3dLayer(out_ch)
            self.temporal = Conv3dLayer(out_ch, out_ch, (kt, 1, 1), (st, 1, 1), rng)
        else:
            self.conv = Conv3dLayer(in_ch, out_ch, kernel, stride, rng)

    def __call__(self, x, training):
        if self.factorized:
            h = tt.relu(self.mid_bn(self.spatial(x), training))
            return self.temporal(h)
        return self.conv(x)

    def named_params(self, prefix):
        if self.factorized:
            yield from self.spatial.named_params(f"{prefix}.spatial")
            yield from self.mid_bn.named_params(f"{prefix}.mid_bn")
            yield from self.temporal.named_params(f"{prefix}.temporal")
        else:
            yield from self.conv.named_params(prefix)

    def named_buffers(self, prefix):
        if self.factorized:
            yield from self.mid_bn.named_buffers(f"{prefix}.mid_bn")


class SrtgUnit:
    """Owns the recurrent parameters for one insertion point."""

    def __init__(self, channels, gate_active, fusion_mode, rng):
        self.channels = channels
        self.gate_active = gate_active
        self.fusion_mode = fusion_mode
        self.params = init_lstm_params(channels, num_layers=2, rng=rng)

    def __call__(self, x, gate_log, layer_name):
        out, decisions = srtg_unit(x, self.params, self.gate_active, self.fusion_mode)
        gate_log.append((layer_name, decisions))
        return out

    def named_params(self, prefix):
        yield from self.params.named(f"{prefix}.lstm")


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


def _downsample(spec, rng):
    if spec.in_channels != spec.out_channels or spec.stride != (1, 1, 1):
        return (
            Conv3dLayer(spec.in_channels, spec.out_channels, (1, 1, 1), spec.stride, rng),
            BatchNorm3dLayer(spec.out_channels),
        )
    return None


class SimpleBlock:
    """conv3 -> bn -> relu -> conv3 -> bn, added to the (possibly projected)
    skip path; placements: start, mid, res, final."""

    def __init__(self, spec: BlockSpec, rng, name="block"):
        if spec.depth_kind != "simple":
            raise BlockSpecError("SimpleBlock requires a simple spec")
        self.spec = spec
        self.name = name
        self.conv1 = STConv(spec.in_channels, spec.out_channels, (3, 3, 3),
                            spec.stride, spec.conv_kind, rng)
        self.bn1 = BatchNorm3dLayer(spec.out_channels)
        self.conv2 = STConv(spec.out_channels, spec.out_channels, (3, 3, 3),
                            (1, 1, 1), spec.conv_kind, rng)
        self.bn2 = BatchNorm3dLayer(spec.out_channels)
        self.down = _downsample(spec, rng)
        self.srtg = None
        if spec.placement != "none":
            ch = spec.in_channels if spec.placement == "start" else spec.out_channels
            self.srtg = SrtgUnit(ch, spec.gate_active, spec.fusion_mode, rng)

    def forward(self, x, training, gate_log):
        p = self.spec.placement
        unit = f"{self.name}.srtg"
        if p == "start":
            x = self.srtg(x, gate_log, unit)
        h = tt.relu(self.bn1(self.conv1(x, training), training))
        if p == "mid":
            h = self.srtg(h, gate_log, unit)
        z = self.bn2(self.conv2(h, training), training)
        if self.down is not None:
            conv, bn = self.down
            skip = bn(conv(x), training)
        else:
            skip = x
        if p == "res":
            skip = self.srtg(skip, gate_log, unit)
        out = tt.relu(tt.add(z, skip))
        if p == "final":
            out = self.srtg(out, gate_log, unit)
        return out

    def _parts(self):
        parts = [("conv1", self.conv1), ("bn1", self.bn1),
                 ("conv2", self.conv2), ("bn2", self.bn2)]
        if self.down is not None:
            parts += [("down_conv", self.down[0]), ("down_bn", self.down[1])]
        if self.srtg is not None:
            parts.append(("srtg", self.srtg))
        return parts

    def named_params(self, prefix):
        for tag, part in self._parts():
            yield from part.named_params(f"{prefix}.{tag}")

    def named_buffers(self, prefix):
        for tag, part in self._parts():
            if hasattr(part, "named_buffers"):
                yield from part.named_buffers(f"{prefix}.{tag}")


class BottleneckBlock:
    """1x1x1 reduce -> 3x3x3 (strided) -> 1x1x1 expand, plus skip; all seven
    placements apply."""

    def __init__(self, spec: BlockSpec, rng, name="block"):
        if spec.depth_kind != "bottleneck":
            raise BlockSpecError("BottleneckBlock requires a bottleneck spec")
        self.spec = spec
        self.name = name
        mid = spec.mid_channels
        self.conv1 = Conv3dLayer(spec.in_channels, mid, (1, 1, 1), (1, 1, 1), rng)
        self.bn1 = BatchNorm3dLayer(mid)
        self.conv2 = STConv(mid, mid, (3, 3, 3), spec.stride, spec.conv_kind, rng)
        self.bn2 = BatchNorm3dLayer(mid)
        self.conv3 = Conv3dLayer(mid, spec.out_channels, (1, 1, 1), (1, 1, 1), rng)
        self.bn3 = BatchNorm3dLayer(spec.out_channels)
        self.down = _downsample(spec, rng)
        self.srtg = None
        if spec.placement != "none":
            ch = {
                "start": spec.in_channels,
                "top": mid,
                "mid": mid,
            }.get(spec.placement, spec.out_channels)
            self.srtg = SrtgUnit(ch, spec.gate_active, spec.fusion_mode, rng)

    def forward(self, x, training, gate_log):
        p = self.spec.placement
        unit = f"{self.name}.srtg"
        if p == "start":
            x = self.srtg(x, gate_log, unit)
        h = tt.relu(self.bn1(self.conv1(x), training))
        if p == "top":
            h = self.srtg(h, gate_log, unit)
        h = tt.relu(self.bn2(self.conv2(h, training), training))
        if p == "mid":
            h = self.srtg(h, gate_log, unit)
        z = self.bn3(self.conv3(h), training)
        if p == "end":
            z = self.srtg(z, gate_log, unit)
        if self.down is not None:
            conv, bn = self.down
            skip = bn(conv(x), training)
        else:
            skip = x
        if p == "res":
            skip = self.srtg(skip, gate_log, unit)
        out = tt.relu(tt.add(z, skip))
        if p == "final":
            out = self.srtg(out, gate_log, unit)
        return out

    def _parts(self):
        parts = [("conv1", self.conv1), ("bn1", self.bn1),
                 ("conv2", self.conv2), ("bn2", self.bn2),
                 ("conv3", self.conv3), ("bn3", self.bn3)]
        if self.down is not None:
            parts += [("down_conv", self.down[0]), ("down_bn", self.down[1])]
        if self.srtg is not None:
            parts.append(("srtg", self.srtg))
        return parts

    named_params = SimpleBlock.named_params
    named_buffers = SimpleBlock.named_buffers


def build_block(spec: BlockSpec, rng=None, name="block"):
    rng = rng or np.random.default_rng()
    if spec.depth_kind == "simple":
        return SimpleBlock(spec, rng, name)
    return BottleneckBlock(spec, rng, name)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


class Network:
    """Stem conv -> stages of residual blocks -> global average pool -> linear."""

    def __init__(self, spec: NetworkSpec, seed=0):
        self.spec = spec
        rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
        self.stem_conv = Conv3dLayer(spec.in_channels, spec.stem_channels,
                                     spec.stem_kernel, spec.stem_stride, rng)
        self.stem_bn = BatchNorm3dLayer(spec.stem_channels)
        expansion = BOTTLENECK_EXPANSION if spec.depth_kind == "bottleneck" else 1
        self.stages = []
        in_ch = spec.stem_channels
        for si, stage in enumerate(spec.stages):
            blocks = []
            out_ch = stage.channels * expansion
            for bi in range(stage.blocks):
                bspec = BlockSpec(
                    depth_kind=spec.depth_kind,
                    conv_kind=spec.conv_kind,
                    placement=spec.placement,
                    in_channels=in_ch,
                    out_channels=out_ch,
                    stride=stage.stride if bi == 0 else (1, 1, 1),
                    fusion_mode=spec.fusion_mode,
                    gate_active=spec.gate_active,
                )
                blocks.append(build_block(bspec, rng, name=f"stage{si + 1}.block{bi}"))
                in_ch = out_ch
            self.stages.append(blocks)
        bound = 1.0 / np.sqrt(in_ch)
        self.head_w = Tensor(rng.uniform(-bound, bound, size=(spec.num_classes, in_ch)),
                             requires_grad=True)
        self.head_b = Tensor(np.zeros(spec.num_classes), requires_grad=True)

    def forward(self, batch, training=False):
        """batch: (N, C, T, H, W) Tensor or array. Returns (logits, gate log),
        the log ordered by unit as encountered."""
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        if x.data.ndim != 5 or x.data.shape[1] != self.spec.in_channels:
            raise tt.ShapeError(
                f"network stem expects (N, {self.spec.in_channels}, T, H, W), "
                f"got {x.data.shape}"
            )
        gate_log = []
        h = tt.relu(self.stem_bn(self.stem_conv(x), training))
        if self.spec.stem_pool_kernel is not None:
            k = self.spec.stem_pool_kernel
            h = tt.max_pool3d(h, k, self.spec.stem_pool_stride,
                              tuple(e // 2 for e in k))
        for blocks in self.stages:
            for block in blocks:
                h = block.forward(h, training, gate_log)
        pooled = tt.global_avg_pool(h)
        logits = tt.affine(pooled, self.head_w, self.head_b)
        return logits, gate_log

    def named_params(self):
        yield from self.stem_conv.named_params("stem.conv")
        yield from self.stem_bn.named_params("stem.bn")
        for blocks in self.stages:
            for block in blocks:
                yield from block.named_params(block.name)
        yield "head.weight", self.head_w
        yield "head.bias", self.head_b

    def named_buffers(self):
        yield from self.stem_bn.named_buffers("stem.bn")
        for blocks in self.stages:
            for block in blocks:
                yield from block.named_buffers(block.name)

    def zero_grads(self):
        for _, p in self.named_params():
            p.zero_grad()

    def srtg_unit_names(self):
        names = []
        for blocks in self.stages:
            for block in blocks:
                if block.srtg is not None:
                    names.append(f"{block.name}.srtg")
        return names


def network_forward(net: Network, batch, training=False):
    return net.forward(batch, training)
