"""Contrastive iterative refinement with a convolutional GRU.

Two depth estimates, their uncertainty maps and their absolute difference
are projected to features, concatenated with an image context feature and
fed to a ConvGRU whose hidden state is decoded into additive depth updates
for both estimates. All convolutions are separable 5x5.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .losses import complementary_map
from .tensor import SepConvWeights, Tensor

N_REFINE_MAPS = 5  # d1, d2, u1, u2, |d1 - d2|
MIN_DEPTH = 1e-3


@dataclass
class RefineConfig:
    proj_channels: int = 16
    context_channels: int = 16
    hidden_channels: int = 32
    t_max: int = 3
    min_depth: float = MIN_DEPTH

    def __post_init__(self):
        for name in ("proj_channels", "context_channels", "hidden_channels", "t_max"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
            setattr(self, name, int(getattr(self, name)))

    @property
    def input_channels(self) -> int:
        return self.proj_channels + self.context_channels

    @property
    def gate_in_channels(self) -> int:
        return self.hidden_channels + self.input_channels


@dataclass
class GruWeights:
    proj1: SepConvWeights
    proj2: SepConvWeights
    w_z: SepConvWeights
    w_r: SepConvWeights
    w_h: SepConvWeights
    head1: SepConvWeights
    head2: SepConvWeights
    # 1x1 projection applied before tanh when the head features do not have
    # hidden_channels channels
    init_weight: Tensor | None = None
    init_bias: Tensor | None = None

    CONVS = ("proj1", "proj2", "w_z", "w_r", "w_h", "head1", "head2")

    @property
    def hidden_channels(self) -> int:
        return self.w_h.out_channels

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for name in self.CONVS:
            conv = getattr(self, name)
            out[f"{name}.depthwise"] = conv.depthwise
            out[f"{name}.pointwise"] = conv.pointwise
            out[f"{name}.bias"] = conv.bias
        if self.init_weight is not None:
            out["init.weight"] = self.init_weight
            out["init.bias"] = self.init_bias
        return out

    def tensors(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_tensors().items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "GruWeights":
        def conv(name):
            try:
                return SepConvWeights(*(Tensor(arrays[f"{name}.{part}"], True)
                                        for part in ("depthwise", "pointwise", "bias")))
            except KeyError as exc:
                raise ValueError(f"weights are missing tensor {exc.args[0]!r}") from None

        init_w = arrays.get("init.weight")
        init_b = arrays.get("init.bias")
        weights = cls(*(conv(n) for n in cls.CONVS),
                      init_weight=None if init_w is None else Tensor(init_w, True),
                      init_bias=None if init_b is None else Tensor(init_b, True))
        weights.check()
        return weights

    def check(self) -> None:
        c_h = self.hidden_channels
        c_proj = self.proj2.out_channels
        if self.proj1.in_channels != N_REFINE_MAPS or self.proj2.in_channels != self.proj1.out_channels:
            raise T.ShapeError("projection layers have inconsistent channels")
        for gate in (self.w_z, self.w_r, self.w_h):
            if gate.out_channels != c_h or gate.in_channels != self.w_z.in_channels:
                raise T.ShapeError("gate convolutions have inconsistent channels")
        if self.context_channels < 0:
            raise T.ShapeError("gate input must hold hidden state, projection and context")
        for head in (self.head1, self.head2):
            if head.in_channels != c_h or head.out_channels != 1:
                raise T.ShapeError("update heads must map hidden state to one channel")

    @property
    def context_channels(self) -> int:
        return self.w_z.in_channels - self.hidden_channels - self.proj2.out_channels

    @classmethod
    def random(cls, cfg: RefineConfig, rng: np.random.Generator, head_channels: int | None = None,
               scale: float = 1.0, head_scale: float = 0.1) -> "GruWeights":
        """Random weights; ``head_channels`` is the channel count of concat(pen1, pen2)."""
        gate_in = cfg.gate_in_channels
        w = cls(
            SepConvWeights.random(N_REFINE_MAPS, cfg.proj_channels, rng, scale),
            SepConvWeights.random(cfg.proj_channels, cfg.proj_channels, rng, scale),
            SepConvWeights.random(gate_in, cfg.hidden_channels, rng, scale),
            SepConvWeights.random(gate_in, cfg.hidden_channels, rng, scale),
            SepConvWeights.random(gate_in, cfg.hidden_channels, rng, scale),
            SepConvWeights.random(cfg.hidden_channels, 1, rng, head_scale),
            SepConvWeights.random(cfg.hidden_channels, 1, rng, head_scale),
        )
        if head_channels is not None and head_channels != cfg.hidden_channels:
            w.init_weight = Tensor(rng.normal(0, scale / np.sqrt(head_channels),
                                              (cfg.hidden_channels, head_channels)), True)
            w.init_bias = Tensor(np.zeros(cfg.hidden_channels), True)
        return w

    @classmethod
    def zeros(cls, cfg: RefineConfig) -> "GruWeights":
        gate_in = cfg.gate_in_channels
        return cls(
            SepConvWeights.zeros(N_REFINE_MAPS, cfg.proj_channels),
            SepConvWeights.zeros(cfg.proj_channels, cfg.proj_channels),
            SepConvWeights.zeros(gate_in, cfg.hidden_channels),
            SepConvWeights.zeros(gate_in, cfg.hidden_channels),
            SepConvWeights.zeros(gate_in, cfg.hidden_channels),
            SepConvWeights.zeros(cfg.hidden_channels, 1),
            SepConvWeights.zeros(cfg.hidden_channels, 1),
        )


def constant_update_weights(cfg: RefineConfig, c1: float, c2: float,
                            rng: np.random.Generator | None = None) -> GruWeights:
    """Weights whose update heads ignore the hidden state and emit c1, c2 everywhere.

    The recurrent part is random (or zero without ``rng``) so the hidden
    state still evolves; only the head biases carry the update.
    """
    w = GruWeights.random(cfg, rng) if rng is not None else GruWeights.zeros(cfg)
    w.head1 = SepConvWeights.zeros(cfg.hidden_channels, 1)
    w.head2 = SepConvWeights.zeros(cfg.hidden_channels, 1)
    w.head1.bias.data[:] = c1
    w.head2.bias.data[:] = c2
    return w


@dataclass
class RefinementInputs:
    d1: Tensor
    d2: Tensor
    u1: Tensor
    u2: Tensor
    context: Tensor
    dif: Tensor | None = None

    def __post_init__(self):
        shape = self.d1.shape[-2:]
        for name in ("d2", "u1", "u2", "context"):
            if getattr(self, name).shape[-2:] != shape:
                raise T.ShapeError(f"{name} spatial shape {getattr(self, name).shape} != {shape}")
        if self.dif is None:
            self.dif = complementary_map(self.d1, self.d2)


@dataclass
class RefineResult:
    d1: Tensor
    d2: Tensor
    trace1: list[Tensor] = field(default_factory=list)
    trace2: list[Tensor] = field(default_factory=list)
    hidden: Tensor | None = None


def init_hidden(pen1: Tensor, pen2: Tensor, weights: GruWeights | None = None) -> Tensor:
    """h0 = tanh(concat(pen1, pen2)), with a 1x1 projection first when configured."""
    if pen1.shape[-2:] != pen2.shape[-2:]:
        raise T.ShapeError(f"feature maps differ in spatial shape: {pen1.shape} vs {pen2.shape}")
    x = T.concat([pen1, pen2], axis=0)
    if weights is not None and weights.init_weight is not None:
        x = T.pointwise_conv(x, weights.init_weight, weights.init_bias)
    elif weights is not None and x.shape[0] != weights.hidden_channels:
        raise T.ShapeError(f"head features have {x.shape[0]} channels, hidden state needs "
                           f"{weights.hidden_channels} and no projection is configured")
    return T.tanh(x)


def build_input(r: RefinementInputs, w: GruWeights) -> Tensor:
    maps = T.concat([r.d1, r.d2, r.u1, r.u2, r.dif], axis=0)
    feat = T.conv2d_separable(T.tanh(T.conv2d_separable(maps, w.proj1)), w.proj2)
    return T.concat([feat, r.context], axis=0)


def conv_gru_step(h: Tensor, x: Tensor, w: GruWeights) -> Tensor:
    hx = T.concat([h, x], axis=0)
    z = T.sigmoid(T.conv2d_separable(hx, w.w_z))
    r = T.sigmoid(T.conv2d_separable(hx, w.w_r))
    h_cand = T.tanh(T.conv2d_separable(T.concat([T.mul(r, h), x], axis=0), w.w_h))
    return T.add(T.mul(T.sub(1.0, z), h), T.mul(z, h_cand))


def gru_gates(h: Tensor, x: Tensor, w: GruWeights) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(z, r, candidate) arrays of one step, for inspection."""
    hx = T.concat([h, x], axis=0)
    z = T.sigmoid(T.conv2d_separable(hx, w.w_z))
    r = T.sigmoid(T.conv2d_separable(hx, w.w_r))
    h_cand = T.tanh(T.conv2d_separable(T.concat([T.mul(r, h), x], axis=0), w.w_h))
    return z.data, r.data, h_cand.data


def depth_update_head(h: Tensor, w: GruWeights) -> tuple[Tensor, Tensor]:
    return T.conv2d_separable(h, w.head1), T.conv2d_separable(h, w.head2)


def refine(d1: Tensor, d2: Tensor, u1: Tensor, u2: Tensor, context: Tensor, h0: Tensor,
           weights: GruWeights, t_max: int = 3, min_depth: float = MIN_DEPTH) -> RefineResult:
    """Run ``t_max`` refinement iterations; uncertainties stay fixed throughout."""
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    if h0.shape[0] != weights.hidden_channels:
        raise T.ShapeError(f"hidden state has {h0.shape[0]} channels, weights expect "
                           f"{weights.hidden_channels}")
    h = h0
    result = RefineResult(d1, d2, hidden=h0)
    for _ in range(t_max):
        inputs = RefinementInputs(d1, d2, u1, u2, context)
        h = conv_gru_step(h, build_input(inputs, weights), weights)
        delta1, delta2 = depth_update_head(h, weights)
        d1 = T.clamp_min(T.add(d1, delta1), min_depth)
        d2 = T.clamp_min(T.add(d2, delta2), min_depth)
        result.trace1.append(d1)
        result.trace2.append(d2)
    result.d1, result.d2, result.hidden = d1, d2, h
    return result


def fuse(d1_star: Tensor, d2_star: Tensor, full_h: int, full_w: int) -> Tensor:
    """Upsample both estimates bilinearly and average them."""
    up1 = T.bilinear_resize(T.as_tensor(d1_star), full_h, full_w)
    up2 = T.bilinear_resize(T.as_tensor(d2_star), full_h, full_w)
    return T.mul(T.add(up1, up2), 0.5)


@dataclass
class ContextEncoder:
    """Fixed stand-in for the image feature extractor.

    The RGB image is resized to the refinement grid and passed through two
    separable convolutions with tanh after each.
    """

    conv1: SepConvWeights
    conv2: SepConvWeights

    @classmethod
    def random(cls, channels: int, rng: np.random.Generator) -> "ContextEncoder":
        return cls(SepConvWeights.random(3, channels, rng), SepConvWeights.random(channels, channels, rng))

    def __call__(self, rgb: np.ndarray, out_h: int, out_w: int) -> Tensor:
        img = np.asarray(rgb, dtype=np.float64)
        if img.ndim == 3 and img.shape[-1] == 3:
            img = np.moveaxis(img, -1, 0)
        x = T.bilinear_resize(Tensor(img), out_h, out_w)
        x = T.tanh(T.conv2d_separable(x, self.conv1))
        return T.tanh(T.conv2d_separable(x, self.conv2)).detach()
