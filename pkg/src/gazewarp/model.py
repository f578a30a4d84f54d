"""Coarse-to-fine warping network: configuration, parameters, forward pass.

Four variants share one parameter layout:

* SS: a single full-scale tower predicts the flow directly.
* MS: a half-scale tower produces features that are upsampled and fused
  into the full-scale tower input; only one warp is applied.
* CFW: the half-scale tower predicts a coarse flow which is upsampled,
  applied to the image, and amended additively by the full-scale tower.
* CFW_LCM: CFW plus a lightness correction head fed by the third conv
  activations of both towers.

Towers are fully convolutional: same-mode convolutions, stride one, no
pooling, BN+ReLU after every conv except the final linear flow layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import encoding
from .sampler import warp
from .tensor import LayerParams, Tensor, add, batchnorm, concat_channels, conv2d_same, relu, upsample2x_bilinear

VARIANTS = ("SS", "MS", "CFW", "CFW_LCM")

FLOW_CHANNELS = 2
LCM_CHANNELS = (16, 8, 1)
LCM_KERNEL = 3
# index (0-based) of the conv whose activations feed the lightness head
AUX_TAP = 2


class ConfigError(ValueError):
    """Variant/weight mismatch or an inconsistent model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture descriptor for one model variant.

    ``channels_per_layer`` is the base width of a tower; the actual plan is
    [c, 2c, c, c/2, ..., 2] (see :func:`tower_channels`). The first conv
    uses ``first_kernel_size``, later ones ``kernel_size``.
    """

    variant: str = "CFW_LCM"
    conv_layers_per_module: int = 5
    channels_per_layer: int = 32
    kernel_size: int = 3
    first_kernel_size: int = 5
    angle_dims: int = 1
    input_size: tuple[int, int] = (41, 51)  # (H, W)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.kernel_size % 2 == 0 or self.first_kernel_size % 2 == 0:
            raise ConfigError("kernel sizes must be odd for same-mode convolutions")
        if self.conv_layers_per_module < 1:
            raise ConfigError("need at least one conv per warping module")
        if self.variant == "CFW_LCM" and self.conv_layers_per_module < AUX_TAP + 2:
            raise ConfigError("the lightness head taps the third conv; CFW_LCM needs at least "
                              f"{AUX_TAP + 2} convs per module")
        if self.angle_dims not in (1, 2):
            raise ConfigError("angle_dims must be 1 (vertical) or 2 (vertical+horizontal)")

    def tower_channels(self) -> list[int]:
        """Output channels of each conv in a warping tower, flow layer last."""
        n, c = self.conv_layers_per_module, self.channels_per_layer
        if n == 1:
            return [FLOW_CHANNELS]
        hidden = [c, 2 * c, c, max(c // 2, 2)]
        if n - 1 <= 4:
            hidden = hidden[: n - 1]
        else:
            hidden = hidden + [max(c // 2, 2)] * (n - 5)
        return hidden + [FLOW_CHANNELS]

    def tower_kernels(self) -> list[int]:
        n = self.conv_layers_per_module
        if n == 1:
            return [self.kernel_size]
        return [self.first_kernel_size] + [self.kernel_size] * (n - 1)

    def has_coarse_tower(self) -> bool:
        return self.variant in ("MS", "CFW", "CFW_LCM")

    def fine_input_channels(self) -> int:
        if self.variant in ("CFW", "CFW_LCM"):
            # full stack + coarse estimate + upsampled coarse flow
            return encoding.STACK_CHANNELS + 3 + FLOW_CHANNELS
        if self.variant == "MS":
            return encoding.STACK_CHANNELS + self.tower_channels()[-2]
        return encoding.STACK_CHANNELS


@dataclass
class ModelWeights:
    """All learnable parameters of one variant, in declaration order."""

    config: ModelConfig
    angle_mlp: list[LayerParams]
    coarse: list[LayerParams] = field(default_factory=list)
    fine: list[LayerParams] = field(default_factory=list)
    lcm: list[LayerParams] = field(default_factory=list)

    def all_layers(self) -> list[LayerParams]:
        return [*self.angle_mlp, *self.coarse, *self.fine, *self.lcm]

    def trainable(self) -> list[Tensor]:
        return [t for layer in self.all_layers() for t in layer.trainable()]

    def mark_trainable(self, flag: bool = True) -> None:
        for t in self.trainable():
            t.requires_grad = flag

    def zero_grads(self) -> None:
        for t in self.trainable():
            t.zero_grad()


def _conv_layer(rng: np.random.Generator, in_ch: int, out_ch: int, k: int, dtype, weight_scale: float = 1.0) -> LayerParams:
    # fan-in scaled uniform init
    bound = weight_scale / np.sqrt(in_ch * k * k)
    w = rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k)).astype(dtype)
    b = np.zeros(out_ch, dtype=dtype)
    return LayerParams("conv", Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))


def _bn_layer(channels: int, dtype) -> LayerParams:
    return LayerParams(
        "batchnorm",
        Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
        Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
        running_mean=Tensor(np.zeros(channels, dtype=dtype)),
        running_var=Tensor(np.ones(channels, dtype=dtype)),
    )


def _fc_layer(rng: np.random.Generator, in_dim: int, out_dim: int, dtype) -> LayerParams:
    bound = 1.0 / np.sqrt(in_dim)
    w = rng.uniform(-bound, bound, size=(in_dim, out_dim)).astype(dtype)
    b = np.zeros(out_dim, dtype=dtype)
    return LayerParams("fully_connected", Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))


def _build_tower(rng, in_ch: int, channels: list[int], kernels: list[int], dtype,
                 terminal_bn_relu: bool, final_weight_scale: float) -> list[LayerParams]:
    layers: list[LayerParams] = []
    prev = in_ch
    for i, (c, k) in enumerate(zip(channels, kernels)):
        last = i == len(channels) - 1
        scale = final_weight_scale if (last and not terminal_bn_relu) else 1.0
        layers.append(_conv_layer(rng, prev, c, k, dtype, weight_scale=scale))
        if not last or terminal_bn_relu:
            layers.append(_bn_layer(c, dtype))
        prev = c
    return layers


def init_weights(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelWeights:
    """Fresh parameters; the flow layer starts small so training begins near
    the identity warp."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x1A17])))
    mlp = [
        _fc_layer(rng, config.angle_dims, encoding.EMBED_DIM, dtype),
        _fc_layer(rng, encoding.EMBED_DIM, encoding.EMBED_DIM, dtype),
    ]
    channels = config.tower_channels()
    kernels = config.tower_kernels()

    coarse: list[LayerParams] = []
    if config.variant == "MS":
        # feature tower only: drop the flow layer, keep BN+ReLU on the last conv
        coarse = _build_tower(rng, encoding.STACK_CHANNELS, channels[:-1], kernels[:-1], dtype,
                              terminal_bn_relu=True, final_weight_scale=1.0)
    elif config.variant in ("CFW", "CFW_LCM"):
        coarse = _build_tower(rng, encoding.STACK_CHANNELS, channels, kernels, dtype,
                              terminal_bn_relu=False, final_weight_scale=0.1)

    fine = _build_tower(rng, config.fine_input_channels(), channels, kernels, dtype,
                        terminal_bn_relu=False, final_weight_scale=0.1)

    lcm_layers: list[LayerParams] = []
    if config.variant == "CFW_LCM":
        from . import lcm as lcm_mod

        aux_ch = channels[AUX_TAP]
        lcm_layers = lcm_mod.init_lcm_tower(rng, 2 * aux_ch + 3, dtype)

    return ModelWeights(config, mlp, coarse, fine, lcm_layers)


def run_tower(x: Tensor, layers: list[LayerParams], training: bool) -> tuple[Tensor, list[Tensor]]:
    """Apply conv/BN/ReLU groups; returns the output and each conv group's
    post-activation map (the final linear conv contributes its raw output)."""
    acts: list[Tensor] = []
    h = x
    i = 0
    while i < len(layers):
        assert layers[i].kind == "conv"
        h = conv2d_same(h, layers[i])
        i += 1
        if i < len(layers) and layers[i].kind == "batchnorm":
            h = relu(batchnorm(h, layers[i], training))
            i += 1
        acts.append(h)
    return h, acts


def upsample_flow(flow_half: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Bring a half-scale flow to full scale: 2x bilinear upsampling of the
    map and a 2x scaling of the displacement values (half-scale pixels to
    full-scale pixels). Odd target extents are reached by edge replication."""
    from .tensor import affine

    return affine(upsample2x_bilinear(flow_half, out_hw), 2.0, 0.0)


@dataclass
class ForwardResult:
    """Everything the forward pass produces that callers may want."""

    output: Tensor                      # final image (B, 3, H, W)
    flow: Tensor                        # applied flow (B, 2, H, W)
    coarse_flow: Optional[Tensor] = None
    coarse_output: Optional[Tensor] = None
    warped: Optional[Tensor] = None     # pre-lightness image (CFW_LCM only)
    mask: Optional[Tensor] = None       # lightness mask (CFW_LCM only)
    aux_half: Optional[Tensor] = None   # third-conv activations, upsampled
    aux_full: Optional[Tensor] = None


def forward(image_like, anchors: np.ndarray, angle_deg: np.ndarray, weights: ModelWeights,
            training: bool = False) -> ForwardResult:
    """Run one variant end to end.

    image: (B, 3, H, W) values in [0, 1]; anchors: (B, 7, 2) crop pixel
    coordinates; angle_deg: (B, angle_dims) correction angles in degrees.
    """
    cfg = weights.config
    image = image_like if isinstance(image_like, Tensor) else Tensor(image_like)
    if image.data.ndim == 3:
        image = Tensor(image.data[None], requires_grad=image.requires_grad)
    B, _, H, W = image.data.shape
    anchors = np.asarray(anchors, dtype=np.float64).reshape(B, encoding.NUM_ANCHORS, 2)
    angle = np.asarray(angle_deg, dtype=np.float64).reshape(B, cfg.angle_dims)

    _check_variant_layers(weights)

    embedding = encoding.embed_angle(angle, weights.angle_mlp)
    stack_full = encoding.build_input_stack(image, anchors, embedding)

    if cfg.variant == "SS":
        flow, _ = run_tower(stack_full, weights.fine, training)
        return ForwardResult(output=warp(image, flow), flow=flow)

    stack_half = encoding.build_half_scale_stack(image, anchors, embedding)

    if cfg.variant == "MS":
        feats_half, _ = run_tower(stack_half, weights.coarse, training)
        feats_up = upsample2x_bilinear(feats_half, (H, W))
        flow, _ = run_tower(concat_channels([stack_full, feats_up]), weights.fine, training)
        return ForwardResult(output=warp(image, flow), flow=flow)

    # CFW and CFW_LCM
    flow_half, acts_half = run_tower(stack_half, weights.coarse, training)
    d_coarse = upsample_flow(flow_half, (H, W))
    o_coarse = warp(image, d_coarse)
    fine_in = concat_channels([stack_full, o_coarse, d_coarse])
    d_res, acts_full = run_tower(fine_in, weights.fine, training)
    flow = add(d_coarse, d_res)
    warped = warp(image, flow)

    if cfg.variant == "CFW":
        return ForwardResult(output=warped, flow=flow, coarse_flow=d_coarse, coarse_output=o_coarse)

    from . import lcm as lcm_mod

    aux_half = upsample2x_bilinear(acts_half[AUX_TAP], (H, W))
    aux_full = acts_full[AUX_TAP]
    mask = lcm_mod.predict_mask(aux_half, aux_full, warped, weights.lcm, training)
    final = lcm_mod.apply_lightness(warped, mask)
    return ForwardResult(output=final, flow=flow, coarse_flow=d_coarse, coarse_output=o_coarse,
                         warped=warped, mask=mask, aux_half=aux_half, aux_full=aux_full)


def _check_variant_layers(weights: ModelWeights) -> None:
    cfg = weights.config
    if cfg.has_coarse_tower() != bool(weights.coarse):
        raise ConfigError(f"variant {cfg.variant} and coarse-tower presence disagree")
    if (cfg.variant == "CFW_LCM") != bool(weights.lcm):
        raise ConfigError(f"variant {cfg.variant} and lightness-head presence disagree")
    if not weights.fine:
        raise ConfigError("model has no full-scale tower")
    first_fine = weights.fine[0].weights.shape[1]
    if first_fine != cfg.fine_input_channels():
        raise ConfigError(f"full-scale tower expects {first_fine} input channels, "
                          f"config implies {cfg.fine_input_channels()}")
