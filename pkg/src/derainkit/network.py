"""Network definitions: shared encoder, background/rain decoders, the
recomposition block, and the patch discriminator.

The encoder stacks five residual conv modules separated by 2x2 max-pooling,
so its feature pyramid sits at 1/2 .. 1/32 of the input size. The two
decoders mirror it with nearest-upsample + conv stages and additive skips
from the matching encoder scale; the rain decoder additionally receives the
background decoder's feature map at every scale, channel-concatenated
before that scale's conv. Inference only needs the encoder and the
background decoder; per-submodule call counters make that checkable.

All submodules count their forward invocations in `.calls`.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CheckpointError, InvalidParameterError, \
    NonDivisibleInputError, ShapeInconsistencyError, ShapeMismatchError, \
    WrongInputSizeError

DOWNSCALE = 32  # five pooling stages
DISCRIMINATOR_INPUT = 224
CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    patch: int = 224
    encoder_channels: tuple[int, ...] = (64, 128, 256, 512, 512)
    dilation_rate: int = 2
    dilated_layers: str = "module1"  # "module1": both convs of module 1;
    #                                  "modules12": first conv of modules 1 and 2
    leaky_slope: float = 0.2
    composition_channels: tuple[int, ...] = (64, 64)
    discriminator_channels: tuple[int, ...] = (64, 128, 256, 512)
    upsample_mode: str = "nearest+conv"
    head_activation: str = "sigmoid"
    image_channels: int = 3

    def validate(self) -> "NetworkConfig":
        if self.patch < DOWNSCALE or self.patch % DOWNSCALE != 0:
            raise InvalidParameterError(
                f"patch must be a positive multiple of {DOWNSCALE}, "
                f"got {self.patch}"
            )
        if len(self.encoder_channels) != 5:
            raise InvalidParameterError(
                "encoder_channels must have exactly five entries"
            )
        if len(self.discriminator_channels) != 4:
            raise InvalidParameterError(
                "discriminator_channels must have exactly four entries"
            )
        if not self.composition_channels:
            raise InvalidParameterError("composition_channels must be non-empty")
        for name in ("encoder_channels", "composition_channels",
                     "discriminator_channels"):
            if any(c < 1 for c in getattr(self, name)):
                raise InvalidParameterError(f"{name} must all be >= 1")
        if self.dilation_rate < 1:
            raise InvalidParameterError(
                f"dilation_rate must be >= 1, got {self.dilation_rate}"
            )
        if self.dilated_layers not in ("module1", "modules12"):
            raise InvalidParameterError(
                f"unknown dilated_layers {self.dilated_layers!r}"
            )
        if self.upsample_mode != "nearest+conv":
            raise InvalidParameterError(
                f"unsupported upsample_mode {self.upsample_mode!r}"
            )
        if self.head_activation != "sigmoid":
            raise InvalidParameterError(
                f"unsupported head_activation {self.head_activation!r}"
            )
        if self.image_channels < 1:
            raise InvalidParameterError(
                f"image_channels must be >= 1, got {self.image_channels}"
            )
        return self


class ResidualConvBlock(nn.Module):
    """Two 3x3 convs with an in-module skip; 1x1 projection when widths differ."""

    def __init__(self, in_ch: int, out_ch: int, dilations=(1, 1)):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=dilations[0],
                               dilation=dilations[0])
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=dilations[1],
                               dilation=dilations[1])
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x):
        y = F.relu(self.conv1(x))
        y = self.conv2(y)
        return F.relu(y + self.skip(x))


def _check_divisible(x: torch.Tensor) -> None:
    h, w = int(x.shape[-2]), int(x.shape[-1])
    if h % DOWNSCALE or w % DOWNSCALE:
        raise NonDivisibleInputError(
            f"input {h}x{w} not divisible by {DOWNSCALE}"
        )


def _check_pyramid(feats) -> None:
    if len(feats) != 5:
        raise ShapeInconsistencyError(f"expected 5 feature maps, got {len(feats)}")
    for lo, hi in zip(feats[1:], feats[:-1]):
        if (lo.shape[-2] * 2, lo.shape[-1] * 2) != (hi.shape[-2], hi.shape[-1]):
            raise ShapeInconsistencyError(
                f"pyramid scales do not halve: {hi.shape} -> {lo.shape}"
            )


class Encoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        blocks = []
        in_ch = cfg.image_channels
        d = cfg.dilation_rate
        for i, out_ch in enumerate(cfg.encoder_channels):
            if cfg.dilated_layers == "module1":
                dilations = (d, d) if i == 0 else (1, 1)
            else:
                dilations = (d, 1) if i < 2 else (1, 1)
            blocks.append(ResidualConvBlock(in_ch, out_ch, dilations))
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.pool = nn.MaxPool2d(2, 2)
        self.calls = 0

    def forward(self, x):
        self.calls += 1
        _check_divisible(x)
        feats = []
        for block in self.blocks:
            x = block(self.pool(x))
            feats.append(x)
        return feats


class BackgroundDecoder(nn.Module):
    """Upsample-conv decoder with additive encoder skips and a sigmoid head.

    Returns the restored image plus the per-scale feature maps that feed
    the rain decoder's cross-branch concatenations.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        c = cfg.encoder_channels
        widths = [c[4], c[3], c[2], c[1], c[0], c[0]]
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, padding=1) for i in range(5)
        )
        self.head = nn.Conv2d(c[0], cfg.image_channels, 3, padding=1)
        self.calls = 0

    def forward(self, feats):
        self.calls += 1
        _check_pyramid(feats)
        x = feats[4]
        taps = []
        for i, conv in enumerate(self.convs):
            x = F.relu(conv(F.interpolate(x, scale_factor=2, mode="nearest")))
            if i < 4:
                x = x + feats[3 - i]
            taps.append(x)
        return torch.sigmoid(self.head(x)), taps


class RainDecoder(nn.Module):
    """Mirror of the background decoder; every conv additionally sees the
    background branch's feature map at that scale."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        c = cfg.encoder_channels
        widths = [c[4], c[3], c[2], c[1], c[0], c[0]]
        taps = [c[3], c[2], c[1], c[0], c[0]]
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i] + taps[i], widths[i + 1], 3, padding=1)
            for i in range(5)
        )
        self.head = nn.Conv2d(c[0], cfg.image_channels, 3, padding=1)
        self.calls = 0

    def forward(self, feats, bg_taps):
        self.calls += 1
        _check_pyramid(feats)
        if len(bg_taps) != 5:
            raise ShapeInconsistencyError(
                f"expected 5 background feature maps, got {len(bg_taps)}"
            )
        x = feats[4]
        for i, conv in enumerate(self.convs):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            tap = bg_taps[i]
            if tap.shape[-2:] != x.shape[-2:]:
                raise ShapeInconsistencyError(
                    f"background feature {tuple(tap.shape[-2:])} does not match "
                    f"rain path {tuple(x.shape[-2:])} at stage {i}"
                )
            x = F.relu(conv(torch.cat([x, tap], dim=1)))
            if i < 4:
                x = x + feats[3 - i]
        return torch.sigmoid(self.head(x))


class CompositionBlock(nn.Module):
    """Re-synthesizes the rainy input from the two predicted layers."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        widths = (2 * cfg.image_channels,) + tuple(cfg.composition_channels)
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, padding=1)
            for i in range(len(widths) - 1)
        )
        self.head = nn.Conv2d(widths[-1], cfg.image_channels, 3, padding=1)
        self.calls = 0

    def forward(self, background, rain):
        self.calls += 1
        if background.shape != rain.shape:
            raise ShapeMismatchError(
                f"background {tuple(background.shape)} vs rain {tuple(rain.shape)}"
            )
        x = torch.cat([background, rain], dim=1)
        for conv in self.convs:
            x = F.relu(conv(x))
        return torch.sigmoid(self.head(x))


class PatchDiscriminator(nn.Module):
    """Five 4x4 convs (strides 2,2,2,1,1), LeakyReLU between, sigmoid map.

    Takes fixed 224x224 inputs; the layer output sizes are then
    112, 56, 28, 27 and 26.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        widths = (cfg.image_channels,) + tuple(cfg.discriminator_channels) + (1,)
        strides = (2, 2, 2, 1, 1)
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 4, stride=strides[i], padding=1)
            for i in range(5)
        )
        self.slope = cfg.leaky_slope
        self.calls = 0

    def forward(self, x):
        self.calls += 1
        h, w = int(x.shape[-2]), int(x.shape[-1])
        if (h, w) != (DISCRIMINATOR_INPUT, DISCRIMINATOR_INPUT):
            raise WrongInputSizeError(
                f"discriminator expects {DISCRIMINATOR_INPUT}x"
                f"{DISCRIMINATOR_INPUT} inputs, got {h}x{w}"
            )
        for conv in self.convs[:-1]:
            x = F.leaky_relu(conv(x), self.slope)
        return torch.sigmoid(self.convs[-1](x))


class DerainModel(nn.Module):
    """The full model. Tensors are NCHW float in [0, 1]."""

    def __init__(self, config: NetworkConfig | None = None):
        super().__init__()
        self.config = (config or NetworkConfig()).validate()
        self.encoder = Encoder(self.config)
        self.background_decoder = BackgroundDecoder(self.config)
        self.rain_decoder = RainDecoder(self.config)
        self.composer = CompositionBlock(self.config)
        self.discriminator = PatchDiscriminator(self.config)

    # public operations
    def encode(self, x):
        return self.encoder(x)

    def decode_background(self, feats):
        return self.background_decoder(feats)

    def decode_rain(self, feats, bg_taps):
        return self.rain_decoder(feats, bg_taps)

    def compose(self, background, rain):
        return self.composer(background, rain)

    def discriminate(self, x):
        return self.discriminator(x)

    def forward_full(self, x):
        feats = self.encode(x)
        background, taps = self.decode_background(feats)
        rain = self.decode_rain(feats, taps)
        recomposed = self.compose(background, rain)
        return background, rain, recomposed

    forward = forward_full

    def derain(self, x):
        """Background branch only; reflect-pads to a multiple of 32 and crops back."""
        h, w = int(x.shape[-2]), int(x.shape[-1])
        ph = -(-h // DOWNSCALE) * DOWNSCALE
        pw = -(-w // DOWNSCALE) * DOWNSCALE
        if (ph, pw) != (h, w):
            x = F.pad(x, (0, pw - w, 0, ph - h), mode="reflect")
        feats = self.encode(x)
        background, _ = self.decode_background(feats)
        return background[..., :h, :w]

    @property
    def counters(self) -> dict[str, int]:
        return {
            "encoder": self.encoder.calls,
            "background_decoder": self.background_decoder.calls,
            "rain_decoder": self.rain_decoder.calls,
            "composition": self.composer.calls,
            "discriminator": self.discriminator.calls,
        }

    def reset_counters(self) -> None:
        for m in (self.encoder, self.background_decoder, self.rain_decoder,
                  self.composer, self.discriminator):
            m.calls = 0


def init_weights(model: nn.Module, seed: int) -> nn.Module:
    """Fan-in-scaled uniform init (weight variance 1/fan_in), reproducible
    from the seed. Biases zero.

    The additive skips accumulate activations across scales with no
    normalization layers to absorb them, so hotter schemes drive the
    sigmoid heads into saturation at init and training never starts.
    """
    g = torch.Generator().manual_seed(seed)
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            bound = math.sqrt(3.0 / fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=g)
                if m.bias is not None:
                    m.bias.zero_()
    return model


def zero_weights(model: nn.Module) -> nn.Module:
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    return model


def parameter_counts(model: DerainModel) -> dict[str, int]:
    counts = {
        name: sum(p.numel() for p in module.parameters())
        for name, module in (
            ("encoder", model.encoder),
            ("background_decoder", model.background_decoder),
            ("rain_decoder", model.rain_decoder),
            ("composition", model.composer),
            ("discriminator", model.discriminator),
        )
    }
    counts["total"] = sum(counts.values())
    return counts


def image_to_tensor(arr: np.ndarray) -> torch.Tensor:
    """(H, W, C) float array -> (1, C, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)) \
        .permute(2, 0, 1).unsqueeze(0)


def batch_to_tensor(arr: np.ndarray) -> torch.Tensor:
    """(N, H, W, C) float array -> (N, C, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)) \
        .permute(0, 3, 1, 2)


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """(1, C, H, W) or (C, H, W) tensor -> (H, W, C) float32 array."""
    if t.dim() == 4:
        t = t.squeeze(0)
    return t.detach().permute(1, 2, 0).cpu().numpy().astype(np.float32)


def atomic_torch_save(payload: dict, path) -> None:
    """Write-temp-then-rename so a crash never leaves a truncated file."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(path, model: DerainModel) -> None:
    atomic_torch_save(
        {
            "format_version": CHECKPOINT_VERSION,
            "net_config": asdict(model.config),
            "model_state": model.state_dict(),
        },
        path,
    )


def load_payload(path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {payload.get('format_version')!r}"
        )
    return payload


def load_model(path, expected_config: NetworkConfig | None = None) -> DerainModel:
    payload = load_payload(path)
    cfg = NetworkConfig(**{
        k: tuple(v) if isinstance(v, (list, tuple)) else v
        for k, v in payload["net_config"].items()
    })
    if expected_config is not None and cfg != expected_config:
        raise CheckpointError(
            f"{path}: checkpoint config {cfg} does not match expected "
            f"{expected_config}"
        )
    model = DerainModel(cfg)
    model.load_state_dict(payload["model_state"])
    return model
