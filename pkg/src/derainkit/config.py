"""Run configuration: built-in defaults, overridden by an INI-style config
file, overridden by command-line flags.

A single schema table drives both the file keys and the generated flags,
so `[train] max_iter` and `--train-max-iter` can never drift apart. The
`[run]` section holds the three keys shared by every command (seed,
device, out); those map to the bare flags `--seed`, `--device`, `--out`.
"""

from __future__ import annotations

import configparser
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .errors import ConfigError
from .network import NetworkConfig
from .objectives import AdversarialVariant, Reduction, Stage, StageObjective
from .rainsynth import RainParamRanges
from .trainer import TrainConfig

DEVICE_ENV_VAR = "DERAINKIT_DEVICE"


@dataclass
class LossSettings:
    reduction: str = "per_pixel_mean"
    adversarial_variant: str = "non_saturating"
    pretrain_background: float = 1.0
    pretrain_rain: float = 1.0
    pretrain_reconstruction: float = 1.0
    finetune_reconstruction: float = 1.0
    finetune_adversarial: float = 1.0

    def _reduction(self) -> Reduction:
        try:
            return Reduction(self.reduction)
        except ValueError:
            raise ConfigError(
                f"unknown reduction {self.reduction!r}; expected one of "
                f"{[r.value for r in Reduction]}"
            ) from None

    def _variant(self) -> AdversarialVariant:
        try:
            return AdversarialVariant(self.adversarial_variant)
        except ValueError:
            raise ConfigError(
                f"unknown adversarial_variant {self.adversarial_variant!r}; "
                f"expected one of {[v.value for v in AdversarialVariant]}"
            ) from None

    def pretrain_objective(self) -> StageObjective:
        return StageObjective(
            Stage.PRETRAIN,
            lambda_background=self.pretrain_background,
            lambda_rain=self.pretrain_rain,
            lambda_reconstruction=self.pretrain_reconstruction,
            reduction=self._reduction(),
            adversarial_variant=self._variant(),
        )

    def finetune_objective(self) -> StageObjective:
        return StageObjective(
            Stage.FINETUNE,
            lambda_reconstruction=self.finetune_reconstruction,
            lambda_adversarial=self.finetune_adversarial,
            reduction=self._reduction(),
            adversarial_variant=self._variant(),
        )


@dataclass
class RunConfig:
    seed: int = 0
    device: str = ""
    out: Path = field(default_factory=lambda: Path("runs"))
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    rain: RainParamRanges = field(default_factory=RainParamRanges)
    loss: LossSettings = field(default_factory=LossSettings)

    def section_target(self, section: str):
        return {"run": self, "network": self.network, "train": self.train,
                "rain": self.rain, "loss": self.loss}[section]

    def resolve_device(self) -> str:
        device = self.device or os.environ.get(DEVICE_ENV_VAR, "") or "cpu"
        if device.startswith("cuda") and not torch.cuda.is_available():
            warnings.warn(f"device {device!r} unavailable, falling back to cpu",
                          stacklevel=2)
            return "cpu"
        return device

    def validate(self) -> "RunConfig":
        try:
            self.network.validate()
            self.train.validate()
            self.loss.pretrain_objective()
            self.loss.finetune_objective()
        except ConfigError:
            raise
        except Exception as exc:
            raise ConfigError(str(exc)) from exc
        for name in ("density", "streak_length", "angle_deg", "intensity",
                     "num_overlays"):
            lo, hi = getattr(self.rain, name)
            if lo > hi:
                raise ConfigError(f"rain {name} range ({lo}, {hi}) is inverted")
        return self


# value syntax per schema kind
def _parse_int_tuple(raw: str) -> tuple[int, ...]:
    return tuple(int(v) for v in raw.split(","))


def _parse_pair(raw: str, cast):
    parts = raw.split(",")
    if len(parts) != 2:
        raise ValueError(f"expected 'low,high', got {raw!r}")
    return (cast(parts[0]), cast(parts[1]))


def _parse_schedule(raw: str) -> tuple[tuple[int, float], ...]:
    steps = []
    for part in raw.split(","):
        bound, _, rate = part.partition(":")
        if not rate:
            raise ValueError(f"expected 'iteration:rate', got {part!r}")
        steps.append((int(bound), float(rate)))
    return tuple(steps)


def _join(values) -> str:
    return ",".join(str(v) for v in values)


_KINDS = {
    "int": (int, str),
    "float": (float, str),
    "str": (str, str),
    "path": (Path, str),
    "ints": (_parse_int_tuple, _join),
    "pair_int": (lambda s: _parse_pair(s, int), _join),
    "pair_float": (lambda s: _parse_pair(s, float), _join),
    "schedule": (_parse_schedule,
                 lambda v: ",".join(f"{b}:{r}" for b, r in v)),
}


@dataclass(frozen=True)
class ConfigField:
    section: str
    key: str
    kind: str

    @property
    def flag(self) -> str:
        if self.section == "run":
            return "--" + self.key.replace("_", "-")
        return f"--{self.section}-" + self.key.replace("_", "-")

    @property
    def dest(self) -> str:
        return f"{self.section}__{self.key}"

    def parse(self, raw: str):
        try:
            return _KINDS[self.kind][0](raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(
                f"bad value for [{self.section}] {self.key}: {exc}"
            ) from exc

    def serialize(self, value) -> str:
        return _KINDS[self.kind][1](value)

    def get(self, cfg: RunConfig):
        return getattr(cfg.section_target(self.section), self.key)

    def set(self, cfg: RunConfig, value) -> None:
        setattr(cfg.section_target(self.section), self.key, value)


SCHEMA: tuple[ConfigField, ...] = (
    ConfigField("run", "seed", "int"),
    ConfigField("run", "device", "str"),
    ConfigField("run", "out", "path"),
    ConfigField("network", "patch", "int"),
    ConfigField("network", "encoder_channels", "ints"),
    ConfigField("network", "dilation_rate", "int"),
    ConfigField("network", "dilated_layers", "str"),
    ConfigField("network", "leaky_slope", "float"),
    ConfigField("network", "composition_channels", "ints"),
    ConfigField("network", "discriminator_channels", "ints"),
    ConfigField("network", "upsample_mode", "str"),
    ConfigField("network", "head_activation", "str"),
    ConfigField("network", "image_channels", "int"),
    ConfigField("train", "batch", "int"),
    ConfigField("train", "patch", "int"),
    ConfigField("train", "momentum", "float"),
    ConfigField("train", "weight_decay", "float"),
    ConfigField("train", "lr_schedule", "schedule"),
    ConfigField("train", "max_iter", "int"),
    ConfigField("train", "finetune_iter", "int"),
    ConfigField("train", "finetune_lr", "float"),
    ConfigField("train", "d_steps_per_g", "int"),
    ConfigField("train", "d_real_pool", "str"),
    ConfigField("train", "checkpoint_every", "int"),
    ConfigField("rain", "density", "pair_float"),
    ConfigField("rain", "streak_length", "pair_int"),
    ConfigField("rain", "angle_deg", "pair_float"),
    ConfigField("rain", "intensity", "pair_float"),
    ConfigField("rain", "num_overlays", "pair_int"),
    ConfigField("loss", "reduction", "str"),
    ConfigField("loss", "adversarial_variant", "str"),
    ConfigField("loss", "pretrain_background", "float"),
    ConfigField("loss", "pretrain_rain", "float"),
    ConfigField("loss", "pretrain_reconstruction", "float"),
    ConfigField("loss", "finetune_reconstruction", "float"),
    ConfigField("loss", "finetune_adversarial", "float"),
)

_BY_LOCATION = {(f.section, f.key): f for f in SCHEMA}


def apply_config_file(cfg: RunConfig, path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    for section in parser.sections():
        if section not in ("run", "network", "train", "rain", "loss"):
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser[section].items():
            cfield = _BY_LOCATION.get((section, key))
            if cfield is None:
                raise ConfigError(f"{path}: unknown key [{section}] {key}")
            cfield.set(cfg, cfield.parse(raw))
    return cfg


def apply_flag_overrides(cfg: RunConfig, namespace) -> RunConfig:
    """Copy every schema flag the user actually passed onto the config."""
    for cfield in SCHEMA:
        raw = getattr(namespace, cfield.dest, None)
        if raw is not None:
            cfield.set(cfg, cfield.parse(raw))
    return cfg


def config_text(cfg: RunConfig) -> str:
    """Current configuration rendered back to config-file syntax."""
    lines = []
    section = None
    for cfield in SCHEMA:
        if cfield.section != section:
            if section is not None:
                lines.append("")
            section = cfield.section
            lines.append(f"[{section}]")
        lines.append(f"{cfield.key} = {cfield.serialize(cfield.get(cfg))}")
    return "\n".join(lines) + "\n"


def load_run_config(config_path: str | Path | None,
                    namespace=None) -> RunConfig:
    cfg = RunConfig()
    if config_path is not None:
        apply_config_file(cfg, config_path)
    if namespace is not None:
        apply_flag_overrides(cfg, namespace)
    # a shared run seed keeps synthesis and training reproducible together
    cfg.train.seed = cfg.seed
    return cfg.validate()
