"""Two-stage training: supervised pretraining on synthetic triplets, then
unpaired adversarial fine-tuning on real photographs.

Determinism: every iteration derives its batch seed from (run seed,
stage, iteration), so resuming from a checkpoint at iteration k replays
iteration k+1 bitwise. Checkpoint writes are atomic; a crash or a
non-finite loss always leaves the last good checkpoint on disk.
"""

from __future__ import annotations

import hashlib
import json
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.optim import SGD

from .datastore import Manifest, sample_batch, sample_pool
from .errors import CheckpointError, EmptyManifestError, \
    InvalidParameterError, NonFiniteLossError, StageInvariantError
from .network import CHECKPOINT_VERSION, DerainModel, NetworkConfig, \
    atomic_torch_save, batch_to_tensor, init_weights, load_payload
from .objectives import LossValue, Stage, StageObjective, loss_adversarial_d, \
    loss_adversarial_g, loss_background, loss_rain, loss_reconstruction, \
    stage_total

DISCRIMINATOR_PATCH = 224
LOSS_TAIL_LENGTH = 50
MODE_COLLAPSE_ACCURACY = 0.95
MODE_COLLAPSE_PATIENCE = 500

# TrainConfig fields that pin the optimization trajectory; changing any of
# them invalidates a resume. max_iter / finetune_iter / checkpoint_every only
# decide when to stop or snapshot, so they may differ between runs.
TRAJECTORY_FIELDS = ("batch", "patch", "momentum", "weight_decay",
                     "lr_schedule", "finetune_lr", "d_steps_per_g",
                     "d_real_pool", "seed")


@dataclass
class TrainConfig:
    batch: int = 8
    patch: int = 224
    momentum: float = 0.9
    weight_decay: float = 1e-6
    lr_schedule: tuple[tuple[int, float], ...] = ((70_000, 1e-3),
                                                  (100_000, 1e-4))
    max_iter: int = 100_000
    finetune_iter: int = 10_000
    finetune_lr: float = 1e-4
    d_steps_per_g: int = 1
    d_real_pool: str = "clean"  # "clean": rain-free photos only; "all": every real photo
    seed: int = 0
    checkpoint_every: int = 1000

    def validate(self) -> "TrainConfig":
        if self.batch < 1:
            raise InvalidParameterError(f"batch must be >= 1, got {self.batch}")
        if self.patch < 32 or self.patch % 32:
            raise InvalidParameterError(
                f"patch must be a positive multiple of 32, got {self.patch}"
            )
        if not self.lr_schedule:
            raise InvalidParameterError("lr_schedule must not be empty")
        bounds = [b for b, _ in self.lr_schedule]
        if bounds[0] <= 0 or any(b >= c for b, c in zip(bounds, bounds[1:])):
            raise InvalidParameterError(
                f"lr_schedule breakpoints must be positive and increasing, "
                f"got {self.lr_schedule}"
            )
        if any(rate <= 0 for _, rate in self.lr_schedule):
            raise InvalidParameterError("learning rates must be > 0")
        if self.finetune_lr <= 0:
            raise InvalidParameterError("finetune_lr must be > 0")
        if self.d_steps_per_g < 1:
            raise InvalidParameterError("d_steps_per_g must be >= 1")
        if self.d_real_pool not in ("clean", "all"):
            raise InvalidParameterError(
                f"d_real_pool must be 'clean' or 'all', got {self.d_real_pool!r}"
            )
        for name in ("max_iter", "finetune_iter", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise InvalidParameterError(f"{name} must be >= 1")
        return self

    def lr_at(self, iteration: int) -> float:
        """Step-wise rate; each rate applies while iteration < its breakpoint."""
        for bound, rate in self.lr_schedule:
            if iteration < bound:
                return rate
        return self.lr_schedule[-1][1]

    def trajectory_hash(self) -> str:
        payload = {name: getattr(self, name) for name in TRAJECTORY_FIELDS}
        blob = json.dumps(payload, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class Checkpoint:
    iteration: int
    stage: Stage
    model_state: dict
    optimizer_state: dict
    train_config: TrainConfig
    net_config: NetworkConfig
    loss_tail: list[dict] = field(default_factory=list)
    d_optimizer_state: dict | None = None
    torch_rng: torch.Tensor | None = None


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_torch_save(
        {
            "format_version": CHECKPOINT_VERSION,
            "net_config": asdict(ckpt.net_config),
            "model_state": ckpt.model_state,
            "stage": ckpt.stage.value,
            "iteration": ckpt.iteration,
            "optimizer_state": ckpt.optimizer_state,
            "d_optimizer_state": ckpt.d_optimizer_state,
            "train_config": asdict(ckpt.train_config),
            "trajectory_hash": ckpt.train_config.trajectory_hash(),
            "loss_tail": ckpt.loss_tail,
            "torch_rng": ckpt.torch_rng,
        },
        path,
    )


def load_checkpoint(path) -> Checkpoint:
    payload = load_payload(path)
    raw_train = payload["train_config"]
    train_cfg = TrainConfig(**{
        k: _as_schedule(v) if k == "lr_schedule" else v
        for k, v in raw_train.items()
    })
    raw_net = payload["net_config"]
    net_cfg = NetworkConfig(**{
        k: tuple(v) if isinstance(v, (list, tuple)) else v
        for k, v in raw_net.items()
    })
    return Checkpoint(
        iteration=payload["iteration"],
        stage=Stage(payload["stage"]),
        model_state=payload["model_state"],
        optimizer_state=payload["optimizer_state"],
        d_optimizer_state=payload.get("d_optimizer_state"),
        train_config=train_cfg,
        net_config=net_cfg,
        loss_tail=payload.get("loss_tail", []),
        torch_rng=payload.get("torch_rng"),
    )


def _as_schedule(value) -> tuple[tuple[int, float], ...]:
    return tuple((int(b), float(r)) for b, r in value)


class TrainLog:
    """Append-only JSONL log; buffered, flushed at checkpoint boundaries."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a")

    def append(self, record: dict) -> None:
        self._fh.write(json.dumps(record) + "\n")

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def log_iteration(log: TrainLog | None, iteration: int, stage: Stage,
                  value: LossValue, weights: dict[str, float], lr: float,
                  ms_per_iter: float, extra: dict | None = None) -> dict:
    record = {
        "iteration": iteration,
        "stage": stage.value,
        "lr": lr,
        "weights": {k: w for k, w in weights.items() if k in value.components},
        "components": {k: float(v.detach()) for k, v in value.components.items()},
        "total": float(value.total.detach()),
        "ms_per_iter": ms_per_iter,
    }
    if extra:
        record.update(extra)
    if log is not None:
        log.append(record)
    return record


def _stage_key(stage: str) -> int:
    return int.from_bytes(hashlib.sha256(stage.encode()).digest()[:4], "big")


def batch_seed(seed: int, stage: str, iteration: int, sub: int = 0) -> int:
    """Deterministic per-iteration seed; independent of how we got to it."""
    ss = np.random.SeedSequence(entropy=seed,
                                spawn_key=(_stage_key(stage), iteration, sub))
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (2 ** 63))


def _param_groups(modules, lr: float, momentum: float, weight_decay: float):
    """L2 decay on conv weights only; biases are left undecayed."""
    decayed, plain = [], []
    for module in modules:
        for name, p in module.named_parameters():
            if not p.requires_grad:
                continue
            (plain if name.endswith("bias") else decayed).append(p)
    return [
        {"params": decayed, "weight_decay": weight_decay},
        {"params": plain, "weight_decay": 0.0},
    ], {"lr": lr, "momentum": momentum}


def _require_finite(value: torch.Tensor, iteration: int, latest_path) -> None:
    if not torch.isfinite(value).all():
        raise NonFiniteLossError(
            f"non-finite loss at iteration {iteration}; last good checkpoint: "
            f"{latest_path if latest_path else 'none written yet'}"
        )


def _check_resume(ckpt: Checkpoint, cfg: TrainConfig, stage: Stage,
                  net_cfg: NetworkConfig | None) -> None:
    if ckpt.stage is not stage:
        raise CheckpointError(
            f"cannot resume {stage.value} from a {ckpt.stage.value} checkpoint"
        )
    if ckpt.train_config.trajectory_hash() != cfg.trajectory_hash():
        raise CheckpointError(
            "resume config changes the optimization trajectory; fields "
            f"{TRAJECTORY_FIELDS} must match the checkpoint"
        )
    if net_cfg is not None and ckpt.net_config != net_cfg:
        raise CheckpointError("resume network config does not match checkpoint")


def pretrain(paired: Manifest, cfg: TrainConfig,
             net_cfg: NetworkConfig | None = None,
             out_dir: str | Path = "runs/pretrain",
             objective: StageObjective | None = None,
             resume: str | Path | None = None,
             device: str = "cpu") -> Checkpoint:
    """Supervised stage: minimize the weighted layer and reconstruction
    losses over random triplet crops for cfg.max_iter SGD steps."""
    cfg.validate()
    objective = objective or StageObjective.pretrain_default()
    if objective.stage is not Stage.PRETRAIN:
        raise StageInvariantError("pretrain needs a PRETRAIN objective")
    if not paired.entries:
        raise EmptyManifestError("paired manifest has no entries")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    latest = out_dir / "pretrain_latest.pt"

    start = 0
    tail: list[dict] = []
    if resume is not None:
        ckpt = load_checkpoint(resume)
        _check_resume(ckpt, cfg, Stage.PRETRAIN, net_cfg)
        net_cfg = ckpt.net_config
        model = DerainModel(net_cfg).to(device)
        model.load_state_dict(ckpt.model_state)
        groups, defaults = _param_groups(
            [model.encoder, model.background_decoder, model.rain_decoder,
             model.composer],
            cfg.lr_at(ckpt.iteration), cfg.momentum, cfg.weight_decay)
        opt = SGD(groups, **defaults)
        opt.load_state_dict(ckpt.optimizer_state)
        if ckpt.torch_rng is not None:
            torch.set_rng_state(ckpt.torch_rng)
        start = ckpt.iteration
        tail = list(ckpt.loss_tail)
    else:
        net_cfg = net_cfg or NetworkConfig()
        model = init_weights(DerainModel(net_cfg), seed=cfg.seed).to(device)
        groups, defaults = _param_groups(
            [model.encoder, model.background_decoder, model.rain_decoder,
             model.composer],
            cfg.lr_at(0), cfg.momentum, cfg.weight_decay)
        opt = SGD(groups, **defaults)

    model.train()
    saved_any = latest.exists()
    with TrainLog(out_dir / "pretrain_log.jsonl") as log:
        for i in range(start, cfg.max_iter):
            t0 = time.perf_counter()
            lr = cfg.lr_at(i)
            for group in opt.param_groups:
                group["lr"] = lr

            batch = sample_batch(paired, cfg.batch, cfg.patch,
                                 batch_seed(cfg.seed, "pretrain", i))
            rainy = batch_to_tensor(batch.rainy).to(device)
            bg = batch_to_tensor(batch.background).to(device)
            rain = batch_to_tensor(batch.rain).to(device)

            b_hat, r_hat, o_hat = model.forward_full(rainy)
            value = stage_total(objective, {
                "background": loss_background(b_hat, bg, objective.reduction),
                "rain": loss_rain(r_hat, rain, objective.reduction),
                "reconstruction": loss_reconstruction(o_hat, rainy,
                                                      objective.reduction),
            })
            _require_finite(value.total, i, latest if saved_any else None)

            opt.zero_grad()
            value.total.backward()
            opt.step()

            record = log_iteration(
                log, i, Stage.PRETRAIN, value, objective.weights, lr,
                (time.perf_counter() - t0) * 1000.0)
            tail.append(record)
            del tail[:-LOSS_TAIL_LENGTH]

            done = i + 1
            if done % cfg.checkpoint_every == 0 or done == cfg.max_iter:
                ckpt = Checkpoint(
                    iteration=done, stage=Stage.PRETRAIN,
                    model_state=model.state_dict(),
                    optimizer_state=opt.state_dict(),
                    train_config=cfg, net_config=net_cfg,
                    loss_tail=list(tail), torch_rng=torch.get_rng_state())
                save_checkpoint(latest, ckpt)
                saved_any = True
                log.flush()
    return ckpt


def _real_pool(cfg: TrainConfig, real_rainy: Manifest,
               real_clean: Manifest) -> list[Manifest]:
    if cfg.d_real_pool == "all":
        return [real_clean, real_rainy]
    return [real_clean]


def _d_accuracy(d_real: torch.Tensor, d_fake: torch.Tensor) -> float:
    right = (d_real > 0.5).float().mean() + (d_fake <= 0.5).float().mean()
    return float(right) / 2.0


def finetune(pretrained: str | Path | Checkpoint, real_rainy: Manifest,
             real_clean: Manifest, cfg: TrainConfig,
             out_dir: str | Path = "runs/finetune",
             objective: StageObjective | None = None,
             resume: str | Path | None = None,
             device: str = "cpu") -> Checkpoint:
    """Adversarial stage: alternate d_steps_per_g discriminator updates with
    one update of the background branch (encoder + background decoder) and
    the recomposition block. The rain decoder stays frozen.
    """
    cfg.validate()
    if cfg.patch != DISCRIMINATOR_PATCH:
        raise InvalidParameterError(
            f"fine-tune patch must equal the discriminator input size "
            f"{DISCRIMINATOR_PATCH}, got {cfg.patch}"
        )
    objective = objective or StageObjective.finetune_default()
    if objective.stage is not Stage.FINETUNE:
        raise StageInvariantError("finetune needs a FINETUNE objective")
    for name, manifest in (("real_rainy", real_rainy), ("real_clean", real_clean)):
        if not manifest.entries:
            raise EmptyManifestError(f"{name} manifest has no entries")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    latest = out_dir / "finetune_latest.pt"

    if resume is not None:
        ckpt = load_checkpoint(resume)
        _check_resume(ckpt, cfg, Stage.FINETUNE, None)
    else:
        ckpt = (pretrained if isinstance(pretrained, Checkpoint)
                else load_checkpoint(pretrained))
        if ckpt.stage is not Stage.PRETRAIN:
            raise CheckpointError(
                f"fine-tuning starts from a pretrain checkpoint, got "
                f"{ckpt.stage.value}"
            )

    net_cfg = ckpt.net_config
    model = DerainModel(net_cfg).to(device)
    model.load_state_dict(ckpt.model_state)
    model.rain_decoder.requires_grad_(False)

    g_groups, g_defaults = _param_groups(
        [model.encoder, model.background_decoder, model.composer],
        cfg.finetune_lr, cfg.momentum, cfg.weight_decay)
    g_opt = SGD(g_groups, **g_defaults)
    d_groups, d_defaults = _param_groups(
        [model.discriminator], cfg.finetune_lr, cfg.momentum, cfg.weight_decay)
    d_opt = SGD(d_groups, **d_defaults)

    start = 0
    tail: list[dict] = []
    if resume is not None:
        g_opt.load_state_dict(ckpt.optimizer_state)
        if ckpt.d_optimizer_state is not None:
            d_opt.load_state_dict(ckpt.d_optimizer_state)
        if ckpt.torch_rng is not None:
            torch.set_rng_state(ckpt.torch_rng)
        start = ckpt.iteration
        tail = list(ckpt.loss_tail)

    pool = _real_pool(cfg, real_rainy, real_clean)
    collapse_run = 0
    warned_collapse = False
    model.train()
    saved_any = latest.exists()
    with TrainLog(out_dir / "finetune_log.jsonl") as log:
        for i in range(start, cfg.finetune_iter):
            t0 = time.perf_counter()

            d_losses, accs = [], []
            for sub in range(cfg.d_steps_per_g):
                real = sample_pool(pool, cfg.batch, cfg.patch,
                                   batch_seed(cfg.seed, "ft-real", i, sub))
                rainy = sample_batch(
                    real_rainy, cfg.batch, cfg.patch,
                    batch_seed(cfg.seed, "ft-fake", i, sub)).rainy
                real_t = batch_to_tensor(real).to(device)
                rainy_t = batch_to_tensor(rainy).to(device)
                with torch.no_grad():
                    fake = model.derain(rainy_t)
                d_real = model.discriminate(real_t)
                d_fake = model.discriminate(fake)
                d_loss = loss_adversarial_d(d_real, d_fake)
                _require_finite(d_loss, i, latest if saved_any else None)
                d_opt.zero_grad()
                d_loss.backward()
                d_opt.step()
                d_losses.append(float(d_loss.detach()))
                accs.append(_d_accuracy(d_real, d_fake))

            acc = sum(accs) / len(accs)
            collapse_run = collapse_run + 1 if acc > MODE_COLLAPSE_ACCURACY else 0
            if collapse_run >= MODE_COLLAPSE_PATIENCE and not warned_collapse:
                warnings.warn(
                    f"discriminator accuracy stayed above "
                    f"{MODE_COLLAPSE_ACCURACY} for {collapse_run} iterations; "
                    f"possible mode collapse", stacklevel=2)
                warned_collapse = True

            rainy = sample_batch(real_rainy, cfg.batch, cfg.patch,
                                 batch_seed(cfg.seed, "ft-g", i)).rainy
            rainy_t = batch_to_tensor(rainy).to(device)
            feats = model.encode(rainy_t)
            b_hat, taps = model.decode_background(feats)
            r_hat = model.decode_rain(feats, taps)
            o_hat = model.compose(b_hat, r_hat)
            components = {
                "reconstruction": loss_reconstruction(o_hat, rainy_t,
                                                      objective.reduction),
            }
            if objective.lambda_adversarial > 0:
                components["adversarial"] = loss_adversarial_g(
                    model.discriminate(b_hat), objective.adversarial_variant)
            value = stage_total(objective, components)
            _require_finite(value.total, i, latest if saved_any else None)
            g_opt.zero_grad()
            value.total.backward()
            g_opt.step()

            record = log_iteration(
                log, i, Stage.FINETUNE, value, objective.weights,
                cfg.finetune_lr, (time.perf_counter() - t0) * 1000.0,
                extra={"d_loss": sum(d_losses) / len(d_losses),
                       "d_accuracy": acc})
            tail.append(record)
            del tail[:-LOSS_TAIL_LENGTH]

            done = i + 1
            if done % cfg.checkpoint_every == 0 or done == cfg.finetune_iter:
                ckpt = Checkpoint(
                    iteration=done, stage=Stage.FINETUNE,
                    model_state=model.state_dict(),
                    optimizer_state=g_opt.state_dict(),
                    d_optimizer_state=d_opt.state_dict(),
                    train_config=cfg, net_config=net_cfg,
                    loss_tail=list(tail), torch_rng=torch.get_rng_state())
                save_checkpoint(latest, ckpt)
                saved_any = True
                log.flush()
    return ckpt
