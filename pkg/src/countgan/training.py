"""Adversarial training with an auxiliary count-regression loss.

One training step is a discriminator update followed by a generator update.
The discriminator minimises ``-[log D(x) + log(1 - D(G(z, c)))]`` plus
``lambda * ||C(x) - c||`` on real images; the generator minimises
``-log D(G(z, c))`` plus ``lambda * ||C(G(z, c)) - c||``.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from .datasets.core import DatasetManifest, atomic_write_text, load_manifest_arrays
from .errors import DomainError, InvalidConfig, LengthMismatch, NonFiniteLoss
from .models import CountPredictor, Discriminator, Generator, ModelConfig, init_params, params_hash

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    count_loss_weight: float = 0.7
    latent_dim: int = 64
    seed: int = 0
    count_loss_enabled: bool = True
    weight_sharing_enabled: bool = True
    per_layer_count_injection: bool = True
    backbone_kind: str = "dense"
    generator_norm: str = "pixel"
    fake_count_loss_trains_discriminator: bool = False
    logit_clamp: float = 1e-7
    # False switches the generator to the literal log(1 - D(G(z))) objective
    non_saturating: bool = True
    growth_rate: int = 64
    base_channels: int = 64
    disc_channels: tuple[int, ...] = (64, 128, 256, 256)
    checkpoint_every: int = 0
    # decay of an exponential moving average of generator weights used for sampling; 0 disables it
    generator_ema: float = 0.0

    def __post_init__(self):
        self.disc_channels = tuple(int(c) for c in self.disc_channels)
        self.validate()

    def validate(self) -> None:
        if self.count_loss_weight < 0:
            raise InvalidConfig("count_loss_weight (lambda) must be >= 0")
        if self.learning_rate <= 0:
            raise InvalidConfig("learning_rate must be > 0")
        if not 0 < self.logit_clamp < 0.5:
            raise InvalidConfig("logit_clamp must be in (0, 0.5)")
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidConfig("epochs must be >= 0 and batch_size >= 1")
        if not 0 <= self.generator_ema < 1:
            raise InvalidConfig("generator_ema must be in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def model_config(self, num_classes: int, resolution: int, channels: int, max_count: int) -> ModelConfig:
        return ModelConfig(
            num_classes=num_classes, resolution=resolution, channels=channels, max_count=max_count,
            latent_dim=self.latent_dim, growth_rate=self.growth_rate, base_channels=self.base_channels,
            backbone_kind=self.backbone_kind, per_layer_count_injection=self.per_layer_count_injection,
            generator_norm=self.generator_norm, disc_channels=self.disc_channels, weight_sharing=self.weight_sharing_enabled,
        )

    def model_config_for(self, manifest: DatasetManifest) -> ModelConfig:
        h, w, c = manifest.resolution
        if h != w:
            raise InvalidConfig(f"square images required, got {h}x{w}")
        return self.model_config(manifest.num_classes, h, c, manifest.max_count)


def check_compatible(config: TrainConfig, model_config: ModelConfig) -> None:
    pairs = [
        ("latent_dim", config.latent_dim, model_config.latent_dim),
        ("backbone_kind", config.backbone_kind, model_config.backbone_kind),
        ("per_layer_count_injection", config.per_layer_count_injection,
         model_config.per_layer_count_injection),
        ("weight_sharing", config.weight_sharing_enabled, model_config.weight_sharing),
    ]
    for name, a, b in pairs:
        if a != b:
            raise InvalidConfig(f"{name} mismatch: train config has {a!r}, model config has {b!r}")


# --------------------------------------------------------------------------- losses

def clamp_probs(logits: torch.Tensor, eps: float) -> torch.Tensor:
    return torch.sigmoid(logits).clamp(eps, 1.0 - eps)


def gan_loss(d_real_prob, d_fake_prob, non_saturating: bool = True):
    """Discriminator and generator adversarial objectives, averaged over the batch.

    Inputs are probabilities already clamped into (0, 1). Works on floats or tensors.
    """
    real = torch.as_tensor(d_real_prob, dtype=torch.float64) if not torch.is_tensor(d_real_prob) else d_real_prob
    fake = torch.as_tensor(d_fake_prob, dtype=torch.float64) if not torch.is_tensor(d_fake_prob) else d_fake_prob
    for name, p in (("d_real_prob", real), ("d_fake_prob", fake)):
        if not bool(torch.all((p > 0) & (p < 1))):
            raise DomainError(f"{name} must lie strictly inside (0, 1)")
    d_obj = -(torch.log(real).mean() + torch.log1p(-fake).mean())
    if non_saturating:
        g_obj = -torch.log(fake).mean()
    else:
        g_obj = torch.log1p(-fake).mean()
    return d_obj, g_obj


def count_loss(prediction, target) -> torch.Tensor:
    """Euclidean distance between predicted and target count vectors (batch mean)."""
    pred = torch.as_tensor(prediction, dtype=torch.float64) if not torch.is_tensor(prediction) else prediction
    tgt = torch.as_tensor(target, dtype=pred.dtype) if not torch.is_tensor(target) else target.to(pred.dtype)
    if pred.shape != tgt.shape:
        raise LengthMismatch(f"prediction {tuple(pred.shape)} vs target {tuple(tgt.shape)}")
    if pred.ndim == 1:
        return torch.linalg.vector_norm(pred - tgt)
    return torch.linalg.vector_norm(pred - tgt, dim=-1).mean()


def total_loss(gan_term, count_term, lam: float):
    if lam < 0:
        raise InvalidConfig("lambda must be >= 0")
    return gan_term + lam * count_term


# --------------------------------------------------------------------------- state

@dataclass
class StepMetrics:
    step: int
    d_loss: float
    g_loss: float
    count_loss_real: float
    count_loss_fake: float
    total_loss: float

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class GanState:
    """Everything needed to continue training: networks, optimizers, RNG, progress."""

    config: TrainConfig
    model_config: ModelConfig
    generator: Generator
    discriminator: Discriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    rng: torch.Generator
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)
    generator_ema: Generator | None = None

    @classmethod
    def create(cls, config: TrainConfig, model_config: ModelConfig) -> "GanState":
        check_compatible(config, model_config)
        g, d = init_params(model_config, config.seed)
        betas = (config.beta1, config.beta2)
        ema = None
        if config.generator_ema > 0:
            ema = copy.deepcopy(g).requires_grad_(False)
        return cls(
            config=config, model_config=model_config, generator=g, discriminator=d,
            opt_g=torch.optim.Adam(g.parameters(), lr=config.learning_rate, betas=betas),
            opt_d=torch.optim.Adam(d.parameters(), lr=config.learning_rate, betas=betas),
            # offset keeps the data/noise stream distinct from the init stream
            rng=torch.Generator().manual_seed(int(config.seed) + 1),
            generator_ema=ema,
        )

    @property
    def sampler(self) -> Generator:
        """The generator used for sampling: the weight average when enabled."""
        return self.generator if self.generator_ema is None else self.generator_ema

    @torch.no_grad()
    def update_ema(self) -> None:
        if self.generator_ema is None:
            return
        w = 1.0 - self.config.generator_ema
        for avg, cur in zip(self.generator_ema.parameters(), self.generator.parameters()):
            avg.lerp_(cur, w)
        # normalization statistics are copied, not averaged
        for avg, cur in zip(self.generator_ema.buffers(), self.generator.buffers()):
            avg.copy_(cur)

    def save(self, path) -> Path:
        """Write ``<path>.pt`` and a ``<path>.json`` sidecar; returns the .pt path."""
        path = Path(path).with_suffix("")
        path.parent.mkdir(parents=True, exist_ok=True)
        blob = {
            "schema_version": SCHEMA_VERSION,
            "generator": self.generator.state_dict(),
            "discriminator": self.discriminator.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "rng": self.rng.get_state(),
            "epoch": self.epoch,
            "step": self.step,
            "history": self.history,
        }
        if self.generator_ema is not None:
            blob["generator_ema"] = self.generator_ema.state_dict()
        tmp = path.with_suffix(".pt.tmp")
        torch.save(blob, tmp)
        tmp.replace(path.with_suffix(".pt"))
        last = self.history[-1] if self.history else {}
        sidecar = {
            "schema_version": SCHEMA_VERSION,
            "train_config": self.config.to_dict(),
            "model_config": self.model_config.to_dict(),
            "config_hash": self.config.hash(),
            "epoch": self.epoch,
            "step": self.step,
            "generator_hash": params_hash(self.generator),
            "metrics": last,
        }
        atomic_write_text(path.with_suffix(".json"), json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
        return path.with_suffix(".pt")

    @classmethod
    def load(cls, path) -> "GanState":
        path = Path(path).with_suffix("")
        meta = json.loads(path.with_suffix(".json").read_text())
        if meta["schema_version"] != SCHEMA_VERSION:
            raise InvalidConfig(f"unsupported checkpoint schema {meta['schema_version']}")
        state = cls.create(TrainConfig.from_dict(meta["train_config"]),
                           ModelConfig.from_dict(meta["model_config"]))
        blob = torch.load(path.with_suffix(".pt"), weights_only=False)
        state.generator.load_state_dict(blob["generator"])
        state.discriminator.load_state_dict(blob["discriminator"])
        state.opt_g.load_state_dict(blob["opt_g"])
        state.opt_d.load_state_dict(blob["opt_d"])
        state.rng.set_state(blob["rng"])
        state.epoch, state.step = blob["epoch"], blob["step"]
        state.history = list(blob.get("history", []))
        if state.generator_ema is not None:
            state.generator_ema.load_state_dict(blob["generator_ema"])
        return state


Checkpoint = GanState


# --------------------------------------------------------------------------- steps

def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """uint8 (N, H, W, C) -> float32 (N, C, H, W) in [-1, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float()
    return x / 127.5 - 1.0


def tensor_to_images(x: torch.Tensor) -> np.ndarray:
    x = ((x.detach().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return x.permute(0, 2, 3, 1).cpu().numpy()


def _finite(name, value: torch.Tensor):
    if not torch.isfinite(value).all():
        raise NonFiniteLoss(name, float(value.detach()) if value.numel() == 1 else None)


def discriminator_objective(D: Discriminator, cfg: TrainConfig, real_images: torch.Tensor,
                            real_counts: torch.Tensor, fake: torch.Tensor, c: torch.Tensor):
    """Discriminator objective and its logged parts ``(objective, adv, count_real)``.

    ``fake`` should be detached from the generator graph; ``c`` is its conditioning.
    """
    eps, lam = cfg.logit_clamp, cfg.count_loss_weight
    logit_real, count_real = D(real_images)
    logit_fake, count_fake = D(fake)
    adv, _ = gan_loss(clamp_probs(logit_real, eps), clamp_probs(logit_fake, eps))
    obj = adv
    cl_real = torch.zeros((), dtype=real_images.dtype)
    if cfg.count_loss_enabled:
        cl_real = count_loss(count_real, real_counts)
        obj = obj + lam * cl_real
        if cfg.fake_count_loss_trains_discriminator:
            obj = obj + lam * count_loss(count_fake, c)
    return obj, adv, cl_real


def generator_objective(D: Discriminator, cfg: TrainConfig, fake: torch.Tensor, c: torch.Tensor):
    """Generator objective on ``fake = G(z, c)`` and its logged parts ``(objective, adv, count_fake)``."""
    eps, lam = cfg.logit_clamp, cfg.count_loss_weight
    logit_fake, count_fake = D(fake)
    p_fake = clamp_probs(logit_fake, eps)
    # the real term does not depend on G; a constant 1/2 keeps gan_loss's domain check happy
    _, adv = gan_loss(torch.full_like(p_fake, 0.5), p_fake, cfg.non_saturating)
    obj = adv
    cl_fake = torch.zeros((), dtype=fake.dtype)
    if cfg.count_loss_enabled:
        cl_fake = count_loss(count_fake, c)
        obj = obj + lam * cl_fake
    return obj, adv, cl_fake


def train_step(state: GanState, real_images: torch.Tensor, real_counts: torch.Tensor,
               cond_pool: torch.Tensor) -> StepMetrics:
    """One discriminator update, then one generator update, in place on ``state``.

    ``cond_pool`` holds the training set's count vectors; conditioning counts
    for fakes are drawn from it uniformly by row.
    """
    cfg = state.config
    G, D = state.generator, state.discriminator
    lam = cfg.count_loss_weight
    b = real_images.shape[0]
    z = torch.randn(b, cfg.latent_dim, generator=state.rng, dtype=real_images.dtype)
    idx = torch.randint(len(cond_pool), (b,), generator=state.rng)
    c = cond_pool[idx].to(real_images.dtype)
    real_counts = real_counts.to(real_images.dtype)

    # one generator pass serves both updates; G is unchanged by the D step
    fake = G(z, c)
    for p in D.parameters():
        p.requires_grad_(True)
    d_obj, d_adv, cl_real = discriminator_objective(D, cfg, real_images, real_counts, fake.detach(), c)
    _finite("d_loss", d_adv)
    _finite("count_loss_real", cl_real)
    state.opt_d.zero_grad(set_to_none=True)
    d_obj.backward()
    state.opt_d.step()

    # gradients flow through D but only G is stepped
    for p in D.parameters():
        p.requires_grad_(False)
    g_obj, g_adv, cl_fake = generator_objective(D, cfg, fake, c)
    _finite("g_loss", g_adv)
    _finite("count_loss_fake", cl_fake)
    state.opt_g.zero_grad(set_to_none=True)
    g_obj.backward()
    state.opt_g.step()
    state.update_ema()
    for p in D.parameters():
        p.requires_grad_(True)

    state.step += 1
    d_val = float(d_adv.detach())
    cr, cf = float(cl_real.detach()), float(cl_fake.detach())
    return StepMetrics(
        step=state.step, d_loss=d_val, g_loss=float(g_adv.detach()),
        count_loss_real=cr, count_loss_fake=cf, total_loss=float(total_loss(d_val, cr + cf, lam)),
    )


# --------------------------------------------------------------------------- loop

class Callback:
    def on_step(self, state: GanState, metrics: StepMetrics) -> None:
        pass

    def on_epoch_end(self, state: GanState, summary: dict) -> None:
        pass


class MetricsLogger(Callback):
    """Appends one JSON record per step and per epoch."""

    def __init__(self, path, every: int = 1):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.every = every

    def _write(self, rec):
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def on_step(self, state, metrics):
        if metrics.step % self.every == 0:
            self._write({"type": "step", "epoch": state.epoch, **metrics.to_dict()})

    def on_epoch_end(self, state, summary):
        self._write({"type": "epoch", **summary})


def load_training_data(manifest: DatasetManifest) -> tuple[torch.Tensor, torch.Tensor]:
    images, counts = load_manifest_arrays(manifest)
    return images_to_tensor(images), torch.from_numpy(counts).float()


def train(manifest: DatasetManifest, config: TrainConfig, callbacks: Iterable[Callback] = (),
          out_dir=None, state: GanState | None = None,
          data: tuple[torch.Tensor, torch.Tensor] | None = None) -> GanState:
    """Train (or continue training ``state``) until ``config.epochs`` epochs are done.

    ``data`` may carry preloaded (images, counts) tensors for ``manifest``.
    With ``out_dir``, a checkpoint is written every ``checkpoint_every``
    epochs and at the end as ``out_dir/checkpoint.pt``.
    """
    if len(manifest) == 0:
        raise InvalidConfig("cannot train on an empty manifest")
    images, counts = data if data is not None else load_training_data(manifest)
    if state is None:
        state = GanState.create(config, config.model_config_for(manifest))
    else:
        # resuming: only the epoch budget may change
        state.config = dataclasses.replace(state.config, epochs=config.epochs)
    callbacks = list(callbacks)
    cond_pool = counts
    n = len(images)
    bs = state.config.batch_size
    while state.epoch < state.config.epochs:
        perm = torch.randperm(n, generator=state.rng)
        sums = np.zeros(5)
        steps = 0
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            m = train_step(state, images[idx], counts[idx], cond_pool)
            sums += [m.d_loss, m.g_loss, m.count_loss_real, m.count_loss_fake, m.total_loss]
            steps += 1
            for cb in callbacks:
                cb.on_step(state, m)
        state.epoch += 1
        means = sums / steps
        summary = {"epoch": state.epoch, "step": state.step,
                   **dict(zip(["d_loss", "g_loss", "count_loss_real", "count_loss_fake", "total_loss"],
                              [float(v) for v in means]))}
        state.history.append(summary)
        log.info("epoch %d: %s", state.epoch, summary)
        for cb in callbacks:
            cb.on_epoch_end(state, summary)
        every = state.config.checkpoint_every
        if out_dir is not None and every and state.epoch % every == 0:
            state.save(Path(out_dir) / f"checkpoint_epoch{state.epoch:04d}")
    if out_dir is not None:
        state.save(Path(out_dir) / "checkpoint")
    return state


@torch.no_grad()
def predict_counts(fn: Callable[[torch.Tensor], torch.Tensor], images: torch.Tensor,
                   batch_size: int = 256) -> torch.Tensor:
    outs = [fn(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    return torch.cat(outs) if outs else torch.empty(0)


def count_head(discriminator: Discriminator) -> Callable[[torch.Tensor], torch.Tensor]:
    return lambda x: discriminator(x)[1]


@torch.no_grad()
def generate(generator: Generator, counts: torch.Tensor, seed: int, batch_size: int = 256) -> torch.Tensor:
    """Images for each row of ``counts``; noise comes from a generator seeded with ``seed``."""
    rng = torch.Generator().manual_seed(int(seed))
    counts = torch.as_tensor(counts, dtype=torch.float32)
    z = torch.randn(len(counts), generator.config.latent_dim, generator=rng)
    outs = [generator(z[i:i + batch_size], counts[i:i + batch_size])
            for i in range(0, len(counts), batch_size)]
    return torch.cat(outs)


# --------------------------------------------------------------------------- count predictor

@dataclass
class PredictorConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    channels: tuple[int, ...] = (32, 64, 128, 64)
    dropout: float = 0.3
    leaky_slope: float = 0.2
    steps: int = 0  # when > 0, a fixed optimizer-step budget replaces ``epochs``

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.learning_rate <= 0 or self.epochs < 0 or self.batch_size < 1 or self.steps < 0:
            raise InvalidConfig("bad predictor training config")

    def to_dict(self):
        return dataclasses.asdict(self)

    def model_config(self, num_classes, resolution, channels, max_count) -> ModelConfig:
        return ModelConfig(num_classes=num_classes, resolution=resolution, channels=channels,
                           max_count=max_count, predictor_channels=self.channels,
                           dropout=self.dropout, leaky_slope=self.leaky_slope)


def train_count_predictor(images: torch.Tensor, counts: torch.Tensor, config: PredictorConfig,
                          max_count: int, predictor: CountPredictor | None = None) -> CountPredictor:
    """Fit a count regressor with squared-error loss and Adam.

    ``images`` are (N, C, H, W) in [-1, 1]; ``counts`` are (N, n) raw counts.
    """
    n, ch, res, _ = images.shape
    if n == 0 or len(counts) != n:
        raise LengthMismatch(f"{n} images vs {len(counts)} count rows")
    if predictor is None:
        mc = config.model_config(counts.shape[1], res, ch, max_count)
        predictor = init_params(mc, config.seed, kind="predictor")
    rng = torch.Generator().manual_seed(int(config.seed) + 1)
    opt = torch.optim.Adam(predictor.parameters(), lr=config.learning_rate)
    counts = counts.float()
    budget = config.steps if config.steps > 0 else config.epochs * -(-n // config.batch_size)
    done = 0
    while done < budget:
        perm = torch.randperm(n, generator=rng)
        for start in range(0, n, config.batch_size):
            if done == budget:
                break
            done += 1
            idx = perm[start:start + config.batch_size]
            pred = predictor(images[idx], mode="train", generator=rng)
            loss = torch.mean((pred - counts[idx]) ** 2)
            _finite("predictor_loss", loss)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    predictor.eval()
    return predictor


__all__ = [
    "TrainConfig", "StepMetrics", "GanState", "Checkpoint", "Callback", "MetricsLogger",
    "gan_loss", "count_loss", "total_loss", "clamp_probs", "train_step", "train", "generate",
    "predict_counts", "count_head", "load_training_data", "images_to_tensor", "tensor_to_images",
    "check_compatible", "PredictorConfig", "train_count_predictor",
]
