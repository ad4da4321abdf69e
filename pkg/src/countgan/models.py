"""Count-conditioned generator, weight-shared discriminator and count predictor.

Images are tensors of shape (B, C, H, W) with values in [-1, 1]. Count
vectors enter the generator as raw counts and are scaled by ``max_count``
before being used as conditioning input.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidConfig, ShapeMismatch

SCHEMA_VERSION = 1
BACKBONES = ("dense", "plain")
GENERATOR_NORMS = ("pixel", "batch", "none")


@dataclass
class ModelConfig:
    num_classes: int
    resolution: int = 32
    channels: int = 1
    max_count: int = 2
    latent_dim: int = 64
    growth_rate: int = 64
    base_channels: int = 64
    backbone_kind: str = "dense"
    per_layer_count_injection: bool = True
    generator_norm: str = "pixel"
    disc_channels: tuple[int, ...] = (64, 128, 256, 256)
    weight_sharing: bool = True
    predictor_channels: tuple[int, ...] = (32, 64, 128, 64)
    leaky_slope: float = 0.2
    dropout: float = 0.3

    def __post_init__(self):
        self.disc_channels = tuple(int(c) for c in self.disc_channels)
        self.predictor_channels = tuple(int(c) for c in self.predictor_channels)
        self.validate()

    def validate(self) -> None:
        r = self.resolution
        if r < 8 or r & (r - 1):
            raise InvalidConfig(f"resolution must be a power of two >= 8, got {r}")
        if self.num_classes < 1 or self.max_count < 1:
            raise InvalidConfig("num_classes and max_count must be >= 1")
        if self.channels not in (1, 3):
            raise InvalidConfig(f"channels must be 1 or 3, got {self.channels}")
        if min(self.latent_dim, self.growth_rate, self.base_channels) < 1:
            raise InvalidConfig("latent_dim, growth_rate and base_channels must be positive")
        if self.backbone_kind not in BACKBONES:
            raise InvalidConfig(f"backbone_kind must be one of {BACKBONES}")
        if self.generator_norm not in GENERATOR_NORMS:
            raise InvalidConfig(f"generator_norm must be one of {GENERATOR_NORMS}")
        if len(self.disc_channels) != 4 or len(self.predictor_channels) != 4:
            raise InvalidConfig("discriminator and predictor have exactly four conv layers")
        if not 0 <= self.dropout < 1:
            raise InvalidConfig("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _init_weights(module: nn.Module, generator: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            with torch.no_grad():
                m.weight.normal_(0.0, 0.02, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


def _count_channels(c: torch.Tensor, size: int) -> torch.Tensor:
    return c[:, :, None, None].expand(-1, -1, size, size)


class PixelNorm(nn.Module):
    """Scale each pixel's feature vector to unit RMS; per-sample, no parameters."""

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + 1e-8)


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "pixel":
        return PixelNorm()
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    return nn.Identity()


class DenseBlock(nn.Module):
    """Three 3x3 conv layers.

    Dense: layer k sees the block input concatenated with all earlier layer
    outputs and the block emits everything concatenated. Plain: layers are
    chained and the block emits the last output.
    """

    def __init__(self, in_channels: int, growth_rate: int, kind: str = "dense", depth: int = 3,
                 norm: str = "none"):
        super().__init__()
        self.kind = kind
        if kind == "dense":
            self.layer_input_channels = [in_channels + k * growth_rate for k in range(depth)]
            self.out_channels = in_channels + depth * growth_rate
        else:
            self.layer_input_channels = [in_channels] + [growth_rate] * (depth - 1)
            self.out_channels = growth_rate
        self.layers = nn.ModuleList(
            nn.Conv2d(cin, growth_rate, 3, padding=1) for cin in self.layer_input_channels)
        self.norms = nn.ModuleList(_norm(norm, growth_rate) for _ in self.layer_input_channels)

    def forward(self, x):
        if self.kind == "dense":
            feats = [x]
            for conv, norm in zip(self.layers, self.norms):
                feats.append(F.relu(norm(conv(torch.cat(feats, dim=1)))))
            return torch.cat(feats, dim=1)
        for conv, norm in zip(self.layers, self.norms):
            x = F.relu(norm(conv(x)))
        return x


class Generator(nn.Module):
    """FC projection, two dense blocks with 1x1 reduction and 2x upsampling, two 3x3 convs."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        n, base = config.num_classes, config.base_channels
        self.start = min(8, config.resolution // 4)
        self.fc = nn.Linear(config.latent_dim + n, base * self.start ** 2)
        inject = n if config.per_layer_count_injection else 0
        self.blocks = nn.ModuleList()
        self.transitions = nn.ModuleList()
        for _ in range(2):
            block = DenseBlock(base + inject, config.growth_rate, config.backbone_kind,
                               norm=config.generator_norm)
            self.blocks.append(block)
            self.transitions.append(nn.Conv2d(block.out_channels, base, 1))
        extra = int(math.log2(config.resolution // (self.start * 4)))
        self.extra = nn.ModuleList(nn.Conv2d(base, base, 3, padding=1) for _ in range(extra))
        self.conv_out1 = nn.Conv2d(base, base, 3, padding=1)
        self.conv_out2 = nn.Conv2d(base, config.channels, 3, padding=1)
        norm = config.generator_norm
        self.fc_norm = _norm(norm, base)
        self.transition_norms = nn.ModuleList(_norm(norm, base) for _ in range(2))
        self.extra_norms = nn.ModuleList(_norm(norm, base) for _ in range(extra))
        self.out_norm = _norm(norm, base)

    def forward(self, z: torch.Tensor, counts: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if z.ndim != 2 or z.shape[1] != cfg.latent_dim:
            raise ShapeMismatch(f"z must be (B, {cfg.latent_dim}), got {tuple(z.shape)}")
        if counts.shape != (z.shape[0], cfg.num_classes):
            raise ShapeMismatch(f"counts must be ({z.shape[0]}, {cfg.num_classes}), got {tuple(counts.shape)}")
        c = counts.to(z.dtype) / cfg.max_count
        h = self.fc(torch.cat([z, c], dim=1))
        h = F.relu(self.fc_norm(h.view(z.shape[0], cfg.base_channels, self.start, self.start)))
        for block, trans, norm in zip(self.blocks, self.transitions, self.transition_norms):
            if cfg.per_layer_count_injection:
                h = torch.cat([h, _count_channels(c, h.shape[-1])], dim=1)
            h = F.relu(norm(trans(block(h))))
            h = F.interpolate(h, scale_factor=2, mode="nearest")
        for conv, norm in zip(self.extra, self.extra_norms):
            h = F.relu(norm(conv(F.interpolate(h, scale_factor=2, mode="nearest"))))
        h = F.relu(self.out_norm(self.conv_out1(h)))
        return torch.tanh(self.conv_out2(h))


def _conv_trunk(channels: int, widths, slope: float) -> nn.Sequential:
    layers = []
    cin = channels
    for i, cout in enumerate(widths):
        # three stride-2 downsamplings, then a 3x3 stride-1 layer
        if i < 3:
            layers.append(nn.Conv2d(cin, cout, 4, stride=2, padding=1))
        else:
            layers.append(nn.Conv2d(cin, cout, 3, stride=1, padding=1))
        layers.append(nn.LeakyReLU(slope))
        cin = cout
    return nn.Sequential(*layers)


class Discriminator(nn.Module):
    """Conv trunk feeding a realness-logit head and a count-regression head.

    With weight sharing both heads read ``self.trunk``; without it the count
    head reads its own ``self.count_trunk``.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.trunk = _conv_trunk(config.channels, config.disc_channels, config.leaky_slope)
        self.count_trunk = None
        if not config.weight_sharing:
            self.count_trunk = _conv_trunk(config.channels, config.disc_channels, config.leaky_slope)
        side = config.resolution // 8
        self.feature_dim = config.disc_channels[-1] * side * side
        self.adv_head = nn.Linear(self.feature_dim, 1)
        self.count_head = nn.Linear(self.feature_dim, config.num_classes)

    def _check(self, x):
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.channels, cfg.resolution, cfg.resolution):
            raise ShapeMismatch(
                f"expected (B, {cfg.channels}, {cfg.resolution}, {cfg.resolution}), got {tuple(x.shape)}")

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        self._check(x)
        h = self.trunk(x).flatten(1)
        hc = h if self.count_trunk is None else self.count_trunk(x).flatten(1)
        return self.adv_head(h).squeeze(1), self.count_head(hc)


def dropout(x: torch.Tensor, p: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """Inverted dropout drawing its mask from ``generator``."""
    if p == 0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= p
    return x * keep / (1.0 - p)


class CountPredictor(nn.Module):
    """Four conv layers with LeakyReLU and dropout, then a linear count regressor.

    The conv stack mirrors the discriminator trunk. ``features`` returns the
    spatially averaged output of the last conv layer, used for Frechet
    distances.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        cin = config.channels
        self.convs = nn.ModuleList()
        for i, cout in enumerate(config.predictor_channels):
            if i < 3:
                self.convs.append(nn.Conv2d(cin, cout, 4, stride=2, padding=1))
            else:
                self.convs.append(nn.Conv2d(cin, cout, 3, stride=1, padding=1))
            cin = cout
        side = config.resolution // 8
        self.feature_dim = cin
        self.fc = nn.Linear(cin * side * side, config.num_classes)

    def trunk(self, x: torch.Tensor, mode: str = "eval",
              generator: torch.Generator | None = None) -> torch.Tensor:
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.channels, cfg.resolution, cfg.resolution):
            raise ShapeMismatch(
                f"expected (B, {cfg.channels}, {cfg.resolution}, {cfg.resolution}), got {tuple(x.shape)}")
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        h = x
        for conv in self.convs:
            h = F.leaky_relu(conv(h), cfg.leaky_slope)
            if mode == "train":
                h = dropout(h, cfg.dropout, generator)
        return h

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.trunk(x).mean(dim=(2, 3))

    def forward(self, x, mode: str = "eval", generator: torch.Generator | None = None):
        return self.fc(self.trunk(x, mode, generator).flatten(1))


def init_params(config: ModelConfig, seed: int, kind: str = "gan"):
    """Build freshly initialised networks.

    ``kind="gan"`` returns ``(Generator, Discriminator)``; ``kind="predictor"``
    returns a :class:`CountPredictor`. Weights are N(0, 0.02), biases zero,
    drawn from a generator seeded with ``seed``.
    """
    config.validate()
    gen = torch.Generator().manual_seed(int(seed))
    if kind == "gan":
        g, d = Generator(config), Discriminator(config)
        _init_weights(g, gen)
        _init_weights(d, gen)
        return g, d
    if kind == "predictor":
        p = CountPredictor(config)
        _init_weights(p, gen)
        return p
    raise InvalidConfig(f"unknown model kind {kind!r}")


def generator_forward(params: Generator, z: torch.Tensor, counts) -> torch.Tensor:
    counts = torch.as_tensor(counts, dtype=z.dtype)
    if counts.ndim == 1:
        counts = counts.expand(z.shape[0], -1)
    return params(z, counts)


def discriminator_forward(params: Discriminator, x: torch.Tensor):
    return params(x)


def count_predictor_forward(params: CountPredictor, x: torch.Tensor, mode: str = "eval",
                            generator: torch.Generator | None = None) -> torch.Tensor:
    return params(x, mode, generator)


def num_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def params_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class ParamsFile:
    kind: str
    config: ModelConfig
    seed: int
    extra: dict = field(default_factory=dict)


_KINDS = {"generator": Generator, "discriminator": Discriminator, "predictor": CountPredictor}


def save_params(module: nn.Module, path, seed: int = 0, extra: dict | None = None) -> Path:
    """Write ``<path>.pt`` (state dict) and ``<path>.json`` (config, hash, seed)."""
    path = Path(path).with_suffix("")
    path.parent.mkdir(parents=True, exist_ok=True)
    kind = next(k for k, cls in _KINDS.items() if isinstance(module, cls))
    torch.save({"schema_version": SCHEMA_VERSION, "state_dict": module.state_dict()},
               path.with_suffix(".pt"))
    sidecar = {
        "kind": kind,
        "config": module.config.to_dict(),
        "config_hash": module.config.hash(),
        "params_hash": params_hash(module),
        "seed": seed,
        "schema_version": SCHEMA_VERSION,
        "extra": extra or {},
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path.with_suffix(".pt")


def load_params(path) -> nn.Module:
    path = Path(path).with_suffix("")
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta["schema_version"] != SCHEMA_VERSION:
        raise InvalidConfig(f"unsupported params schema {meta['schema_version']}")
    module = _KINDS[meta["kind"]](ModelConfig.from_dict(meta["config"]))
    blob = torch.load(path.with_suffix(".pt"), weights_only=True)
    module.load_state_dict(blob["state_dict"])
    return module
