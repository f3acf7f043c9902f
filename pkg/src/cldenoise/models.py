"""U-Net generator, patch discriminator and contrastive projection head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidConfig

CHECKPOINT_MAGIC = "CLDENOISE-CHECKPOINT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GeneratorConfig:
    n_down: int = 7
    n_up: int = 7
    base_channels: int = 64
    max_channels: int = 512
    dropout_rate: float = 0.5
    # decoder blocks counted from the innermost (0) outwards
    dropout_blocks: tuple = (0, 1, 2)
    input_size: int = 256
    in_channels: int = 1
    out_channels: int = 1
    norm: str = "instance"
    skip_connections: bool = True
    dropout_at_inference: bool = False

    def __post_init__(self):
        if self.n_down != self.n_up:
            raise InvalidConfig("n_down and n_up must match")
        if self.n_down < 2:
            raise InvalidConfig("the U-Net needs at least two levels")
        if self.norm not in ("instance", "none"):
            raise InvalidConfig(f"unknown norm {self.norm!r}")
        if self.input_size % 2 ** self.n_down or self.input_size < 2 ** self.n_down:
            raise InvalidConfig(
                f"input size {self.input_size} does not halve cleanly {self.n_down} times"
            )
        object.__setattr__(self, "dropout_blocks", tuple(self.dropout_blocks))

    def channels(self, level: int) -> int:
        return min(self.base_channels * 2 ** level, self.max_channels)

    @property
    def bottleneck_channels(self) -> int:
        return self.channels(self.n_down - 1)


@dataclass(frozen=True)
class DiscriminatorConfig:
    n_layers: int = 3
    base_channels: int = 64
    in_channels: int = 2
    norm: str = "instance"
    kernel_size: int = 4
    padding: int = 1

    def __post_init__(self):
        if self.n_layers < 1 or self.base_channels < 1:
            raise InvalidConfig("discriminator needs at least one layer and one channel")
        if self.norm not in ("instance", "none"):
            raise InvalidConfig(f"unknown norm {self.norm!r}")

    @property
    def strides(self) -> list[int]:
        return [2] * self.n_layers + [1, 1]

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for s in self.strides:
            rf += (self.kernel_size - 1) * jump
            jump *= s
        return rf

    def output_size(self, input_size: int) -> int:
        size = input_size
        for s in self.strides:
            size = (size + 2 * self.padding - self.kernel_size) // s + 1
        return size


@dataclass(frozen=True)
class ProjectionHeadConfig:
    input_dim: int = 512
    hidden_dim: int = 256
    output_dim: int = 128


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    """Zero-mean Gaussian conv weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class _Dropout(nn.Module):
    def __init__(self, p: float, always: bool = False):
        super().__init__()
        self.p = p
        self.always = always

    def forward(self, x):
        return F.dropout(x, self.p, training=self.training or self.always)


def _norm(kind: str, channels: int) -> nn.Module:
    return nn.InstanceNorm2d(channels) if kind == "instance" else nn.Identity()


class UNetGenerator(nn.Module):
    """Encoder-decoder with mirrored skip connections.

    Each encoder block halves the spatial size with a stride-2 4x4 conv;
    each decoder block doubles it with a transposed conv and concatenates the
    encoder features of matching depth. Output is ``(tanh + 1) / 2`` so it
    lives in [0, 1] like the normalized data.
    """

    def __init__(self, cfg: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.cfg = cfg
        n = cfg.n_down
        use_norm = cfg.norm != "none"
        down = []
        for i in range(n):
            c_in = cfg.in_channels if i == 0 else cfg.channels(i - 1)
            normed = use_norm and 0 < i < n - 1
            layers = [] if i == 0 else [nn.LeakyReLU(0.2)]
            # bias is cancelled by instance norm, so it is dropped where a norm follows
            layers.append(nn.Conv2d(c_in, cfg.channels(i), 4, 2, 1, bias=not normed))
            if normed:
                layers.append(_norm(cfg.norm, cfg.channels(i)))
            down.append(nn.Sequential(*layers))
        self.down = nn.ModuleList(down)

        up = []
        for j in range(n):
            c_in = self.decoder_in_channels(j)
            if j == n - 1:
                up.append(nn.Sequential(nn.ReLU(), nn.ConvTranspose2d(c_in, cfg.out_channels, 4, 2, 1)))
                continue
            c_out = cfg.channels(n - 2 - j)
            layers = [nn.ReLU(), nn.ConvTranspose2d(c_in, c_out, 4, 2, 1, bias=not use_norm)]
            if use_norm:
                layers.append(_norm(cfg.norm, c_out))
            if j in cfg.dropout_blocks and cfg.dropout_rate > 0:
                layers.append(_Dropout(cfg.dropout_rate, cfg.dropout_at_inference))
            up.append(nn.Sequential(*layers))
        self.up = nn.ModuleList(up)
        init_weights(self)

    def decoder_in_channels(self, j: int) -> int:
        cfg = self.cfg
        n = cfg.n_down
        if j == 0:
            return cfg.channels(n - 1)
        width = cfg.channels(n - 1 - j)
        return 2 * width if cfg.skip_connections else width

    def _check(self, x: torch.Tensor) -> None:
        factor = 2 ** self.cfg.n_down
        h, w = x.shape[-2:]
        if h % factor or w % factor:
            raise InvalidConfig(f"input {tuple(x.shape[-2:])} is not divisible by {factor}")

    def encoder_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        self._check(x)
        feats = []
        for block in self.down:
            x = block(x)
            feats.append(x)
        return feats

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Innermost encoder output (the bottleneck map)."""
        return self.encoder_features(x)[-1]

    def forward(self, x: torch.Tensor, return_bottleneck: bool = False):
        feats = self.encoder_features(x)
        h = feats[-1]
        n = self.cfg.n_down
        for j, block in enumerate(self.up):
            if j > 0 and self.cfg.skip_connections:
                h = torch.cat([h, feats[n - 1 - j]], dim=1)
            h = block(h)
        out = (torch.tanh(h) + 1.0) / 2.0
        if return_bottleneck:
            return out, feats[-1]
        return out


class PatchDiscriminator(nn.Module):
    """Conditional patch discriminator emitting a map of raw logits.

    Input is the channel concatenation of the condition (noisy patch) and the
    candidate; each output unit sees ``cfg.receptive_field`` input pixels.
    """

    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.cfg = cfg
        k, p = cfg.kernel_size, cfg.padding
        use_norm = cfg.norm != "none"
        ndf = cfg.base_channels
        layers = [nn.Conv2d(cfg.in_channels, ndf, k, 2, p), nn.LeakyReLU(0.2)]
        mult = 1
        for i in range(1, cfg.n_layers + 1):
            prev, mult = mult, min(2 ** i, 8)
            stride = 2 if i < cfg.n_layers else 1
            layers += [
                nn.Conv2d(ndf * prev, ndf * mult, k, stride, p, bias=not use_norm),
                _norm(cfg.norm, ndf * mult),
                nn.LeakyReLU(0.2),
            ]
        layers.append(nn.Conv2d(ndf * mult, 1, k, 1, p))
        self.model = nn.Sequential(*layers)
        init_weights(self)

    def forward(self, condition: torch.Tensor, candidate: Optional[torch.Tensor] = None):
        x = condition if candidate is None else torch.cat([condition, candidate], dim=1)
        return self.model(x)


class ProjectionHead(nn.Module):
    """Global average pool, two-layer MLP, L2 normalization."""

    def __init__(self, cfg: ProjectionHeadConfig = ProjectionHeadConfig()):
        super().__init__()
        self.cfg = cfg
        self.net = nn.Sequential(
            nn.Linear(cfg.input_dim, cfg.hidden_dim),
            nn.ReLU(),
            nn.Linear(cfg.hidden_dim, cfg.output_dim),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.dim() == 4:
            features = features.mean(dim=(2, 3))
        return F.normalize(self.net(features), dim=1)


def build_generator(cfg: GeneratorConfig = GeneratorConfig()) -> UNetGenerator:
    return UNetGenerator(cfg)


def build_discriminator(cfg: DiscriminatorConfig = DiscriminatorConfig()) -> PatchDiscriminator:
    return PatchDiscriminator(cfg)


def build_projection_head(cfg: ProjectionHeadConfig = ProjectionHeadConfig()) -> ProjectionHead:
    return ProjectionHead(cfg)


def config_to_dict(cfg) -> dict:
    out = dataclasses.asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}


def config_from_dict(cls, values: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items() if k in names}
    return cls(**kwargs)


def save_checkpoint(path, generator: UNetGenerator, discriminator: Optional[PatchDiscriminator] = None,
                    head: Optional[ProjectionHead] = None, seed: int = 0, extra: Optional[dict] = None):
    """Write parameters keyed ``<network>.<module path>`` plus the configs."""
    params, configs = {}, {}
    for name, net in (("generator", generator), ("discriminator", discriminator), ("head", head)):
        if net is None:
            continue
        configs[name] = config_to_dict(net.cfg)
        for key, value in net.state_dict().items():
            params[f"{name}.{key}"] = value.detach().clone()
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "configs": configs,
        "seed": int(seed),
        "params": params,
    }
    if extra:
        payload["extra"] = extra
    if isinstance(path, (str, Path)):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def read_checkpoint(path) -> dict:
    source = Path(path) if isinstance(path, str) else path
    payload = torch.load(source, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise InvalidConfig(f"{path}: not a checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise InvalidConfig(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def load_checkpoint(path) -> dict:
    """Rebuild the networks stored in a checkpoint.

    Returns a dict with ``generator`` and, when present, ``discriminator`` and
    ``head`` modules, plus ``seed`` and the raw ``payload``.
    """
    payload = read_checkpoint(path)
    builders = {
        "generator": (GeneratorConfig, UNetGenerator),
        "discriminator": (DiscriminatorConfig, PatchDiscriminator),
        "head": (ProjectionHeadConfig, ProjectionHead),
    }
    out = {"seed": payload["seed"], "payload": payload}
    for name, cfg_dict in payload["configs"].items():
        cfg_cls, net_cls = builders[name]
        net = net_cls(config_from_dict(cfg_cls, cfg_dict))
        prefix = name + "."
        state = {k[len(prefix):]: v for k, v in payload["params"].items() if k.startswith(prefix)}
        net.load_state_dict(state)
        out[name] = net
    return out
