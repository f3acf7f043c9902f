"""Alternating discriminator/generator training with optional contrastive term."""

from __future__ import annotations

import copy
import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
import torch

from . import __version__, losses
from .data import AugmentationChain, DenoisingDataset, contrastive_augment, manifest_hash
from .errors import DataError, InvalidConfig, NonFiniteLoss, NonFiniteTerm
from .losses import LossWeights, SSIMParams
from .models import (
    DiscriminatorConfig,
    GeneratorConfig,
    PatchDiscriminator,
    ProjectionHead,
    ProjectionHeadConfig,
    UNetGenerator,
    config_from_dict,
    config_to_dict,
    read_checkpoint,
    save_checkpoint,
)

LOSS_CSV_COLUMNS = ("iteration", "L_GAN_G", "L_GAN_D", "L_L1", "L_SSIM", "L_TV", "L_CL", "total")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 1000
    decay_start_epoch: int = 500
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    weights: LossWeights = LossWeights()
    seed: int = 0
    use_tv: bool = False
    use_ssim: bool = False
    use_cl: bool = False
    ssim_params: SSIMParams = SSIMParams()
    augmentation: AugmentationChain = AugmentationChain()
    generator: GeneratorConfig = GeneratorConfig()
    discriminator: DiscriminatorConfig = DiscriminatorConfig()
    head_hidden_dim: int = 256
    head_output_dim: int = 128
    # None: ceil(n_train / base batch), at least one step
    steps_per_epoch: Optional[int] = None
    # 0: checkpoint only at the end of training
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 0 or not 0 <= self.decay_start_epoch <= self.epochs:
            raise InvalidConfig("need 0 <= decay_start_epoch <= epochs")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be positive")
        if self.use_cl and (self.batch_size < 4 or self.batch_size % 2):
            raise InvalidConfig("contrastive training needs an even batch_size >= 4")
        if self.lr < 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidConfig("invalid optimizer settings")

    @property
    def base_batch(self) -> int:
        """Patches per step fed to the reconstruction losses."""
        return self.batch_size // 2 if self.use_cl else self.batch_size

    @property
    def head(self) -> ProjectionHeadConfig:
        return ProjectionHeadConfig(self.generator.bottleneck_channels, self.head_hidden_dim,
                                    self.head_output_dim)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            out[f.name] = config_to_dict(value) if dataclasses.is_dataclass(value) else value
        return out

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        nested = {
            "weights": LossWeights,
            "ssim_params": SSIMParams,
            "augmentation": AugmentationChain,
            "generator": GeneratorConfig,
            "discriminator": DiscriminatorConfig,
        }
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in values:
                continue
            value = values[f.name]
            if f.name in nested and isinstance(value, dict):
                value = config_from_dict(nested[f.name], value)
            kwargs[f.name] = value
        return cls(**kwargs)


EXPERIMENTS = {
    "baseline": dict(use_tv=False, use_ssim=False, use_cl=False),
    "TV": dict(use_tv=True, use_ssim=False, use_cl=False),
    "SSIM": dict(use_tv=False, use_ssim=True, use_cl=False),
    "CL": dict(use_tv=False, use_ssim=False, use_cl=True),
    "CL + TV + SSIM": dict(use_tv=True, use_ssim=True, use_cl=True),
}


@dataclass
class TrainState:
    cfg: TrainConfig
    generator: UNetGenerator
    discriminator: PatchDiscriminator
    head: ProjectionHead
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    epoch: int = 0
    global_step: int = 0
    torch_rng: torch.Tensor = field(default_factory=torch.get_rng_state)

    def save(self, path, extra: Optional[dict] = None) -> Path:
        payload = {
            "train_config": self.cfg.to_dict(),
            "epoch": self.epoch,
            "global_step": self.global_step,
            "torch_rng": self.torch_rng.clone(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
        }
        payload.update(extra or {})
        return save_checkpoint(path, self.generator, self.discriminator, self.head,
                               seed=self.cfg.seed, extra=payload)

    @classmethod
    def load(cls, path, cfg: Optional[TrainConfig] = None) -> "TrainState":
        payload = read_checkpoint(path)
        extra = payload.get("extra") or {}
        if "train_config" not in extra:
            raise InvalidConfig(f"{path}: checkpoint has no training state")
        cfg = cfg or TrainConfig.from_dict(extra["train_config"])
        state = init_state(cfg)
        for name, net in (("generator", state.generator), ("discriminator", state.discriminator),
                          ("head", state.head)):
            prefix = name + "."
            net.load_state_dict({k[len(prefix):]: v for k, v in payload["params"].items()
                                 if k.startswith(prefix)})
        state.opt_g.load_state_dict(extra["opt_g"])
        state.opt_d.load_state_dict(extra["opt_d"])
        state.epoch = int(extra["epoch"])
        state.global_step = int(extra["global_step"])
        state.torch_rng = extra["torch_rng"].clone()
        return state

    def clone(self) -> "TrainState":
        import io

        buf = io.BytesIO()
        self.save(buf)
        buf.seek(0)
        return TrainState.load(buf, self.cfg)


def init_state(cfg: TrainConfig) -> TrainState:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        gen = UNetGenerator(cfg.generator)
        disc = PatchDiscriminator(cfg.discriminator)
        head = ProjectionHead(cfg.head)
        rng = torch.get_rng_state()
    betas = (cfg.beta1, cfg.beta2)
    opt_g = torch.optim.Adam(list(gen.parameters()) + list(head.parameters()), lr=cfg.lr, betas=betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=betas)
    return TrainState(cfg, gen, disc, head, opt_g, opt_d, torch_rng=rng)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Constant, then linear decay to zero over the last epochs."""
    if epoch < cfg.decay_start_epoch:
        return cfg.lr
    span = cfg.epochs - cfg.decay_start_epoch
    if span <= 0:
        return 0.0
    return cfg.lr * max(0.0, 1.0 - (epoch - cfg.decay_start_epoch) / span)


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def _contrastive_views(noisy: torch.Tensor, cfg: TrainConfig, step: int):
    arr = noisy.detach().cpu().numpy()[:, 0]
    views = [contrastive_augment(p, (cfg.seed, step, i), cfg.augmentation) for i, p in enumerate(arr)]
    a = torch.from_numpy(np.stack([v[0] for v in views])[:, None]).to(noisy.dtype)
    b = torch.from_numpy(np.stack([v[1] for v in views])[:, None]).to(noisy.dtype)
    return a, b


def generator_terms(state: TrainState, noisy: torch.Tensor, clean: torch.Tensor, fake: torch.Tensor,
                    cfg: TrainConfig, aug_step: int) -> dict:
    """Unweighted generator-side terms; disabled terms are never evaluated."""
    terms = {
        "gan": losses.adversarial_loss(None, state.discriminator(noisy, fake), "generator"),
        "l1": losses.l1_loss(fake, clean),
    }
    if cfg.use_ssim:
        terms["ssim"] = losses.dssim_loss(fake, clean, cfg.ssim_params)
    if cfg.use_tv:
        terms["tv"] = losses.tv_loss(fake)
    if cfg.use_cl:
        view_a, view_b = _contrastive_views(noisy, cfg, aug_step)
        z = state.head(state.generator.encode(torch.cat([view_a, view_b])))
        terms["cl"] = losses.ntxent_loss(z, tau=cfg.weights.tau)
    return terms


def _weighted(terms: dict, cfg: TrainConfig):
    try:
        return losses.composite_loss(terms, cfg.weights)
    except NonFiniteTerm as exc:
        raise NonFiniteLoss(exc.term, exc.value) from None


def generator_objective(state: TrainState, batch, cfg: TrainConfig, seed: int = 0) -> float:
    """Composite generator loss on ``batch`` with a fixed dropout/augmentation draw."""
    noisy, clean = (torch.as_tensor(b) for b in batch)
    with torch.random.fork_rng(devices=[]), torch.no_grad():
        torch.manual_seed(seed)
        state.generator.train()
        fake = state.generator(noisy)
        total, _ = _weighted(generator_terms(state, noisy, clean, fake, cfg, aug_step=seed), cfg)
    return float(total)


def train_step(state: TrainState, batch, cfg: Optional[TrainConfig] = None,
               parts: Iterable[str] = ("d", "g")):
    """One discriminator update followed by one generator update.

    ``batch`` is ``(noisy, clean)`` with shape B x 1 x P x P. Mutates and
    returns ``state`` together with the loss breakdown for this step.
    """
    cfg = cfg or state.cfg
    parts = tuple(parts)
    noisy, clean = (torch.as_tensor(b) for b in batch)
    gen, disc = state.generator, state.discriminator
    lr = lr_schedule(state.epoch, cfg)
    _set_lr(state.opt_g, lr)
    _set_lr(state.opt_d, lr)
    row = {"L_GAN_G": 0.0, "L_GAN_D": 0.0, "L_L1": 0.0, "L_SSIM": 0.0, "L_TV": 0.0, "L_CL": 0.0,
           "total": 0.0}

    with torch.random.fork_rng(devices=[]):
        torch.set_rng_state(state.torch_rng)
        gen.train()
        disc.train()
        state.head.train()
        fake = gen(noisy)
        d_before = None

        if "d" in parts:
            # kept so a divergent generator half leaves the whole step undone
            d_before = copy.deepcopy((disc.state_dict(), state.opt_d.state_dict())) if "g" in parts else None
            loss_d = losses.adversarial_loss(disc(noisy, clean), disc(noisy, fake.detach()),
                                             "discriminator")
            if not torch.isfinite(loss_d):
                raise NonFiniteLoss("gan_d", float(loss_d.detach()))
            state.opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            state.opt_d.step()
            row["L_GAN_D"] = float(loss_d.detach())

        if "g" in parts:
            disc.requires_grad_(False)
            try:
                terms = generator_terms(state, noisy, clean, fake, cfg, state.global_step)
                try:
                    total, breakdown = _weighted(terms, cfg)
                except NonFiniteLoss:
                    if d_before is not None:
                        disc.load_state_dict(d_before[0])
                        state.opt_d.load_state_dict(d_before[1])
                    raise
                state.opt_g.zero_grad(set_to_none=True)
                total.backward()
                state.opt_g.step()
            finally:
                disc.requires_grad_(True)
            row.update(L_GAN_G=breakdown["gan"], L_L1=breakdown["l1"], L_SSIM=breakdown["ssim"],
                       L_TV=breakdown["tv"], L_CL=breakdown["cl"], total=float(total.detach()))

        state.torch_rng = torch.get_rng_state()
    state.global_step += 1
    return state, row


class StopTraining(Exception):
    """Raised by a callback to end :func:`fit` early (state is checkpointed)."""


def _format_row(step: int, row: dict) -> list:
    return [step] + [repr(float(row[c])) for c in LOSS_CSV_COLUMNS[1:]]


def steps_per_epoch(n_train: int, cfg: TrainConfig) -> int:
    if cfg.steps_per_epoch:
        return cfg.steps_per_epoch
    return max(1, math.ceil(n_train / cfg.base_batch))


def epoch_batches(dataset: DenoisingDataset, cfg: TrainConfig, epoch: int):
    """Yield (noisy, clean) batches for one epoch, fully determined by the seed.

    Training indices are shuffled per epoch and recycled when there are fewer
    of them than one epoch needs.
    """
    n_train = dataset.n_train
    base = cfg.base_batch
    n_steps = steps_per_epoch(n_train, cfg)
    order = np.random.default_rng([cfg.seed, epoch]).permutation(n_train)
    picks = np.resize(order, n_steps * base)
    for s in range(n_steps):
        rng = np.random.default_rng([cfg.seed, epoch, s])
        idx = [dataset.train_indices[i] for i in picks[s * base:(s + 1) * base]]
        yield dataset.sample_batch(idx, rng)


def write_run_manifest(path, cfg: TrainConfig, dataset: DenoisingDataset) -> Path:
    lines = [f"code_version = {__version__}", f"dataset_manifest_sha256 = {manifest_hash(dataset)}"]
    for key, value in cfg.to_dict().items():
        lines.append(f"{key} = {value!r}")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def fit(dataset: DenoisingDataset, cfg: TrainConfig, callbacks: Iterable[Callable] = (),
        state: Optional[TrainState] = None, out_dir=None) -> TrainState:
    """Train for ``cfg.epochs`` epochs, resuming from ``state`` if given.

    With ``out_dir`` set, writes ``loss.csv`` (appended on resume),
    ``checkpoint.pt`` and ``run_manifest.txt``. Callbacks are called as
    ``cb(event, state, info)`` with events ``"step"`` and ``"epoch_end"``.
    """
    if dataset.n_train == 0:
        raise DataError(f"dataset {dataset.name!r} has no training pairs")
    state = state or init_state(cfg)
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = loss_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = out_dir / "checkpoint.pt"
        write_run_manifest(out_dir / "run_manifest.txt", cfg, dataset)
        resume = state.global_step > 0 and (out_dir / "loss.csv").exists()
        loss_file = open(out_dir / "loss.csv", "a" if resume else "w", newline="")
        if not resume:
            csv.writer(loss_file).writerow(LOSS_CSV_COLUMNS)
    writer = csv.writer(loss_file) if loss_file else None

    def checkpoint():
        if ckpt_path is not None:
            state.save(ckpt_path)

    try:
        for epoch in range(state.epoch, cfg.epochs):
            for batch in epoch_batches(dataset, cfg, epoch):
                last_good = state.global_step
                try:
                    _, row = train_step(state, batch, cfg)
                except NonFiniteLoss:
                    checkpoint()
                    raise
                if writer:
                    writer.writerow(_format_row(last_good, row))
                    loss_file.flush()
                for cb in callbacks:
                    cb("step", state, row)
            state.epoch = epoch + 1
            if cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                checkpoint()
            for cb in callbacks:
                cb("epoch_end", state, {"epoch": state.epoch})
    except StopTraining:
        pass
    finally:
        if loss_file:
            loss_file.close()
    checkpoint()
    return state
