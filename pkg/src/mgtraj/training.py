"""Alternating optimization: discriminator/classifier, generators, then the selector."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from mgtraj.model import EpisodeBatch, MGModel
from mgtraj.selector import mc_log_likelihoods, posterior_tensor, selector_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 64
    learning_rate: float = 0.0002
    lambda_variety: float = 1.0
    lambda_cls: float = 1.0
    k_variety: int = 4
    selector_steps_per_gan_step: int = 1
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    generator_loss: str = "saturating"
    log_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("batch_size", "k_variety", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("iterations", "selector_steps_per_gan_step", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.lambda_variety < 0 or self.lambda_cls < 0:
            raise ValueError("lambda values must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam moments must lie in [0, 1)")
        if self.generator_loss not in ("saturating", "non_saturating"):
            raise ValueError("generator_loss must be 'saturating' or 'non_saturating'")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, iteration: int, term: str, value: float):
        super().__init__(f"non-finite {term} ({value}) at iteration {iteration}")
        self.iteration = iteration
        self.term = term


@dataclass
class TrainReport:
    n_G: int
    rows: list[dict] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        return report_columns(self.n_G)

    def __len__(self):
        return len(self.rows)

    def last(self) -> dict:
        return self.rows[-1]

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows])


def report_columns(n_G: int) -> list[str]:
    return [
        "iteration",
        "loss_D",
        "loss_G_adv",
        "variety",
        "cls_D",
        "cls_G",
        "selector_ce",
        "active_generators",
        *(f"prior_{g}" for g in range(n_G)),
    ]


# ---------------------------------------------------------------------------
# loss terms


def adversarial_losses(real_logit, fake_logit, saturating: bool = True):
    """(loss_D, loss_G) of the original GAN cross-entropy.

    loss_D = -log D(real) - log(1 - D(fake)); with ``saturating`` the generator
    minimizes log(1 - D(fake)), otherwise -log D(fake).
    """
    loss_D = F.binary_cross_entropy_with_logits(real_logit, torch.ones_like(real_logit)) + (
        F.binary_cross_entropy_with_logits(fake_logit, torch.zeros_like(fake_logit))
    )
    if saturating:
        loss_G = -F.binary_cross_entropy_with_logits(fake_logit, torch.zeros_like(fake_logit))
    else:
        loss_G = F.binary_cross_entropy_with_logits(fake_logit, torch.ones_like(fake_logit))
    return loss_D, loss_G


def sample_mixture_indices(renorm_priors: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """One generator per row, drawn from that row's renormalized priors."""
    return torch.multinomial(renorm_priors, 1, generator=generator).squeeze(1)


def adversarial_loss(model: MGModel, batch: EpisodeBatch, cond, renorm_priors, z, generator, saturating=True):
    """Mixture adversarial loss: each fake row comes from a generator drawn from its priors.

    Returns (loss_D, loss_G, generator indices, fake trajectories).
    """
    g_idx = sample_mixture_indices(renorm_priors, generator)
    fake = model.generators(g_idx, cond, z, batch.last_pos, batch.last_disp)
    real_out = model.discriminate(batch, batch.future)
    fake_out = model.discriminate(batch, fake)
    loss_D, loss_G = adversarial_losses(real_out.realness_logit, fake_out.realness_logit, saturating)
    return loss_D, loss_G, g_idx, fake


def variety_loss(model: MGModel, batch: EpisodeBatch, cond, assigned: torch.Tensor, z: torch.Tensor):
    """Best-of-k L2 distance to the real future under each row's assigned generator.

    z: (B, k, noise_dim). Only the closest of the k samples receives gradient.
    """
    B, k, nz = z.shape
    rep = lambda t: t.unsqueeze(1).expand(B, k, *t.shape[1:]).reshape(B * k, *t.shape[1:])  # noqa: E731
    traj = model.generators(rep(assigned), rep(cond), z.reshape(B * k, nz), rep(batch.last_pos), rep(batch.last_disp))
    dist = (traj.view(B, k, -1) - batch.future.reshape(B, 1, -1)).pow(2).sum(-1).clamp_min(1e-12).sqrt()
    return dist.min(dim=1).values.mean()


def classification_loss(class_logits, true_index) -> torch.Tensor:
    """Cross-entropy of the classifier's generator guess against the true index."""
    return F.cross_entropy(class_logits, torch.as_tensor(true_index, dtype=torch.long))


def real_posteriors(model: MGModel, batch: EpisodeBatch, cond, generator: torch.Generator) -> torch.Tensor:
    """p(g | Y) for the real futures of ``batch`` (no gradient)."""
    ll = mc_log_likelihoods(
        model.generators,
        cond.detach(),
        batch.future,
        batch.last_pos,
        batch.last_disp,
        model.cfg.l_mc,
        model.cfg.sigma,
        generator,
    )
    return posterior_tensor(ll)


def generator_objective(model: MGModel, batch: EpisodeBatch, fake_g, fake_z, assigned, var_z, lambda_variety, lambda_cls, saturating=True):
    """Total generator loss with every random input supplied explicitly.

    Returns (total, adversarial, variety, classification).
    """
    cond = model.condition(batch)
    fake = model.generators(fake_g, cond, fake_z, batch.last_pos, batch.last_disp)
    fake_out = model.discriminate(batch, fake)
    real_logit = torch.zeros_like(fake_out.realness_logit)  # only the generator half matters here
    _, adv = adversarial_losses(real_logit, fake_out.realness_logit, saturating)
    var = variety_loss(model, batch, cond, assigned, var_z)
    cls = classification_loss(fake_out.class_logits, fake_g)
    return adv + lambda_variety * var + lambda_cls * cls, adv, var, cls


# ---------------------------------------------------------------------------
# the loop


def _streams(seed: int) -> dict[str, torch.Generator]:
    names = ("batch", "fake", "index", "variety", "mc")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {
        n: torch.Generator().manual_seed(int(c.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)))
        for n, c in zip(names, children)
    }


def _check(iteration, **terms):
    for name, value in terms.items():
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise NonFiniteLossError(iteration, name, v)


def _adam(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2))


class Trainer:
    """Holds optimizers and RNG streams so training can resume across calls."""

    def __init__(self, model: MGModel, data: EpisodeBatch, cfg: TrainConfig):
        if len(data) == 0:
            raise ValueError("training data is empty")
        if not bool(data.has_future.all()):
            raise ValueError("every training row needs a ground-truth future")
        self.model = model
        self.data = data
        self.cfg = cfg
        self.rng = _streams(cfg.seed)
        self.opt_D = _adam(model.discriminator.parameters(), cfg)
        self.opt_G = _adam([*model.encoder.parameters(), *model.generators.parameters()], cfg)
        self.opt_S = _adam(model.selector.parameters(), cfg)
        self.iteration = 0
        self.report = TrainReport(model.cfg.n_G)

    def _batch(self) -> EpisodeBatch:
        n = len(self.data)
        idx = torch.randperm(n, generator=self.rng["batch"])[: min(self.cfg.batch_size, n)]
        return self.data.select(torch.sort(idx).values)

    def step(self, on_phase: Callable[[str, MGModel], None] | None = None) -> dict:
        model, cfg, rng = self.model, self.cfg, self.rng
        it = self.iteration
        saturating = cfg.generator_loss == "saturating"
        batch = self._batch()
        B = len(batch)
        nz = model.cfg.noise_dim
        dtype = batch.obs.dtype

        # (a) discriminator and classifier; the fake graph is kept for (b)
        cond = model.condition(batch)
        with torch.no_grad():
            priors, mask, renorm = model.priors(cond)
        fake_z = torch.randn(B, nz, generator=rng["fake"], dtype=dtype)
        fake_g = sample_mixture_indices(renorm, rng["index"])
        fake = model.generators(fake_g, cond, fake_z, batch.last_pos, batch.last_disp)
        real_out = model.discriminate(batch, batch.future)
        fake_out = model.discriminate(batch, fake.detach())
        loss_D, _ = adversarial_losses(real_out.realness_logit, fake_out.realness_logit, saturating)
        cls_D = classification_loss(fake_out.class_logits, fake_g)
        _check(it, loss_D=loss_D, cls_D=cls_D)
        self.opt_D.zero_grad(set_to_none=True)
        (loss_D + cfg.lambda_cls * cls_D).backward()
        self.opt_D.step()
        if on_phase:
            on_phase("discriminator", model)

        # (b) generators and generator-side encoders against the updated discriminator
        post = real_posteriors(model, batch, cond, rng["mc"])
        assigned = post.masked_fill(~mask, -1.0).argmax(dim=-1)
        var_z = torch.randn(B, cfg.k_variety, nz, generator=rng["variety"], dtype=dtype)
        fake_out = model.discriminate(batch, fake)
        _, loss_G = adversarial_losses(real_out.realness_logit.detach(), fake_out.realness_logit, saturating)
        var = variety_loss(model, batch, cond, assigned, var_z)
        cls_G = classification_loss(fake_out.class_logits, fake_g)
        _check(it, loss_G_adv=loss_G, variety=var, cls_G=cls_G)
        self.opt_G.zero_grad(set_to_none=True)
        (loss_G + cfg.lambda_variety * var + cfg.lambda_cls * cls_G).backward()
        self.opt_G.step()
        model.discriminator.zero_grad(set_to_none=True)
        if on_phase:
            on_phase("generator", model)

        # (c) selector toward the posterior of the real futures
        sel_ce = float("nan")
        cond = cond.detach()
        for _ in range(cfg.selector_steps_per_gan_step):
            loss_S = selector_loss(post, model.selector(cond))
            _check(it, selector_ce=loss_S)
            self.opt_S.zero_grad(set_to_none=True)
            loss_S.backward()
            self.opt_S.step()
            sel_ce = loss_S.detach().item()
        if on_phase:
            on_phase("selector", model)

        mean_prior = priors.mean(dim=0)
        row = {
            "iteration": it,
            "loss_D": loss_D.detach().item(),
            "loss_G_adv": loss_G.detach().item(),
            "variety": var.detach().item(),
            "cls_D": cls_D.detach().item(),
            "cls_G": cls_G.detach().item(),
            "selector_ce": sel_ce,
            "active_generators": int((mean_prior > model.cfg.activation_threshold).sum()),
            **{f"prior_{g}": float(p) for g, p in enumerate(mean_prior)},
        }
        self.iteration += 1
        return row

    def run(self, iterations: int | None = None, csv_path=None, on_phase=None, on_checkpoint=None) -> TrainReport:
        iterations = self.cfg.iterations if iterations is None else iterations
        writer = fh = None
        if csv_path is not None:
            fh = Path(csv_path).open("w", newline="")
            writer = csv.DictWriter(fh, fieldnames=self.report.columns)
            writer.writeheader()
        try:
            for _ in range(iterations):
                row = self.step(on_phase)
                if row["iteration"] % self.cfg.log_every == 0:
                    self.report.rows.append(row)
                    if writer:
                        writer.writerow({k: _csv_value(v) for k, v in row.items()})
                if on_checkpoint and self.cfg.checkpoint_every and self.iteration % self.cfg.checkpoint_every == 0:
                    on_checkpoint(self.iteration)
        finally:
            if fh:
                fh.close()
        return self.report


def _csv_value(v):
    return v if isinstance(v, int) else repr(float(v))


def train(data: EpisodeBatch, model: MGModel, cfg: TrainConfig, csv_path=None, on_phase=None, on_checkpoint=None) -> TrainReport:
    """Run ``cfg.iterations`` alternating steps on ``data`` (rows with real futures)."""
    return Trainer(model, data, cfg).run(csv_path=csv_path, on_phase=on_phase, on_checkpoint=on_checkpoint)
