"""Generator Selector: priors over generators, Monte-Carlo likelihoods, Bayes posterior.

All likelihood arithmetic stays in log space; with 24-dimensional futures the
raw Gaussian densities underflow for any sample a few meters away.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class Selector(nn.Module):
    """MLP from the condition feature to ``n_G`` prior logits."""

    def __init__(self, cond_dim: int, hidden: int, n_G: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(cond_dim, hidden), nn.GELU(), nn.Linear(hidden, n_G))

    def forward(self, cond):
        return self.net(cond)


@dataclass(frozen=True)
class SelectorPriors:
    priors: np.ndarray
    active_mask: np.ndarray
    renormalized_priors: np.ndarray

    @property
    def active(self) -> list[int]:
        return np.flatnonzero(self.active_mask).tolist()


def activation_mask(priors: torch.Tensor, threshold: float) -> torch.Tensor:
    """Generators whose prior strictly exceeds ``threshold``; the argmax is kept if none do."""
    mask = priors > threshold
    top = F.one_hot(priors.argmax(dim=-1), priors.shape[-1]).bool()
    empty = ~mask.any(dim=-1, keepdim=True)
    return mask | (top & empty)


def threshold_priors(priors: torch.Tensor, threshold: float):
    """(mask, renormalized) for batched priors (..., n_G)."""
    mask = activation_mask(priors, threshold)
    kept = priors * mask
    return mask, kept / kept.sum(dim=-1, keepdim=True)


def make_priors(priors, threshold: float) -> SelectorPriors:
    """Wrap a single prior vector, applying the activation threshold."""
    p = torch.as_tensor(np.asarray(priors, dtype=np.float64))
    if abs(float(p.sum()) - 1.0) > 1e-6 or bool((p < 0).any()):
        raise ValueError("priors must be nonnegative and sum to 1")
    mask, renorm = threshold_priors(p, threshold)
    return SelectorPriors(p.numpy(), mask.numpy(), renorm.numpy())


def predict_priors(selector: Selector, cond, threshold: float = 0.03) -> SelectorPriors:
    with torch.no_grad():
        logits = selector(torch.as_tensor(cond).unsqueeze(0))[0]
        p = torch.softmax(logits.double(), dim=-1)
        mask, renorm = threshold_priors(p, threshold)
    return SelectorPriors(p.numpy(), mask.numpy(), renorm.numpy())


def gaussian_log_density(y: torch.Tensor, mean: torch.Tensor, sigma: float) -> torch.Tensor:
    """log N(y; mean, sigma I) over the flattened trailing dims; ``sigma`` is the variance."""
    diff = (y - mean).flatten(start_dim=-2)
    d = diff.shape[-1]
    return -0.5 * d * math.log(2 * math.pi * sigma) - 0.5 * (diff**2).sum(-1) / sigma


def mc_log_likelihoods(
    bank, cond, Y, last_pos, last_disp, l_mc: int, sigma: float, generator: torch.Generator, generators=None
) -> torch.Tensor:
    """log p(Y | g) for every generator, each averaged over ``l_mc`` noise draws.

    cond (B, d_c), Y (B, t_fut, 2) -> (B, n_G). Noise draws are made generator
    by generator, sample by sample, so results do not depend on batching of
    the generator calls.
    """
    if l_mc < 1 or not sigma > 0:
        raise ValueError("need l_mc >= 1 and sigma > 0")
    gens = range(bank.n_G) if generators is None else generators
    B = cond.shape[0]
    out = []
    with torch.no_grad():
        for g in gens:
            z = torch.randn(l_mc, B, bank.noise_dim, generator=generator, dtype=cond.dtype)
            rep = lambda t: t.unsqueeze(0).expand(l_mc, *t.shape).reshape(l_mc * B, *t.shape[1:])  # noqa: E731
            y_hat = bank.generate(g, rep(cond), z.reshape(l_mc * B, -1), rep(last_pos), rep(last_disp))
            logp = gaussian_log_density(rep(Y), y_hat, sigma).view(l_mc, B)
            out.append(torch.logsumexp(logp, dim=0) - math.log(l_mc))
    return torch.stack(out, dim=-1)


def mc_likelihood(bank, Y, g: int, cond, last_pos, last_disp, l_mc: int = 1, sigma: float = 1.0, seed: int = 0) -> float:
    """log p(Y | g) for one trajectory (t_fut, 2) under generator ``g``."""
    bank.check_index(g)
    gen = torch.Generator().manual_seed(int(seed))
    ll = mc_log_likelihoods(
        bank,
        torch.as_tensor(cond).unsqueeze(0),
        torch.as_tensor(Y).unsqueeze(0),
        torch.as_tensor(last_pos).unsqueeze(0),
        torch.as_tensor(last_disp).unsqueeze(0),
        l_mc,
        sigma,
        gen,
        generators=[g],
    )
    return float(ll[0, 0])


@dataclass(frozen=True)
class PosteriorEstimate:
    log_likelihoods: np.ndarray
    posterior: np.ndarray


class NoExplainingGeneratorError(ValueError):
    pass


def posterior_tensor(log_likelihoods: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis; rows that are all -inf raise."""
    if bool(torch.isneginf(log_likelihoods).all(dim=-1).any()):
        raise NoExplainingGeneratorError("every log-likelihood is -inf: no generator explains Y")
    return torch.softmax(log_likelihoods, dim=-1)


def posterior(log_likelihoods) -> PosteriorEstimate:
    """p(g | Y) = p(Y | g) / sum_g' p(Y | g'), evaluated as a log-space softmax."""
    ll = np.asarray(log_likelihoods, dtype=np.float64)
    if np.isnan(ll).any() or np.isposinf(ll).any():
        raise ValueError("log-likelihoods must be finite or -inf")
    post = posterior_tensor(torch.as_tensor(ll)).numpy()
    return PosteriorEstimate(ll, post)


def selector_loss(post, prior_logits) -> torch.Tensor:
    """Cross-entropy H(p(g|Y), s(g)) averaged over rows; ``post`` is a constant target."""
    if isinstance(post, PosteriorEstimate):
        post = post.posterior
    logits = torch.as_tensor(prior_logits)
    target = torch.as_tensor(post, dtype=logits.dtype).detach()
    return -(target * torch.log_softmax(logits, dim=-1)).sum(-1).mean()


def sample_generator_indices(priors: SelectorPriors, count: int, seed=None, rng: np.random.Generator | None = None):
    """i.i.d. draws from the renormalized priors; inactive generators have zero mass."""
    if not priors.active_mask.any():
        raise ValueError("no active generator")
    rng = rng if rng is not None else np.random.default_rng(seed)
    p = np.where(priors.active_mask, priors.renormalized_priors, 0.0)
    return rng.choice(len(p), size=count, p=p / p.sum())
