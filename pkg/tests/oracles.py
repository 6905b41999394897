"""Independent reference computations shared by unit and acceptance tests.

These deliberately avoid the package's log-space code paths: densities are
evaluated directly with numpy/mpmath, and training reference loops are
written out longhand.
"""

import math

import mpmath
import numpy as np
import torch

from mgtraj.gan import GeneratorBank
from mgtraj.selector import Selector, selector_loss


def direct_posterior(bank: GeneratorBank, cond, Y, last_pos, last_disp, l_mc, sigma, seed):
    """p(g | Y) from raw Gaussian densities, replaying the same noise stream.

    Returns (posterior, per-generator densities) as float64 numpy arrays.
    """
    gen = torch.Generator().manual_seed(seed)
    dens = []
    for g in range(bank.n_G):
        z = torch.randn(l_mc, 1, bank.noise_dim, generator=gen, dtype=cond.dtype)
        total = 0.0
        for i in range(l_mc):
            with torch.no_grad():
                y_hat = bank.generate(g, cond[None], z[i], last_pos[None], last_disp[None])[0]
            diff = (Y - y_hat).numpy().ravel()
            d = diff.size
            total += (2 * math.pi * sigma) ** (-d / 2) * math.exp(-float(diff @ diff) / (2 * sigma))
        dens.append(total / l_mc)
    dens = np.array(dens)
    return dens / dens.sum(), dens


def mp_softmax(values):
    """Softmax in 50-digit arithmetic."""
    with mpmath.workdps(50):
        e = [mpmath.exp(mpmath.mpf(v)) for v in values]
        s = mpmath.fsum(e)
        return np.array([float(x / s) for x in e])


def tiny_bank(n_G, t_fut, seed=0, cond_dim=3, noise_dim=2, hidden=4):
    torch.manual_seed(seed)
    return GeneratorBank(n_G, cond_dim, noise_dim, hidden, t_fut, 2.5).double()


def relative_error(analytic, numeric) -> float:
    """||analytic - numeric|| / max(||analytic||, ||numeric||); 0 when both vanish."""
    a, n = np.concatenate([np.ravel(analytic)]), np.concatenate([np.ravel(numeric)])
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - n) / scale)


def finite_difference_gradients(params: dict, loss_fn, entries=10, h=1e-6, seed=0):
    """Autograd vs central differences on sampled coordinates of each parameter block.

    ``params`` maps block names to float64 leaf tensors that ``loss_fn``
    reads. Returns {name: (analytic, numeric)} over at most ``entries``
    coordinates per block.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    out = {}
    for name, p in params.items():
        flat = p.data.view(-1)
        idx = rng.choice(flat.numel(), size=min(entries, flat.numel()), replace=False)
        analytic = p.grad.view(-1)[idx].clone().numpy() if p.grad is not None else np.zeros(len(idx))
        numeric = np.empty(len(idx))
        with torch.no_grad():
            for k, i in enumerate(idx):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
                numeric[k] = (up - down) / (2 * h)
        out[name] = (analytic, numeric)
    return out


def finite_difference_check(params: dict, loss_fn, entries=10, h=1e-6, seed=0):
    """Per-block relative error of autograd against central differences."""
    grads = finite_difference_gradients(params, loss_fn, entries, h, seed)
    return {name: relative_error(a, n) for name, (a, n) in grads.items()}


def _probe(out, seed):
    """A fixed random linear functional, so every output coordinate matters."""
    w = torch.randn(out.shape, generator=torch.Generator().manual_seed(seed), dtype=out.dtype)
    return (w * out).sum()


def module_gradient_errors(entries=10, seed=0):
    """Relative finite-difference error for every parameter block of a miniature model.

    Covers the encoders, attention, spatiotemporal encoder, generator bank
    and discriminator; every dimension is at most 8. Returns {block: error}.
    """
    from mgtraj.encoders import PhysicalAttention, PhysicalEncoder, SocialAttention, SocialEncoder
    from mgtraj.gan import Discriminator
    from mgtraj.stgraph import STGraphEncoder

    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed + 1)
    rand = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64)  # noqa: E731
    social = SocialEncoder(8, 6).double()
    physical = PhysicalEncoder(4, 4).double()
    s_att = SocialAttention(8, 4).double()
    p_att = PhysicalAttention(8, 4, 4).double()
    stg = STGraphEncoder(6, 4, 5).double()
    bank = GeneratorBank(2, 7, 3, 8, 5, 2.5).double()
    disc = Discriminator(3, 8).double()

    disp = rand(3, 8, 2) * 0.4
    crops = torch.rand(2, 7, 7, generator=g, dtype=torch.float64)
    target_h, neighbor_h, rel = rand(3, 8), rand(3, 4, 8), rand(3, 4, 2)
    mask = torch.tensor([[1, 1, 1, 0], [1, 0, 0, 0], [1, 1, 1, 1]], dtype=torch.bool)
    fmap = rand(3, 4, 7, 7)
    frames = rand(2, 3, 6, 7, 7)
    cond, z, lp, ld = rand(4, 7), rand(4, 3), rand(4, 2), rand(4, 2) * 0.3
    obs, traj = rand(4, 8, 2), rand(4, 5, 2)

    cases = {
        "social_encoder": (social, lambda: _probe(social(disp), 1)),
        "physical_encoder": (physical, lambda: _probe(physical(crops), 2)),
        "social_attention": (s_att, lambda: _probe(torch.cat([*s_att(target_h, neighbor_h, rel, mask)], -1), 3)),
        "physical_attention": (p_att, lambda: _probe(torch.cat([*p_att(target_h, fmap)], -1), 4)),
        "stgraph": (stg, lambda: _probe(stg(frames), 5)),
        "generators": (
            bank,
            lambda: _probe(torch.stack([bank.generate(k, cond, z, lp, ld) for k in range(bank.n_G)]), 6),
        ),
        "discriminator": (
            disc,
            lambda: _probe(torch.cat([disc(obs, traj).realness_logit[:, None], disc(obs, traj).class_logits], -1), 7),
        ),
    }
    errors = {}
    for module_name, (module, loss_fn) in cases.items():
        params = {f"{module_name}.{n}": p for n, p in module.named_parameters()}
        errors.update(finite_difference_check(params, loss_fn, entries=entries, seed=seed))
    return errors


def fit_selector_to_posteriors(seed=0, n=512, n_G=4, steps=1500):
    """Train a selector on a frozen posterior dataset; returns (mean s, mean posterior)."""
    rng = np.random.default_rng(seed)
    cond = torch.as_tensor(rng.normal(size=(n, 6)))
    post = torch.as_tensor(rng.dirichlet([4.0, 2.0, 1.0, 0.5][:n_G], size=n))
    torch.manual_seed(seed)
    sel = Selector(6, 16, n_G).double()
    opt = torch.optim.Adam(sel.parameters(), lr=1e-2)
    for _ in range(steps):
        opt.zero_grad()
        selector_loss(post, sel(cond)).backward()
        opt.step()
    with torch.no_grad():
        s = torch.softmax(sel(cond), -1).mean(0).numpy()
    return s, post.mean(0).numpy()
