"""Embedded invariant suites behind the `selfcheck` subcommand."""

from __future__ import annotations

import time

import numpy as np
import torch

from . import augment, diffusion, jepa
from .crystal_core import Composition, min_image_distances
from .descriptors import fingerprint
from .oracle import default_oracle
from .phase_diagram import HullEntry, PhaseDiagram, energy_above_hull
from .synthetic import random_crystal, random_hull_system
from .tensor_nn import DTYPE, EncoderConfig, encoder_forward, finite_difference_check, init_encoder_params, sinusoidal_embed


def hull_equivalence(n_systems=100, seed=0, tol=1e-9):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_systems):
        k = int(rng.integers(1, 5))
        zs, entries = random_hull_system(rng, k, int(rng.integers(k, 21)))
        pd = PhaseDiagram(entries)
        for e in entries:
            a = energy_above_hull(e, pd, "formation").delta_e
            b = energy_above_hull(e, pd, "total").delta_e
            worst = max(worst, abs(a - b))
        sub = sorted(int(z) for z in rng.choice(zs, size=int(rng.integers(1, k + 1)), replace=False))
        q = HullEntry(Composition.from_species(sub * 2), float(rng.uniform(-5, 0)))
        worst = max(worst, abs(energy_above_hull(q, pd, "formation").delta_e - energy_above_hull(q, pd, "total").delta_e))
    return worst < tol, f"max |dE_formation - dE_total| = {worst:.3g}"


def augmentation_invariance(n_pairs=50, seed=0, tol=1e-9):
    rng = np.random.default_rng(seed)
    oracle = default_oracle()
    worst = 0.0
    for _ in range(n_pairs):
        c = random_crystal(rng)
        p = augment.AugmentParams.sample(rng)
        ctx = augment.make_context(c, p)
        worst = max(
            worst,
            np.abs(min_image_distances(c) - min_image_distances(ctx)).max(),
            abs(c.volume - ctx.volume),
            abs(oracle.energy_per_atom(c) - oracle.energy_per_atom(ctx)),
            np.abs(fingerprint(c).fp_str - fingerprint(ctx).fp_str).max(),
        )
    return worst < tol, f"max deviation {worst:.3g}"


def gradient_checks(seed=0, tol=1e-4):
    """Central differences against autograd for the encoder, predictor, both JEPA losses and the DDPM loss."""
    g = torch.Generator().manual_seed(seed)
    errs = {}

    cfg = EncoderConfig(layers=1, hidden_dim=8, heads=2, d_in=5, d_out=4, time_dim=4)
    params = init_encoder_params(cfg, seed=seed)
    params = {k: v + 0.1 * torch.randn(v.shape, generator=g, dtype=DTYPE) for k, v in params.items()}
    x = torch.randn(2, 3, 5, generator=g, dtype=DTYPE)
    mask = torch.tensor([[True, True, True], [True, True, False]])
    te = torch.randn(2, 4, generator=g, dtype=DTYPE)

    def enc_loss(p):
        out, cls = encoder_forward(cfg, p, x, mask=mask, timestep_embed=te)
        return (out**2).sum() + (cls**3).sum()

    errs["encoder"] = max(finite_difference_check(enc_loss, params, max_entries=6).values())

    jcfg = jepa.JepaConfig(layers=1, hidden_dim=8, heads=2, embed_dim=4)
    pp = {k: v + 0.1 * torch.randn(v.shape, generator=g, dtype=DTYPE) for k, v in jepa.init_model(jcfg).params.items() if k.startswith("pred.")}
    h = torch.randn(4, 4, generator=g, dtype=DTYPE)
    cond = torch.rand(4, 6, generator=g, dtype=DTYPE)
    tgt = torch.randn(4, 4, generator=g, dtype=DTYPE)
    energies = torch.tensor([0.1, -0.5, 1.3, 0.4], dtype=DTYPE)
    errs["predictor"] = max(finite_difference_check(lambda p: (jepa.predict(p, h, cond) ** 2).sum(), pp).values())
    errs["infonce"] = max(finite_difference_check(lambda p: jepa.infonce_loss(jepa.predict(p, h, cond), tgt, energies, 0.1), pp).values())
    dirs = jepa.random_directions(8, 4, g)
    errs["sigreg"] = max(
        finite_difference_check(lambda p: jepa.sigreg_mse_loss(jepa.predict(p, h, cond), tgt + jepa.predict(p, h, cond), 1.0, directions=dirs), pp).values()
    )

    dcfg_enc = EncoderConfig(layers=1, hidden_dim=8, heads=2, d_in=5, d_out=5, time_dim=4)
    dp = init_encoder_params(dcfg_enc, seed=seed)
    dp = {k: v + 0.1 * torch.randn(v.shape, generator=g, dtype=DTYPE) for k, v in dp.items()}
    x0 = torch.randn(2, 3, 5, generator=g, dtype=DTYPE)
    t = torch.tensor([3, 11])
    eps = torch.randn(2, 3, 5, generator=g, dtype=DTYPE)
    sched = diffusion.NoiseSchedule.cosine(16)

    def den_for(p):
        def fn(x_t, tt, m):
            return encoder_forward(dcfg_enc, p, x_t, mask=m, timestep_embed=sinusoidal_embed(tt, 4))[0]

        return fn

    errs["ddpm_loss"] = max(finite_difference_check(lambda p: diffusion.ddpm_loss(den_for(p), sched, x0, mask, t=t, eps=eps), dp, max_entries=6).values())
    worst = max(errs.values())
    return worst < tol, ", ".join(f"{k}={v:.2g}" for k, v in errs.items())


SUITES = {
    "hull_equivalence": hull_equivalence,
    "augmentation_invariance": augmentation_invariance,
    "gradient_checks": gradient_checks,
}


def run_all():
    out = []
    for name, fn in SUITES.items():
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing suite is a failing suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append({"suite": name, "passed": bool(ok), "detail": detail, "seconds": round(time.perf_counter() - t0, 2)})
    return out
