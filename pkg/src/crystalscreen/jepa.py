"""Energy-aware joint-embedding predictive model over crystals.

A shared Transformer encodes context and target crystals into CLS
embeddings; an MLP predictor maps the context embedding plus the
augmentation parameters to the target embedding. Training uses the
energy-weighted InfoNCE objective, or MSE alignment with a projected
Gaussianity penalty as an alternative.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentParams, make_context
from .crystal_core import Crystal, crystal_rep, rep_width
from .errors import DegenerateEmbedding, NonFiniteLoss
from .tensor_nn import (
    DTYPE,
    INIT_STD,
    EncoderConfig,
    TrainState,
    as_tensor,
    encoder_forward,
    init_encoder_params,
    load_checkpoint,
    optimizer_step,
    save_checkpoint,
    state_from_tensors,
    state_tensors,
    value_and_grad,
)

log = logging.getLogger(__name__)

COND_DIM = 6


@dataclass
class JepaConfig:
    layers: int = 2
    hidden_dim: int = 64
    heads: int = 4
    embed_dim: int = 32
    dropout: float = 0.0
    tau: float = 0.1
    objective: str = "infonce"
    lambda_sig: float = 1.0
    num_projections: int = 64
    stop_grad_target: bool = False
    lattice_mode: str = "code6"
    lr: float = 3e-4
    batch_size: int = 64
    steps: int = 1000
    seed: int = 0

    def encoder_config(self):
        return EncoderConfig(
            layers=self.layers,
            hidden_dim=self.hidden_dim,
            heads=self.heads,
            dropout=self.dropout,
            use_cls=True,
            d_in=rep_width(self.lattice_mode),
            d_out=self.embed_dim,
        )


@dataclass
class JepaModel:
    config: JepaConfig
    params: dict

    @property
    def encoder(self):
        return self.config.encoder_config()

    @property
    def embed_dim(self):
        return self.config.embed_dim


@dataclass
class EmbeddingRecord:
    id: str
    embedding: np.ndarray
    e_form_per_atom: float | None


def init_model(config: JepaConfig, seed=None) -> JepaModel:
    seed = config.seed if seed is None else seed
    cfg = config.encoder_config()
    params = init_encoder_params(cfg, seed=seed, prefix="enc.")
    g = torch.Generator().manual_seed(int(seed) + 1)
    d = config.embed_dim
    params["pred.w1"] = torch.randn(COND_DIM, d, generator=g, dtype=DTYPE) * INIT_STD
    params["pred.b1"] = torch.zeros(d, dtype=DTYPE)
    params["pred.w2"] = torch.randn(d, d, generator=g, dtype=DTYPE) * INIT_STD
    params["pred.b2"] = torch.zeros(d, dtype=DTYPE)
    return JepaModel(config, params)


def batch_reps(crystals, lattice_mode="code6"):
    """Pad crystal representations to (B, N_max, width) with a boolean mask."""
    reps = [crystal_rep(c, lattice_mode) for c in crystals]
    nmax = max(r.shape[0] for r in reps)
    out = np.zeros((len(reps), nmax, reps[0].shape[1]))
    mask = np.zeros((len(reps), nmax), dtype=bool)
    for i, r in enumerate(reps):
        out[i, : r.shape[0]] = r
        mask[i, : r.shape[0]] = True
    return torch.as_tensor(out, dtype=DTYPE), torch.as_tensor(mask)


def encode_batch(model: JepaModel, params, crystals, train=False, dropout_seed=None):
    x, mask = batch_reps(crystals, model.config.lattice_mode)
    _, cls = encoder_forward(model.encoder, params, x, mask=mask, train=train, dropout_seed=dropout_seed, prefix="enc.")
    return cls


def encode(model: JepaModel, c: Crystal) -> EmbeddingRecord:
    with torch.no_grad():
        h = encode_batch(model, model.params, [c])[0]
    return EmbeddingRecord(c.id, h.numpy().copy(), c.e_form_per_atom)


def embed_corpus(model: JepaModel, crystals, batch_size=256):
    """Embeddings (len(crystals), d) as numpy, in corpus order."""
    out = []
    with torch.no_grad():
        for start in range(0, len(crystals), batch_size):
            out.append(encode_batch(model, model.params, crystals[start : start + batch_size]).numpy())
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.embed_dim))


def predict(params, h_c, cond):
    """W2 silu(H_c + W1 [t||r] + b1) + b2 with row-vector embeddings."""
    h_c = as_tensor(h_c)
    cond = as_tensor(cond)
    return F.silu(h_c + cond @ params["pred.w1"] + params["pred.b1"]) @ params["pred.w2"] + params["pred.b2"]


def energy_weight(e_i, e_k, same_index=False):
    if same_index:
        return 1.0
    return 1.0 - float(np.exp(-abs(e_i - e_k)))


def energy_weight_matrix(energies):
    e = as_tensor(energies).reshape(-1)
    w = 1.0 - torch.exp(-torch.abs(e[:, None] - e[None, :]))
    return w.fill_diagonal_(1.0)


def cosine_matrix(a, b):
    na = torch.linalg.norm(a, dim=-1)
    nb = torch.linalg.norm(b, dim=-1)
    if bool((na < 1e-12).any()) or bool((nb < 1e-12).any()):
        raise DegenerateEmbedding("embedding norm below 1e-12; cosine similarity undefined")
    return (a / na[:, None]) @ (b / nb[:, None]).T


def infonce_loss(pred, target, energies, tau=0.1):
    """Energy-weighted InfoNCE over a batch of predicted/target embeddings.

    The diagonal weight is 1, so the positive term appears unweighted in the
    denominator and the loss is non-negative.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    pred, target = as_tensor(pred), as_tensor(target)
    sim = cosine_matrix(pred, target)
    logits = energy_weight_matrix(energies) * sim / tau
    pos = torch.diagonal(sim) / tau
    return -(pos - torch.logsumexp(logits, dim=1)).mean()


def sigreg_penalty(emb, directions):
    """Mean over projections of mean^2 + (var - 1)^2 of the projected batch."""
    proj = as_tensor(emb) @ as_tensor(directions).T
    mean = proj.mean(dim=0)
    var = ((proj - mean) ** 2).mean(dim=0)
    return (mean**2 + (var - 1.0) ** 2).mean()


def random_directions(num, dim, generator):
    d = torch.randn(num, dim, generator=generator, dtype=DTYPE)
    return d / torch.linalg.norm(d, dim=1, keepdim=True)


def sigreg_mse_loss(pred, target, lambda_sig=1.0, directions=None, num_projections=64, generator=None):
    pred, target = as_tensor(pred), as_tensor(target)
    mse = ((pred - target) ** 2).sum(dim=1).mean()
    if lambda_sig == 0:
        return mse
    if directions is None:
        directions = random_directions(num_projections, target.shape[1], generator or torch.Generator().manual_seed(0))
    return mse + lambda_sig * sigreg_penalty(target, directions)


# ---------------------------------------------------------------------------
# training


def _loss_on_batch(model, params, ctx, tgt, cond, energies, step_seed, directions=None):
    cfg = model.config
    train = cfg.dropout > 0
    h = encode_batch(model, params, ctx + tgt, train=train, dropout_seed=step_seed)
    b = len(ctx)
    h_c, h_t = h[:b], h[b:]
    if cfg.stop_grad_target:
        h_t = h_t.detach()
    p = predict(params, h_c, cond)
    if cfg.objective == "infonce":
        return infonce_loss(p, h_t, energies, cfg.tau)
    if cfg.objective == "sigreg":
        return sigreg_mse_loss(p, h_t, cfg.lambda_sig, directions=directions)
    raise ValueError(f"unknown objective {cfg.objective!r}")


def sample_batch(corpus, rng, batch_size):
    b = min(batch_size, len(corpus))
    idx = np.sort(rng.choice(len(corpus), size=b, replace=False))
    tgt = [corpus[i] for i in idx]
    params = [AugmentParams.sample(rng) for _ in idx]
    ctx = [make_context(c, p) for c, p in zip(tgt, params)]
    cond = np.stack([p.vector() for p in params])
    return idx, ctx, tgt, cond


def train_jepa(corpus, config: JepaConfig, model: JepaModel | None = None, callback=None):
    """Train on crystals carrying e_form_per_atom labels.

    Returns (model, TrainState, loss curve). A single numpy stream seeded from
    config.seed drives batch selection and augmentation sampling.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty corpus")
    if config.objective == "infonce" and any(c.e_form_per_atom is None for c in corpus):
        raise ValueError("infonce training needs e_form_per_atom on every crystal")
    model = model or init_model(config)
    state = TrainState(params=dict(model.params), seed=config.seed)
    rng = np.random.default_rng(config.seed)
    dir_gen = torch.Generator().manual_seed(int(config.seed) + 7)
    curve = []
    for step in range(config.steps):
        idx, ctx, tgt, cond = sample_batch(corpus, rng, config.batch_size)
        energies = np.array([c.e_form_per_atom or 0.0 for c in tgt])
        directions = None
        if config.objective == "sigreg":
            directions = random_directions(config.num_projections, config.embed_dim, dir_gen)
        ids = [corpus[i].id for i in idx]
        try:
            loss, grads = value_and_grad(
                lambda p: _loss_on_batch(model, p, ctx, tgt, cond, energies, step, directions), state.params, ids
            )
        except NonFiniteLoss:
            log.error("non-finite JEPA loss at step %d, batch %s", step, ids)
            raise
        state = optimizer_step(state, grads, config.lr)
        curve.append(loss)
        if callback is not None:
            callback(step, loss)
    model = JepaModel(config, state.params)
    return model, state, curve


def evaluate_loss(model, crystals, seed=0, params=None):
    """Objective on a fixed batch (all crystals) with seeded augmentations, no gradient."""
    rng = np.random.default_rng(seed)
    _, ctx, tgt, cond = sample_batch(crystals, rng, len(crystals))
    energies = np.array([c.e_form_per_atom or 0.0 for c in tgt])
    directions = None
    if model.config.objective == "sigreg":
        directions = random_directions(model.config.num_projections, model.embed_dim, torch.Generator().manual_seed(seed))
    with torch.no_grad():
        return float(_loss_on_batch(model, params or model.params, ctx, tgt, cond, energies, 0, directions))


def energy_rank_correlation(model: JepaModel, crystals, embeddings=None):
    """Spearman correlation between pairwise embedding distance and |delta e_form| over all pairs."""
    from scipy.stats import spearmanr

    h = embed_corpus(model, crystals) if embeddings is None else embeddings
    e = np.array([c.e_form_per_atom for c in crystals], dtype=float)
    iu = np.triu_indices(len(crystals), 1)
    dist = np.linalg.norm(h[:, None, :] - h[None, :, :], axis=-1)[iu]
    de = np.abs(e[:, None] - e[None, :])[iu]
    return float(spearmanr(dist, de).statistic)


# ---------------------------------------------------------------------------
# persistence


def save_model(path, model: JepaModel, state: TrainState | None = None):
    tensors = state_tensors(state) if state is not None else dict(model.params)
    save_checkpoint(path, tensors, config={"kind": "jepa", **asdict(model.config)}, step=state.step if state else 0)


def load_model(path):
    tensors, header = load_checkpoint(path)
    cfg = dict(header["config"])
    if cfg.pop("kind", None) != "jepa":
        raise ValueError(f"{path} is not a JEPA checkpoint")
    config = JepaConfig(**cfg)
    state = state_from_tensors(tensors, step=header["step"], seed=config.seed)
    return JepaModel(config, state.params), state
