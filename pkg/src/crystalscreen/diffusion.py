"""Desk-scale DDPM over per-atom crystal representations.

One Gaussian process runs over the whole [coords | one-hot | code6] row of
every atom. Rows are affinely normalized with corpus statistics kept in the
checkpoint; the denoiser is the shared Transformer encoder with a sinusoidal
timestep embedding. Coordinates are noised in unwrapped space and wrapped only
at decode time.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .crystal_core import MAX_ATOMS, NUM_SPECIES, REP_WIDTH, Crystal, crystal_rep, unflatten_sym, wrap_frac
from .errors import DecodeFailure, NonFiniteLoss, StepOutOfRange
from .tensor_nn import (
    DTYPE,
    EncoderConfig,
    TrainState,
    as_tensor,
    encoder_forward,
    init_encoder_params,
    load_checkpoint,
    optimizer_step,
    save_checkpoint,
    sinusoidal_embed,
    state_from_tensors,
    state_tensors,
    value_and_grad,
)

log = logging.getLogger(__name__)

COSINE_S = 0.008
BETA_MAX = 0.999
# eigenvalue floor (Å) below which a decoded lattice counts as degenerate
MIN_LATTICE_EIG = 0.5


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    kind: str = "custom"

    @classmethod
    def from_betas(cls, beta, kind="custom"):
        beta = np.asarray(beta, dtype=float)
        if beta.ndim != 1 or len(beta) < 1 or np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("betas must be a non-empty vector in (0, 1)")
        alpha = 1.0 - beta
        return cls(len(beta), beta, alpha, np.cumprod(alpha), kind)

    @classmethod
    def cosine(cls, T=256, s=COSINE_S):
        t = np.arange(T + 1, dtype=float)
        f = np.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
        ab = f / f[0]
        beta = np.minimum(1.0 - ab[1:] / ab[:-1], BETA_MAX)
        # alpha_bar is rebuilt from the clipped betas so the three arrays stay consistent
        return cls.from_betas(beta, "cosine")

    @classmethod
    def linear(cls, T=256, beta_1=1e-4, beta_T=0.02):
        """Linear betas; the classic 1000-step endpoints are rescaled by 1000/T."""
        scale = 1000.0 / T
        return cls.from_betas(np.linspace(scale * beta_1, min(scale * beta_T, BETA_MAX), T), "linear")

    @classmethod
    def make(cls, kind, T):
        if kind == "cosine":
            return cls.cosine(T)
        if kind == "linear":
            return cls.linear(T)
        raise ValueError(f"unknown schedule {kind!r}")

    def check_step(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise StepOutOfRange(f"timestep outside 1..{self.T}: {t}")

    def ab(self, t):
        """alpha_bar at 1-based step t, with alpha_bar_0 = 1."""
        t = np.asarray(t, dtype=int)
        return np.where(t == 0, 1.0, self.alpha_bar[np.maximum(t, 1) - 1])

    def posterior_variance(self, t):
        t = int(t)
        self.check_step(t)
        return (1.0 - float(self.ab(t - 1))) / (1.0 - float(self.ab(t))) * float(self.beta[t - 1])


def _per_item(values, x):
    v = as_tensor(values)
    return v if v.dim() == 0 else v.reshape(-1, *([1] * (x.dim() - 1)))


def forward_noise(schedule: NoiseSchedule, x0, t, eps):
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps. t is a scalar or one step per leading item."""
    x0, eps = as_tensor(x0), as_tensor(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    schedule.check_step(t)
    ab = _per_item(schedule.ab(t), x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def reverse_step(schedule: NoiseSchedule, eps_pred, x_t, t, z=None):
    """One ancestral step x_t -> x_{t-1} given the predicted noise."""
    t = int(t)
    schedule.check_step(t)
    x_t, eps_pred = as_tensor(x_t), as_tensor(eps_pred)
    a = float(schedule.alpha[t - 1])
    b = float(schedule.beta[t - 1])
    ab = float(schedule.ab(t))
    mean = (x_t - b / math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(a)
    if t == 1 or z is None:
        return mean
    return mean + math.sqrt(schedule.posterior_variance(t)) * as_tensor(z)


def ddpm_loss(denoiser, schedule: NoiseSchedule, x0, mask=None, t=None, eps=None, generator=None):
    """Mean over items of the squared noise-prediction error summed over real atoms.

    denoiser(x_t, t, mask) -> predicted noise with the shape of x_t; t and eps
    are drawn (uniform steps, standard normal noise) when not supplied.
    """
    x0 = as_tensor(x0)
    if x0.dim() == 2:
        x0 = x0.unsqueeze(0)
        mask = None if mask is None else torch.as_tensor(mask).reshape(1, -1)
    b = x0.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    if mask is None:
        mask = torch.ones(x0.shape[:2], dtype=torch.bool)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if t is None:
        t = torch.randint(1, schedule.T + 1, (b,), generator=generator)
    t = torch.as_tensor(t).reshape(-1)
    if t.numel() == 1:
        t = t.expand(b)
    if eps is None:
        eps = torch.randn(x0.shape, generator=generator, dtype=DTYPE)
    eps = as_tensor(eps) * mask[..., None]
    x_t = forward_noise(schedule, x0, t.numpy(), eps) * mask[..., None]
    pred = denoiser(x_t, t, mask)
    err = ((pred - eps) ** 2).sum(dim=-1) * mask
    return err.sum(dim=1).mean()


# ---------------------------------------------------------------------------
# model


@dataclass
class DiffusionConfig:
    layers: int = 2
    # must exceed the 109-wide row, or noise cannot pass through the token embedding
    hidden_dim: int = 128
    heads: int = 4
    time_dim: int = 32
    dropout: float = 0.0
    T: int = 256
    schedule: str = "cosine"
    lr: float = 1e-3
    batch_size: int = 32
    steps: int = 2000
    seed: int = 0
    std_floor: float = 1e-2
    # multiplies the normalized coords / one-hot / lattice blocks; larger means less relative noise
    block_scale: tuple = (1.0, 1.0, 1.0)
    # clamp the implied x0 to the (slightly widened) training range while sampling
    clip_x0: bool = True

    def __post_init__(self):
        self.block_scale = tuple(float(v) for v in self.block_scale)
        if len(self.block_scale) != 3 or min(self.block_scale) <= 0:
            raise ValueError("block_scale needs three positive entries")

    def encoder_config(self):
        return EncoderConfig(
            layers=self.layers,
            hidden_dim=self.hidden_dim,
            heads=self.heads,
            dropout=self.dropout,
            use_cls=False,
            d_in=REP_WIDTH,
            d_out=REP_WIDTH,
            time_dim=self.time_dim,
        )


@dataclass
class DiffusionModel:
    config: DiffusionConfig
    params: dict
    mean: np.ndarray
    std: np.ndarray
    natoms_hist: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    @property
    def schedule(self):
        return NoiseSchedule.make(self.config.schedule, self.config.T)

    @property
    def state_dim(self):
        return REP_WIDTH

    def denoiser(self, params=None, train=False, dropout_seed=None):
        """Closure (x_t, t, mask) -> predicted noise over normalized rows."""
        params = self.params if params is None else params
        cfg = self.config.encoder_config()

        def fn(x_t, t, mask=None):
            temb = sinusoidal_embed(as_tensor(t).reshape(-1), cfg.time_dim)
            out, _ = encoder_forward(cfg, params, x_t, mask=mask, timestep_embed=temb, train=train, dropout_seed=dropout_seed)
            return out

        return fn

    def _scale(self):
        s = np.ones(REP_WIDTH)
        for (lo, hi), v in zip(BLOCKS, self.config.block_scale):
            s[lo:hi] = v
        return s

    def normalize(self, rep):
        return (np.asarray(rep, dtype=float) - self.mean) / self.std * self._scale()

    def denormalize(self, z):
        return np.asarray(z, dtype=float) / self._scale() * self.std + self.mean


BLOCKS = ((0, 3), (3, 3 + NUM_SPECIES), (3 + NUM_SPECIES, REP_WIDTH))


def corpus_statistics(crystals, std_floor=1e-2):
    """Per-block (coords, one-hot, code6) mean and floored std over all atom rows,
    broadcast to row width; the atom-count histogram; per-column data range."""
    rows = np.vstack([crystal_rep(c) for c in crystals])
    mean = np.zeros(REP_WIDTH)
    std = np.zeros(REP_WIDTH)
    for lo, hi in BLOCKS:
        mean[lo:hi] = rows[:, lo:hi].mean()
        std[lo:hi] = max(rows[:, lo:hi].std(), std_floor)
    hist = np.zeros(MAX_ATOMS + 1)
    for c in crystals:
        hist[c.num_atoms] += 1
    pad = 0.1 * (rows.max(axis=0) - rows.min(axis=0)) + 0.05
    return mean, std, hist, rows.min(axis=0) - pad, rows.max(axis=0) + pad


def init_model(config: DiffusionConfig, corpus) -> DiffusionModel:
    params = init_encoder_params(config.encoder_config(), seed=config.seed)
    return DiffusionModel(config, params, *corpus_statistics(corpus, config.std_floor))


def _padded(model: DiffusionModel, crystals):
    nmax = max(c.num_atoms for c in crystals)
    x = np.zeros((len(crystals), nmax, REP_WIDTH))
    mask = np.zeros((len(crystals), nmax), dtype=bool)
    for i, c in enumerate(crystals):
        x[i, : c.num_atoms] = model.normalize(crystal_rep(c))
        mask[i, : c.num_atoms] = True
    return torch.as_tensor(x, dtype=DTYPE), torch.as_tensor(mask)


def train_diffusion(corpus, config: DiffusionConfig, model: DiffusionModel | None = None, lr=None, steps=None, callback=None):
    """Fit the denoiser. When a model is given, training continues from its weights and normalization."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty corpus")
    model = model or init_model(config, corpus)
    lr = config.lr if lr is None else lr
    steps = config.steps if steps is None else steps
    schedule = model.schedule
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(int(config.seed))
    state = TrainState(params=dict(model.params), seed=config.seed)
    curve = []
    for step in range(steps):
        b = config.batch_size
        idx = np.sort(rng.choice(len(corpus), size=b, replace=len(corpus) < b))
        batch = [corpus[i] for i in idx]
        x0, mask = _padded(model, batch)
        t = torch.randint(1, schedule.T + 1, (b,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen, dtype=DTYPE)

        def loss_fn(p):
            den = model.denoiser(p, train=config.dropout > 0, dropout_seed=step)
            return ddpm_loss(den, schedule, x0, mask, t=t, eps=eps)

        ids = [c.id for c in batch]
        try:
            loss, grads = value_and_grad(loss_fn, state.params, ids)
        except NonFiniteLoss:
            log.error("non-finite diffusion loss at step %d, batch %s", step, ids)
            raise
        state = optimizer_step(state, grads, lr)
        curve.append(loss)
        if callback is not None:
            callback(step, loss)
    out = DiffusionModel(model.config, state.params, model.mean, model.std, model.natoms_hist, model.lo, model.hi)
    return out, state, curve


# ---------------------------------------------------------------------------
# sampling and decoding


def decode(model: DiffusionModel, rep, id=""):
    """Map one denormalized N x 109 block to a Crystal; flags list every repair or failure."""
    rep = np.asarray(rep, dtype=float)
    flags = []
    coords = wrap_frac(rep[:, :3])
    species = tuple(int(s) + 1 for s in np.argmax(rep[:, 3 : 3 + NUM_SPECIES], axis=1))
    sym = unflatten_sym(rep[:, 3 + NUM_SPECIES :].mean(axis=0))
    w, v = np.linalg.eigh(sym)
    if w.min() <= 0:
        flags.append("lattice_projected")
    if w.min() < MIN_LATTICE_EIG:
        flags.append("degenerate_lattice")
    w = np.maximum(w, MIN_LATTICE_EIG)
    lattice = (v * w) @ v.T
    lattice = 0.5 * (lattice + lattice.T)
    meta = {"decode_ok": "degenerate_lattice" not in flags, "decode_flags": flags}
    return Crystal(coords, species, lattice, id=id, meta=meta)


def check_decoded(c: Crystal):
    if not c.meta.get("decode_ok", True):
        raise DecodeFailure(f"{c.id}: {', '.join(c.meta.get('decode_flags', []))}")
    return c


def clip_eps(schedule: NoiseSchedule, x_t, t, eps, lo, hi):
    """Noise estimate consistent with the implied x0 clamped to [lo, hi]."""
    ab = float(schedule.ab(t))
    x0 = (x_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
    x0 = torch.maximum(torch.minimum(x0, hi), lo)
    return (x_t - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)


def sample(model: DiffusionModel, count, seed=0, n_atoms=None, id_prefix="gen"):
    """Ancestral sampling of `count` crystals.

    Every sample owns a torch generator spawned from `seed`, so each chain is
    reproducible independently of batch composition. Atom counts come from the
    training histogram unless given.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    ss = np.random.SeedSequence(int(seed))
    children = ss.spawn(count + 1)
    rng = np.random.default_rng(children[0])
    if n_atoms is None:
        p = model.natoms_hist / model.natoms_hist.sum()
        sizes = rng.choice(len(p), size=count, p=p)
    else:
        sizes = np.broadcast_to(np.asarray(n_atoms, dtype=int), (count,)).copy()
    if np.any(sizes < 1) or np.any(sizes > MAX_ATOMS):
        raise ValueError("atom counts must lie in 1..MAX_ATOMS")
    gens = [torch.Generator().manual_seed(int(ch.generate_state(1, np.uint64)[0] >> np.uint64(1))) for ch in children[1:]]
    nmax = int(sizes.max())
    mask = torch.as_tensor(np.arange(nmax)[None, :] < sizes[:, None])

    def noise():
        return torch.stack([torch.randn(nmax, REP_WIDTH, generator=g, dtype=DTYPE) for g in gens]) * mask[..., None]

    schedule = model.schedule
    den = model.denoiser()
    lo = torch.as_tensor(model.normalize(model.lo), dtype=DTYPE)
    hi = torch.as_tensor(model.normalize(model.hi), dtype=DTYPE)
    with torch.no_grad():
        x = noise()
        for t in range(schedule.T, 0, -1):
            eps = den(x, torch.full((count,), t), mask)
            if model.config.clip_x0:
                eps = clip_eps(schedule, x, t, eps, lo, hi)
            z = noise() if t > 1 else None
            x = reverse_step(schedule, eps, x, t, z) * mask[..., None]
    x = x.numpy()
    out = []
    for i in range(count):
        rep = model.denormalize(x[i, : sizes[i]])
        out.append(decode(model, rep, id=f"{id_prefix}-{seed}-{i:05d}"))
    return out


# ---------------------------------------------------------------------------
# persistence


def save_model(path, model: DiffusionModel, state: TrainState | None = None):
    tensors = state_tensors(state) if state is not None else dict(model.params)
    tensors["norm.mean"] = model.mean
    tensors["norm.std"] = model.std
    tensors["natoms.hist"] = model.natoms_hist
    tensors["norm.lo"] = model.lo
    tensors["norm.hi"] = model.hi
    cfg = asdict(model.config)
    cfg["block_scale"] = list(cfg["block_scale"])
    save_checkpoint(path, tensors, config={"kind": "diffusion", **cfg}, step=state.step if state else 0)


def load_model(path):
    tensors, header = load_checkpoint(path)
    cfg = dict(header["config"])
    if cfg.pop("kind", None) != "diffusion":
        raise ValueError(f"{path} is not a diffusion checkpoint")
    config = DiffusionConfig(**cfg)
    mean = tensors.pop("norm.mean").numpy()
    std = tensors.pop("norm.std").numpy()
    hist = tensors.pop("natoms.hist").numpy()
    lo = tensors.pop("norm.lo").numpy()
    hi = tensors.pop("norm.hi").numpy()
    state = state_from_tensors(tensors, step=header["step"], seed=config.seed)
    return DiffusionModel(config, state.params, mean, std, hist, lo, hi), state
