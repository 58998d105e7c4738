"""Differentiable substrate shared by the JEPA and diffusion models.

Tensors are float64 torch tensors; reverse-mode gradients come from
torch.autograd. Models are plain functions over named parameter dicts so
that finite-difference checks, checkpointing and the optimizer all see the
same flat view.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CheckpointError, NonFiniteLoss, ShapeMismatch

DTYPE = torch.float64
INIT_STD = 0.02
LN_EPS = 1e-5
CHECKPOINT_MAGIC = b"CSCK"
CHECKPOINT_VERSION = 1


def as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    hidden_dim: int = 64
    heads: int = 4
    dropout: float = 0.0
    use_cls: bool = True
    d_in: int = 109
    d_out: int = 64
    ffn_mult: int = 4
    time_dim: int = 0

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise ValueError("hidden_dim must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")

    def to_dict(self):
        return asdict(self)


# full-scale presets, kept for reference; desk presets are what tests and the CLI default to.
PRESETS = {
    "jepa_full": EncoderConfig(layers=8, hidden_dim=512, heads=16, dropout=0.0, use_cls=True, d_out=512),
    "diffusion_full": EncoderConfig(layers=12, hidden_dim=1024, heads=8, dropout=0.01, use_cls=False, d_out=109, time_dim=1024),
    "jepa_desk": EncoderConfig(layers=2, hidden_dim=64, heads=4, dropout=0.0, use_cls=True, d_out=64),
    "diffusion_desk": EncoderConfig(layers=3, hidden_dim=96, heads=4, dropout=0.01, use_cls=False, d_out=109, time_dim=64),
}


def init_encoder_params(cfg: EncoderConfig, seed=0, prefix=""):
    g = torch.Generator().manual_seed(int(seed))
    h, f = cfg.hidden_dim, cfg.hidden_dim * cfg.ffn_mult

    def normal(*shape):
        return torch.randn(*shape, generator=g, dtype=DTYPE) * INIT_STD

    p = {
        "in.w": normal(cfg.d_in, h),
        "in.b": torch.zeros(h, dtype=DTYPE),
    }
    if cfg.use_cls:
        p["cls"] = normal(h)
    if cfg.time_dim:
        p["time.w"] = normal(cfg.time_dim, h)
        p["time.b"] = torch.zeros(h, dtype=DTYPE)
    for l in range(cfg.layers):
        q = f"l{l}."
        p[q + "ln1.g"] = torch.ones(h, dtype=DTYPE)
        p[q + "ln1.b"] = torch.zeros(h, dtype=DTYPE)
        for name in ("q", "k", "v", "o"):
            p[q + f"attn.w{name}"] = normal(h, h)
            p[q + f"attn.b{name}"] = torch.zeros(h, dtype=DTYPE)
        p[q + "ln2.g"] = torch.ones(h, dtype=DTYPE)
        p[q + "ln2.b"] = torch.zeros(h, dtype=DTYPE)
        p[q + "ff.w1"] = normal(h, f)
        p[q + "ff.b1"] = torch.zeros(f, dtype=DTYPE)
        p[q + "ff.w2"] = normal(f, h)
        p[q + "ff.b2"] = torch.zeros(h, dtype=DTYPE)
    p["lnf.g"] = torch.ones(h, dtype=DTYPE)
    p["lnf.b"] = torch.zeros(h, dtype=DTYPE)
    p["out.w"] = normal(h, cfg.d_out)
    p["out.b"] = torch.zeros(cfg.d_out, dtype=DTYPE)
    return {prefix + k: v for k, v in p.items()}


def _dropout(x, rate, gen):
    if rate <= 0.0 or gen is None:
        return x
    keep = torch.rand(x.shape, generator=gen, dtype=DTYPE) >= rate
    return x * keep / (1.0 - rate)


def _attention(x, p, q, heads, key_mask):
    b, n, h = x.shape
    dh = h // heads

    def proj(name):
        return (x @ p[q + f"attn.w{name}"] + p[q + f"attn.b{name}"]).view(b, n, heads, dh).transpose(1, 2)

    qh, kh, vh = proj("q"), proj("k"), proj("v")
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(dh)
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[:, None, None, :], -1e30)
    att = torch.softmax(scores, dim=-1)
    out = (att @ vh).transpose(1, 2).reshape(b, n, h)
    return out @ p[q + "attn.wo"] + p[q + "attn.bo"]


def encoder_forward(cfg: EncoderConfig, params, tokens, mask=None, timestep_embed=None, train=False, dropout_seed=None, prefix=""):
    """Pre-norm Transformer over an unordered token set.

    tokens: (N, d_in) or (B, N, d_in); mask: (B, N) bool, True for real tokens.
    timestep_embed: (time_dim,) or (B, time_dim); projected and added at every layer.
    Returns (per_token, cls) with cls None unless cfg.use_cls.
    """
    p = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)} if prefix else params
    x = as_tensor(tokens)
    single = x.dim() == 2
    if single:
        x = x.unsqueeze(0)
        if mask is not None:
            mask = torch.as_tensor(mask).reshape(1, -1)
    if x.dim() != 3 or x.shape[-1] != cfg.d_in:
        raise ShapeMismatch(f"expected tokens (..., N, {cfg.d_in}), got {tuple(x.shape)}")
    if x.shape[1] < 1:
        raise ShapeMismatch("at least one token is required")
    b = x.shape[0]
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=torch.bool)
        if mask.shape != x.shape[:2]:
            raise ShapeMismatch(f"mask shape {tuple(mask.shape)} does not match tokens {tuple(x.shape[:2])}")
    gen = None
    if train and cfg.dropout > 0.0:
        gen = torch.Generator().manual_seed(int(dropout_seed or 0))

    h = x @ p["in.w"] + p["in.b"]
    if cfg.use_cls:
        h = torch.cat([p["cls"].expand(b, 1, -1), h], dim=1)
        if mask is not None:
            mask = torch.cat([torch.ones(b, 1, dtype=torch.bool), mask], dim=1)
    temb = None
    if timestep_embed is not None:
        if not cfg.time_dim:
            raise ShapeMismatch("config has no timestep projection")
        te = as_tensor(timestep_embed)
        if te.dim() == 1:
            te = te.unsqueeze(0).expand(b, -1)
        if te.shape != (b, cfg.time_dim):
            raise ShapeMismatch(f"timestep embedding shape {tuple(te.shape)} != ({b}, {cfg.time_dim})")
        temb = (te @ p["time.w"] + p["time.b"]).unsqueeze(1)

    hd = cfg.hidden_dim
    for l in range(cfg.layers):
        q = f"l{l}."
        if temb is not None:
            h = h + temb
        a = F.layer_norm(h, (hd,), p[q + "ln1.g"], p[q + "ln1.b"], LN_EPS)
        h = h + _dropout(_attention(a, p, q, cfg.heads, mask), cfg.dropout, gen)
        a = F.layer_norm(h, (hd,), p[q + "ln2.g"], p[q + "ln2.b"], LN_EPS)
        a = F.silu(a @ p[q + "ff.w1"] + p[q + "ff.b1"]) @ p[q + "ff.w2"] + p[q + "ff.b2"]
        h = h + _dropout(a, cfg.dropout, gen)
    h = F.layer_norm(h, (hd,), p["lnf.g"], p["lnf.b"], LN_EPS)
    out = h @ p["out.w"] + p["out.b"]
    cls = None
    if cfg.use_cls:
        cls, out = out[:, 0], out[:, 1:]
    if single:
        out = out[0]
        cls = None if cls is None else cls[0]
    return out, cls


def sinusoidal_embed(t, dim):
    """Interleaved [sin, cos] of t at geometric frequencies 10000^(-2i/dim)."""
    if dim % 2:
        raise ValueError("dim must be even")
    t = as_tensor(t)
    scalar = t.dim() == 0
    t = t.reshape(-1, 1)
    freqs = torch.pow(torch.tensor(10000.0, dtype=DTYPE), -torch.arange(0, dim, 2, dtype=DTYPE) / dim)
    ang = t * freqs
    out = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).reshape(t.shape[0], dim)
    return out[0] if scalar else out


# ---------------------------------------------------------------------------
# training state, gradients, optimizer


@dataclass
class TrainState:
    params: dict
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    seed: int = 0

    def __post_init__(self):
        for k, p in self.params.items():
            self.m.setdefault(k, torch.zeros_like(p))
            self.v.setdefault(k, torch.zeros_like(p))


def value_and_grad(loss_fn, params, ids=None):
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    loss = loss_fn(leaves)
    if not torch.isfinite(loss).all():
        raise NonFiniteLoss(f"loss is {loss.item()}", batch_ids=ids)
    loss.backward()
    grads = {k: (v.grad if v.grad is not None else torch.zeros_like(v)) for k, v in leaves.items()}
    return float(loss.detach()), grads


def grad(loss_fn, state_or_params, ids=None):
    params = state_or_params.params if isinstance(state_or_params, TrainState) else state_or_params
    return value_and_grad(loss_fn, params, ids)[1]


def optimizer_step(state: TrainState, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Adaptive-moment update with bias correction; returns a new TrainState."""
    t = state.step + 1
    params, m, v = {}, {}, {}
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, p in state.params.items():
        g = grads.get(k)
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {k} has shape {tuple(g.shape)}, param {tuple(p.shape)}")
        mk = beta1 * state.m[k] + (1.0 - beta1) * g
        vk = beta2 * state.v[k] + (1.0 - beta2) * g * g
        params[k] = p - lr * (mk / c1) / (torch.sqrt(vk / c2) + eps)
        m[k], v[k] = mk, vk
    return TrainState(params=params, m=m, v=v, step=t, seed=state.seed)


def finite_difference_check(loss_fn, params, h=1e-5, max_entries=24, seed=0, names=None, floor=1e-6):
    """Central-difference check of autograd gradients.

    Returns {name: relative error} where the error is
    ||g_auto - g_fd|| / max(||g_auto||, ||g_fd||, floor * G) over a random subset of
    entries, G being the full gradient norm across all parameters.
    """
    rng = np.random.default_rng(seed)
    _, auto = value_and_grad(loss_fn, params)
    base = {k: v.detach().clone() for k, v in params.items()}
    total = math.sqrt(sum(float((g**2).sum()) for g in auto.values()))
    out = {}
    with torch.no_grad():
        for name in names or sorted(base):
            flat = base[name].reshape(-1)
            idx = np.arange(flat.numel())
            if len(idx) > max_entries:
                idx = np.sort(rng.choice(len(idx), max_entries, replace=False))
            fd = np.zeros(len(idx))
            for n, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(loss_fn(base))
                flat[i] = orig - h
                down = float(loss_fn(base))
                flat[i] = orig
                fd[n] = (up - down) / (2 * h)
            ga = auto[name].reshape(-1)[idx].numpy()
            # floor keeps exactly-zero gradients (e.g. key biases under softmax) from amplifying fd noise
            scale = max(np.linalg.norm(ga), np.linalg.norm(fd), floor * total, 1e-300)
            out[name] = float(np.linalg.norm(ga - fd) / scale)
    return out


# ---------------------------------------------------------------------------
# checkpoints: magic, version byte, header length, JSON header, raw little-endian float64 payloads


def save_checkpoint(path, tensors, config=None, step=0, extra=None):
    names = sorted(tensors)
    arrays = []
    header = {"config": config or {}, "step": int(step), "extra": extra or {}, "tensors": []}
    offset = 0
    for name in names:
        t = tensors[name]
        a = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        a = np.asarray(a, dtype="<f8", order="C")
        header["tensors"].append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.nbytes
        arrays.append(a)
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<B", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for a in arrays:
            fh.write(a.tobytes())


def load_checkpoint(path):
    """Returns (tensors as float64 torch tensors, header dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version = blob[4]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", blob[5:13])
    header = json.loads(blob[13 : 13 + hlen].decode())
    base = 13 + hlen
    tensors = {}
    for rec in header["tensors"]:
        n = int(np.prod(rec["shape"])) if rec["shape"] else 1
        start = base + rec["offset"]
        a = np.frombuffer(blob[start : start + 8 * n], dtype="<f8").reshape(tuple(rec["shape"]))
        tensors[rec["name"]] = torch.tensor(a.copy(), dtype=DTYPE)
    return tensors, header


def state_tensors(state: TrainState):
    """Flatten a TrainState into checkpointable tensors (params plus optimizer moments)."""
    out = dict(state.params)
    out.update({f"adam.m/{k}": v for k, v in state.m.items()})
    out.update({f"adam.v/{k}": v for k, v in state.v.items()})
    return out


def state_from_tensors(tensors, step=0, seed=0):
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    m = {k[len("adam.m/"):]: v for k, v in tensors.items() if k.startswith("adam.m/")}
    v = {k[len("adam.v/"):]: v for k, v in tensors.items() if k.startswith("adam.v/")}
    return TrainState(params=params, m=m, v=v, step=step, seed=seed)
