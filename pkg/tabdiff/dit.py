"""
Noise-prediction network f_θ(z_t, m, t): a patch transformer with adaLN-Zero
timestep conditioning over the channel concatenation of the noisy image
latent and the mask latent.
"""
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import Tensor, nn

from tabdiff import numerics as nx
from tabdiff.errors import ConfigError, ScheduleError, ShapeError
from tabdiff.autoencoder import LATENT_CHANNELS

# -----------------------------------------------------------------------------
# Config

@dataclass(frozen=True)
class DiTConfig:
    depth: int = 4
    dim: int = 128
    heads: int = 4
    patch: int = 2
    in_channels: int = 2 * LATENT_CHANNELS
    out_channels: int = LATENT_CHANNELS
    latent_size: int = 8
    max_T: int = 1000
    mlp_ratio: float = 4.0
    freq_dim: int = 256

    def __post_init__(self):
        if self.depth < 1 or self.dim < 1 or self.heads < 1:
            raise ConfigError(f"dit: depth/dim/heads must be positive, got {self.depth}/{self.dim}/{self.heads}")
        if self.dim % self.heads:
            raise ConfigError(f"dit: dim {self.dim} not divisible by heads {self.heads}")
        if self.latent_size % self.patch:
            raise ConfigError(f"dit: latent size {self.latent_size} not divisible by patch {self.patch}")
        if self.in_channels not in (LATENT_CHANNELS, 2 * LATENT_CHANNELS) or self.out_channels != LATENT_CHANNELS:
            raise ConfigError(f"dit: in_channels must be 4 or 8 and out_channels 4, got "
                              f"{self.in_channels}/{self.out_channels}")
        if self.freq_dim % 2:
            raise ConfigError("dit: freq_dim must be even")

    @property
    def conditional(self) -> bool:
        return self.in_channels == 2 * LATENT_CHANNELS

    @property
    def num_tokens(self) -> int:
        return (self.latent_size // self.patch) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiTConfig":
        return cls(**d)

PRESETS = {
    "paper-256": dict(depth=12, dim=768, heads=12, patch=2, latent_size=32),
    "paper-512": dict(depth=12, dim=768, heads=12, patch=2, latent_size=64),
    "desk-64": dict(depth=4, dim=128, heads=4, patch=2, latent_size=8),
}

def preset(name: str, conditional: bool = True, **overrides) -> DiTConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name], in_channels=(2 if conditional else 1) * LATENT_CHANNELS)
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return DiTConfig(**kw)

# -----------------------------------------------------------------------------
# Layers

class Linear(nn.Module):
    def __init__(self, in_features: int, out_features: int, seed: int = 0, zero: bool = False):
        super().__init__()
        std = 0.5 * in_features ** -0.5
        w = torch.zeros(in_features, out_features) if zero else nx.random_normal((in_features, out_features), seed) * std
        self.weight = nn.Parameter(w.to(nx.default_dtype()))
        self.bias = nn.Parameter(torch.zeros(out_features, dtype=nx.default_dtype()))

    def forward(self, x: Tensor):
        return nx.linear(x, self.weight, self.bias)

def _per_token(v: Tensor, like: Tensor) -> Tensor:
    """(B, D) -> (B, N, D) matching `like` (explicit expand)."""
    return nx.expand(nx.reshape(v, (v.shape[0], 1, v.shape[1])), like.shape)

def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    s = _per_token(scale, x)
    return nx.add(nx.mul(x, nx.add(s, torch.ones_like(s))), _per_token(shift, x))

def chunk(x: Tensor, n: int) -> list[Tensor]:
    d = x.shape[-1] // n
    return [nx.narrow(x, x.dim() - 1, i * d, (i + 1) * d) for i in range(n)]

class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, seed: int = 0):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = Linear(dim, 3 * dim, seed=nx.derive_seed(seed, "qkv"))  # merged q, k, v
        self.proj = Linear(dim, dim, seed=nx.derive_seed(seed, "proj"))

    def forward(self, x: Tensor):
        B, N, D = x.shape
        qkv = nx.reshape(self.qkv(x), (B, N, 3, self.heads, self.head_dim))
        qkv = nx.transpose(qkv, (2, 0, 3, 1, 4))  # 3, B, H, N, hd
        q, k, v = (nx.reshape(nx.narrow(qkv, 0, i, i + 1), (B, self.heads, N, self.head_dim)) for i in range(3))
        logits = nx.scalar_scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), self.head_dim ** -0.5)
        y = nx.matmul(nx.softmax(logits, axis=-1), v)
        y = nx.reshape(nx.transpose(y, (0, 2, 1, 3)), (B, N, D))
        return self.proj(y)

class MLP(nn.Module):
    def __init__(self, dim: int, ratio: float = 4.0, seed: int = 0):
        super().__init__()
        hdim = int(dim * ratio)
        self.fc1 = Linear(dim, hdim, seed=nx.derive_seed(seed, "fc1"))
        self.fc2 = Linear(hdim, dim, seed=nx.derive_seed(seed, "fc2"))

    def forward(self, x: Tensor):
        return self.fc2(nx.gelu(self.fc1(x)))

class DiTBlock(nn.Module):
    """
    x + gate1 * Attn(modulate(LN(x), shift1, scale1)), then the same with the
    MLP; all six modulation vectors regressed from the conditioning vector by a
    zero-initialized projection, so a fresh block is the identity.
    """
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.attn = Attention(dim, heads, seed=nx.derive_seed(seed, "attn"))
        self.mlp = MLP(dim, mlp_ratio, seed=nx.derive_seed(seed, "mlp"))
        self.adaLN_modulation = Linear(dim, 6 * dim, zero=True)

    def forward(self, x: Tensor, c: Tensor):
        if c.dim() != 2 or c.shape[1] != self.dim or x.shape[-1] != self.dim or c.shape[0] != x.shape[0]:
            raise ShapeError("adaln_block", x.shape, c.shape)
        shift1, scale1, gate1, shift2, scale2, gate2 = chunk(self.adaLN_modulation(nx.silu(c)), 6)
        h = self.attn(modulate(nx.layer_norm(x, eps=1e-6), shift1, scale1))
        x = nx.add(x, nx.mul(_per_token(gate1, h), h))
        h = self.mlp(modulate(nx.layer_norm(x, eps=1e-6), shift2, scale2))
        return nx.add(x, nx.mul(_per_token(gate2, h), h))

class FinalLayer(nn.Module):
    def __init__(self, dim: int, patch: int, out_channels: int):
        super().__init__()
        self.adaLN_modulation = Linear(dim, 2 * dim, zero=True)
        self.linear = Linear(dim, patch * patch * out_channels, zero=True)

    def forward(self, x: Tensor, c: Tensor):
        shift, scale = chunk(self.adaLN_modulation(nx.silu(c)), 2)
        return self.linear(modulate(nx.layer_norm(x, eps=1e-6), shift, scale))

# -----------------------------------------------------------------------------
# Conditioning, patches, timesteps

def concat_condition(z_t: Tensor, m_latent: Tensor) -> Tensor:
    """Channels [0, 4) = z_t, [4, 8) = mask latent."""
    if z_t.shape != m_latent.shape or z_t.shape[-3] != LATENT_CHANNELS:
        raise ShapeError("concat_condition", z_t.shape, m_latent.shape)
    return nx.concat([z_t, m_latent], axis=z_t.dim() - 3)

def patchify(u: Tensor, p: int) -> Tensor:
    """(C, h, w) -> [(h/p)(w/p), C p²], or batched (B, C, h, w) -> (B, N, C p²); row-major patches."""
    single = u.dim() == 3
    if single:
        u = nx.reshape(u, (1,) + tuple(u.shape))
    B, C, h, w = u.shape
    if h % p or w % p:
        raise ShapeError("patchify", u.shape, (p, p), detail="spatial dims must be divisible by the patch size")
    x = nx.reshape(u, (B, C, h // p, p, w // p, p))
    x = nx.transpose(x, (0, 2, 4, 1, 3, 5))
    x = nx.reshape(x, (B, (h // p) * (w // p), C * p * p))
    return nx.reshape(x, tuple(x.shape[1:])) if single else x

def unpatchify(tokens: Tensor, channels: int, h: int, w: int, p: int) -> Tensor:
    single = tokens.dim() == 2
    if single:
        tokens = nx.reshape(tokens, (1,) + tuple(tokens.shape))
    B, N, width = tokens.shape
    if h % p or w % p or N != (h // p) * (w // p) or width != channels * p * p:
        raise ShapeError("unpatchify", tokens.shape, (channels, h, w), detail=f"patch {p}")
    x = nx.reshape(tokens, (B, h // p, w // p, channels, p, p))
    x = nx.transpose(x, (0, 3, 1, 4, 2, 5))
    x = nx.reshape(x, (B, channels, h, w))
    return nx.reshape(x, (channels, h, w)) if single else x

def _timesteps(t, max_T: int) -> np.ndarray:
    ts = np.atleast_1d(np.asarray(t.cpu() if isinstance(t, Tensor) else t, dtype=np.int64))
    bad = ts[(ts < 1) | (ts > max_T)]
    if len(bad):
        raise ScheduleError(f"timestep {int(bad[0])} outside 1..{max_T}")
    return ts

def timestep_embed(t, dim: int, max_T: int = 1000) -> Tensor:
    """
    Sinusoidal embedding: frequencies 10000^(-i/half) for i < half, sin half
    then cos half. Returns (dim,) for a scalar t, else (len(t), dim).
    """
    ts = _timesteps(t, max_T)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = ts[:, None].astype(np.float64) * freqs[None]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(ts), 1))], axis=1)
    out = torch.from_numpy(emb).to(nx.default_dtype())
    return out[0] if np.ndim(t) == 0 else out

class TimestepEmbedder(nn.Module):
    def __init__(self, dim: int, freq_dim: int, max_T: int, seed: int = 0):
        super().__init__()
        self.freq_dim, self.max_T = freq_dim, max_T
        self.fc1 = Linear(freq_dim, dim, seed=nx.derive_seed(seed, "fc1"))
        self.fc2 = Linear(dim, dim, seed=nx.derive_seed(seed, "fc2"))

    def forward(self, t) -> Tensor:
        e = timestep_embed(np.atleast_1d(np.asarray(t)), self.freq_dim, self.max_T)
        return self.fc2(nx.silu(self.fc1(e)))

# -----------------------------------------------------------------------------
# Model

class DiT(nn.Module):
    def __init__(self, config: DiTConfig, seed: int = 0):
        super().__init__()
        self.config = c = config
        s = lambda name: nx.derive_seed(seed, name)
        self.patch_embed = Linear(c.in_channels * c.patch ** 2, c.dim, seed=s("patch_embed"))
        self.pos_embed = nn.Parameter((nx.random_normal((1, c.num_tokens, c.dim), s("pos_embed")) * 0.02)
                                      .to(nx.default_dtype()))
        self.t_embedder = TimestepEmbedder(c.dim, c.freq_dim, c.max_T, seed=s("t_embedder"))
        self.blocks = nn.ModuleList([DiTBlock(c.dim, c.heads, c.mlp_ratio, seed=s(f"block{i}")) for i in range(c.depth)])
        self.final_layer = FinalLayer(c.dim, c.patch, c.out_channels)

    def forward(self, u: Tensor, t) -> Tensor:
        """u: (B, in_channels, h, w) -> ε̂: (B, 4, h, w)."""
        c = self.config
        B, C, h, w = u.shape
        if C != c.in_channels or h != c.latent_size or w != c.latent_size:
            raise ShapeError("predict_noise", u.shape, (B, c.in_channels, c.latent_size, c.latent_size))
        ts = _timesteps(t, c.max_T)
        if len(ts) == 1 and B > 1:
            ts = np.repeat(ts, B)
        if len(ts) != B:
            raise ShapeError("predict_noise", u.shape, ts.shape, detail="one timestep per batch element")
        x = self.patch_embed(patchify(u, c.patch))
        x = nx.add(x, nx.expand(self.pos_embed, x.shape))
        cond = self.t_embedder(ts)
        for block in self.blocks:
            x = block(x, cond)
        return unpatchify(self.final_layer(x, cond), c.out_channels, h, w, c.patch)

def predict_noise(z_t: Tensor, m_latent: Tensor | None, t, model: DiT) -> Tensor:
    """ε̂ for (4, h, w) or (B, 4, h, w) noisy latents; m_latent is required iff the model is conditional."""
    if model.config.conditional and m_latent is None:
        raise ConfigError("conditional model needs a mask latent")
    if not model.config.conditional and m_latent is not None:
        raise ConfigError("unconditional model takes no mask latent")
    single = z_t.dim() == 3
    if single:
        z_t = z_t[None]
        m_latent = m_latent[None] if m_latent is not None else None
    u = concat_condition(z_t, m_latent) if m_latent is not None else z_t
    out = model(u, t)
    return out[0] if single else out

# -----------------------------------------------------------------------------
# Persistence

def dit_tensors(model: DiT, prefix: str = "dit.") -> dict[str, Tensor]:
    return {f"{prefix}{k}": v.detach() for k, v in model.state_dict().items()}

def dit_from_tensors(config: DiTConfig, tensors: dict[str, Tensor], prefix: str = "dit.") -> DiT:
    model = DiT(config)
    model.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    return model

def block_grad_norms(model: DiT) -> list[float]:
    return [math.sqrt(sum(float((p.grad.double() ** 2).sum()) for p in b.parameters() if p.grad is not None))
            for b in model.blocks]
