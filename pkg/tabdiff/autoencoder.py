"""
Small convolutional VAE with the latent contract 3xHxW -> 4x(H/8)x(W/8),
the latent scaling factor, and the on-disk latent cache.
"""
import math
import os
import struct
import time
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn
from tqdm import tqdm

from tabdiff import numerics as nx
from tabdiff.annotations import StructureMask
from tabdiff.errors import CacheFormatError, ShapeError

LATENT_CHANNELS = 4
DOWNSAMPLE = 8
LOGVAR_RANGE = (-30.0, 20.0)

# -----------------------------------------------------------------------------
# Layers

def _he_normal(shape: Sequence[int], fan_in: int, seed: int) -> nn.Parameter:
    w = nx.random_normal(shape, seed) * math.sqrt(2.0 / fan_in)
    return nn.Parameter(w.to(nx.default_dtype()))

class Conv(nn.Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0, seed: int = 0):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = _he_normal((cout, cin, k, k), cin * k * k, seed)
        self.bias = nn.Parameter(torch.zeros(cout, dtype=nx.default_dtype()))

    def forward(self, x: Tensor):
        return nx.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

class ConvTranspose(nn.Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 2, padding: int = 1, seed: int = 0):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = _he_normal((cin, cout, k, k), cin * k * k // (stride * stride), seed)
        self.bias = nn.Parameter(torch.zeros(cout, dtype=nx.default_dtype()))

    def forward(self, x: Tensor):
        return nx.transposed_conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

# -----------------------------------------------------------------------------
# Model

class Autoencoder(nn.Module):
    """
    Encoder: three stride-2 stages (k4 s2 conv + k3 conv, SiLU) at the given
    widths, then a k3 head emitting mean and log-variance per latent channel.
    Decoder mirrors it with transposed convs and a tanh output in [-1, 1].
    """
    def __init__(self, widths: Sequence[int] = (32, 64, 128), seed: int = 0):
        super().__init__()
        self.widths = tuple(widths)
        assert len(self.widths) == 3  # 2**3 == DOWNSAMPLE
        s = lambda name: nx.derive_seed(seed, name)
        enc, cin = [], 3
        for i, w in enumerate(self.widths):
            enc += [Conv(cin, w, 4, 2, 1, seed=s(f"enc{i}.down")), Conv(w, w, 3, 1, 1, seed=s(f"enc{i}.conv"))]
            cin = w
        self.encoder = nn.ModuleList(enc)
        self.enc_head = Conv(cin, 2 * LATENT_CHANNELS, 3, 1, 1, seed=s("enc.head"))
        self.dec_in = Conv(LATENT_CHANNELS, cin, 3, 1, 1, seed=s("dec.in"))
        dec = []
        outs = list(reversed(self.widths[:-1])) + [self.widths[0]]
        for i, w in enumerate(outs):
            dec += [ConvTranspose(cin, w, 4, 2, 1, seed=s(f"dec{i}.up")), Conv(w, w, 3, 1, 1, seed=s(f"dec{i}.conv"))]
            cin = w
        self.decoder = nn.ModuleList(dec)
        self.dec_out = Conv(cin, 3, 3, 1, 1, seed=s("dec.out"))
        self.register_buffer("scale_factor", torch.tensor(1.0, dtype=torch.float64))

    def moments(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] % DOWNSAMPLE or x.shape[3] % DOWNSAMPLE:
            raise ShapeError("encode", x.shape, (None, 3, f"H%{DOWNSAMPLE}==0", f"W%{DOWNSAMPLE}==0"))
        h = x
        for layer in self.encoder:
            h = nx.silu(layer(h))
        h = self.enc_head(h)
        mean = nx.narrow(h, 1, 0, LATENT_CHANNELS)
        logvar = nx.clamp(nx.narrow(h, 1, LATENT_CHANNELS, 2 * LATENT_CHANNELS), *LOGVAR_RANGE)
        return mean, logvar

    def decode(self, z: Tensor) -> Tensor:
        if z.dim() != 4 or z.shape[1] != LATENT_CHANNELS:
            raise ShapeError("decode", z.shape, (None, LATENT_CHANNELS, "h", "w"))
        h = nx.silu(self.dec_in(z))
        for layer in self.decoder:
            h = nx.silu(layer(h))
        return nx.tanh(self.dec_out(h))

def to_model_range(images) -> Tensor:
    """[0, 1] pixels -> [-1, 1] float tensor."""
    t = torch.as_tensor(np.asarray(images, dtype=np.float32))
    return (t * 2 - 1).to(nx.default_dtype())

def to_pixel_range(x: Tensor) -> np.ndarray:
    return ((x.detach().cpu().numpy() + 1.0) / 2.0).clip(0.0, 1.0).astype(np.float32)

def mask_to_model_input(mask: StructureMask) -> Tensor:
    """RGB conversion of a binary mask, normalized like any image."""
    return to_model_range(mask.to_rgb())

# -----------------------------------------------------------------------------
# encode / decode

def _batched(x: Tensor) -> tuple[Tensor, bool]:
    return (x[None], True) if x.dim() == 3 else (x, False)

def encode(x: Tensor, vae: Autoencoder, mode: str = "mean", seed: int | None = None) -> Tensor:
    """x in [-1, 1], (3, H, W) or (N, 3, H, W) -> latent (4, H/8, W/8) or batched."""
    x, single = _batched(x)
    mean, logvar = vae.moments(x)
    if mode == "mean":
        z = mean
    elif mode == "sample":
        if seed is None:
            raise ValueError("encode(mode='sample') needs a seed")
        eps = nx.random_normal(mean.shape, seed).to(mean.dtype)
        z = nx.add(mean, nx.mul(nx.exp(nx.scalar_scale(logvar, 0.5)), eps))
    else:
        raise ValueError(f"unknown encode mode {mode!r}")
    return z[0] if single else z

def decode(z: Tensor, vae: Autoencoder) -> Tensor:
    z, single = _batched(z)
    x = vae.decode(z)
    return x[0] if single else x

# -----------------------------------------------------------------------------
# Training

@dataclass
class VaeTrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    kl_weight: float = 1e-6
    steps: int = 0  # overrides epochs when > 0
    widths: tuple[int, int, int] = (32, 64, 128)

def kl_divergence(mean: Tensor, logvar: Tensor) -> Tensor:
    """Per-element mean of KL(N(mean, exp(logvar)) || N(0, 1))."""
    terms = nx.sub(nx.add(nx.exp(logvar), nx.mul(mean, mean)), nx.add(logvar, torch.ones_like(logvar)))
    return nx.scalar_scale(nx.reduce_mean(terms), 0.5)

def _order(n: int, seed: int, epoch: int) -> np.ndarray:
    return nx.generator(nx.derive_seed(seed, "order", epoch)).permutation(n)

def train_vae(images: np.ndarray, config: VaeTrainConfig, seed: int, log=None,
              metrics=None) -> tuple[Autoencoder, list[float]]:
    """
    Fit the autoencoder on (N, 3, H, W) images in [0, 1] minimizing
    reconstruction MSE + kl_weight * KL, then set its latent scale factor.
    """
    n = len(images)
    if n == 0:
        raise ValueError("train_vae: empty dataset")
    vae = Autoencoder(config.widths, seed=nx.derive_seed(seed, "init"))
    params = list(vae.parameters())
    state = nx.AdamState.for_params(params, lr=config.lr)
    x_all = to_model_range(images)
    bs = min(config.batch_size, n)
    per_epoch = math.ceil(n / bs)
    steps = config.steps if config.steps > 0 else config.epochs * per_epoch
    losses = []
    t0 = time.perf_counter()
    for step in tqdm(range(steps), desc="train-vae", disable=log is None):
        epoch, k = divmod(step, per_epoch)
        idx = _order(n, seed, epoch)[k * bs:(k + 1) * bs]
        batch = x_all[torch.from_numpy(idx)]
        with nx.Tape():
            mean, logvar = vae.moments(batch)
            eps = nx.random_normal(mean.shape, nx.derive_seed(seed, "eps", step)).to(mean.dtype)
            z = nx.add(mean, nx.mul(nx.exp(nx.scalar_scale(logvar, 0.5)), eps))
            loss = nx.mse_loss(vae.decode(z), batch)
            if config.kl_weight:
                loss = nx.add(loss, nx.scalar_scale(kl_divergence(mean, logvar), config.kl_weight))
            nx.backward(loss, params)
        nx.adam_step(params, [p.grad for p in params], state)
        nx.zero_grad(params)
        losses.append(loss.item())
        elapsed_ms = 1000 * (time.perf_counter() - t0)
        if metrics is not None:
            metrics.write(step + 1, losses[-1], elapsed_ms)
        if log is not None:
            log.log(f"vae step:{step+1}/{steps} train_loss:{losses[-1]:.5f} train_time:{elapsed_ms:.0f}ms "
                    f"step_avg:{elapsed_ms/(step+1):.2f}ms")
    vae.scale_factor.fill_(compute_scale_factor(encode_all(x_all, vae)))
    return vae, losses

@torch.no_grad()
def encode_all(x: Tensor, vae: Autoencoder, batch_size: int = 64) -> Tensor:
    return torch.cat([encode(x[i:i + batch_size], vae) for i in range(0, len(x), batch_size)])

def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    return math.inf if mse == 0 else 10 * math.log10(1.0 / mse)

@torch.no_grad()
def reconstruction_psnr(images: np.ndarray, vae: Autoencoder, batch_size: int = 64) -> np.ndarray:
    """Per-image PSNR of decode(encode(x)) against x."""
    out = []
    for i in range(0, len(images), batch_size):
        batch = images[i:i + batch_size]
        recon = to_pixel_range(decode(encode(to_model_range(batch), vae), vae))
        out += [psnr(a, b) for a, b in zip(batch, recon)]
    return np.asarray(out)

# -----------------------------------------------------------------------------
# Latent scaling

def compute_scale_factor(latents: Tensor, min_count: int = 100) -> float:
    """s = 1 / pooled std of every latent element."""
    if len(latents) < min_count:
        warnings.warn(f"scale factor estimated from {len(latents)} latents (< {min_count})")
    std = float(latents.detach().double().std(unbiased=False))
    if std == 0.0:
        raise ValueError("compute_scale_factor: latents have zero variance")
    return 1.0 / std

def scale_latent(z: Tensor, s: float) -> Tensor:
    return z * s

def unscale_latent(z: Tensor, s: float) -> Tensor:
    return z / s

# -----------------------------------------------------------------------------
# Latent cache: "TDLC", version, flags (bit 0: mask latents present), count,
# then per sample (image latent[, mask latent]) as (ndim, dims, f32 payload),
# then a table of u64 record offsets at the end of the file.

CACHE_MAGIC = b"TDLC"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sBBQ")

def _write_latent(f, z: Tensor):
    z = z.detach().cpu().contiguous()
    f.write(struct.pack("<B", z.dim()) + struct.pack(f"<{z.dim()}I", *z.shape))
    f.write(z.numpy().astype("<f4", copy=False).tobytes())

@torch.no_grad()
def cache_latents(images: np.ndarray, masks: Sequence[StructureMask] | None, vae: Autoencoder,
                  path: str | Path, batch_size: int = 64, progress: bool = False) -> Path:
    """
    Encode every image (and the RGB-converted mask, when given) once in mean
    mode, scale by the VAE's factor, and write the cache atomically.
    """
    path = Path(path)
    n = len(images)
    if masks is not None and len(masks) != n:
        raise ShapeError("cache_latents", (n,), (len(masks),), detail="images vs masks")
    s = float(vae.scale_factor)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    offsets = []
    try:
        with open(tmp, "wb") as f:
            f.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, int(masks is not None), n))
            for i in tqdm(range(0, n, batch_size), desc="cache-latents", disable=not progress):
                zi = scale_latent(encode(to_model_range(images[i:i + batch_size]), vae), s)
                zm = None
                if masks is not None:
                    m = torch.stack([mask_to_model_input(mk) for mk in masks[i:i + batch_size]])
                    zm = scale_latent(encode(m, vae), s)
                for j in range(len(zi)):
                    offsets.append(f.tell())
                    _write_latent(f, zi[j])
                    if zm is not None:
                        _write_latent(f, zm[j])
            f.write(struct.pack(f"<{n}Q", *offsets))
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    os.replace(tmp, path)
    return path

class LatentCache:
    """Random-access reader; one open handle per instance."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._f = open(self.path, "rb")
        try:
            size = os.fstat(self._f.fileno()).st_size
            head = self._f.read(_HEADER.size)
            if len(head) != _HEADER.size:
                raise CacheFormatError(f"{self.path}: truncated header")
            magic, version, flags, count = _HEADER.unpack(head)
            if magic != CACHE_MAGIC:
                raise CacheFormatError(f"{self.path}: bad magic {magic!r}")
            if version != CACHE_VERSION:
                raise CacheFormatError(f"{self.path}: unsupported version {version}")
            self.has_mask = bool(flags & 1)
            self.count = count
            table = size - 8 * count
            if table < _HEADER.size:
                raise CacheFormatError(f"{self.path}: file too short for {count} records")
            self._f.seek(table)
            self._offsets = struct.unpack(f"<{count}Q", self._f.read(8 * count))
            self._end = table
            if any(not _HEADER.size <= o < table for o in self._offsets) or list(self._offsets) != sorted(self._offsets):
                raise CacheFormatError(f"{self.path}: corrupt offset table")
        except BaseException:
            self._f.close()
            raise

    def __len__(self):
        return self.count

    def _read_latent(self) -> Tensor:
        (ndim,) = struct.unpack("<B", self._f.read(1))
        shape = struct.unpack(f"<{ndim}I", self._f.read(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        buf = self._f.read(4 * n)
        if len(buf) != 4 * n or self._f.tell() > self._end:
            raise CacheFormatError(f"{self.path}: record overruns the offset table")
        return torch.from_numpy(np.frombuffer(buf, dtype="<f4").astype(np.float32).reshape(shape))

    def __getitem__(self, index: int) -> tuple[Tensor, Tensor | None]:
        if not 0 <= index < self.count:
            raise IndexError(f"latent index {index} out of range 0..{self.count - 1}")
        self._f.seek(self._offsets[index])
        try:
            zi = self._read_latent()
            zm = self._read_latent() if self.has_mask else None
        except struct.error:
            raise CacheFormatError(f"{self.path}: truncated record {index}") from None
        return zi, zm

    def batch(self, indices: Sequence[int]) -> tuple[Tensor, Tensor | None]:
        items = [self[int(i)] for i in indices]
        zi = torch.stack([a for a, _ in items])
        zm = torch.stack([b for _, b in items]) if self.has_mask else None
        return zi, zm

    @property
    def latent_shape(self) -> tuple[int, ...]:
        return tuple(self[0][0].shape) if self.count else ()

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

def load_latent(path: str | Path, index: int) -> tuple[Tensor, Tensor | None]:
    with LatentCache(path) as cache:
        return cache[index]

# -----------------------------------------------------------------------------
# Persistence

def vae_tensors(vae: Autoencoder, prefix: str = "") -> dict[str, Tensor]:
    out = {f"{prefix}{k}": v.detach() for k, v in vae.state_dict().items()}
    out[f"{prefix}widths"] = torch.tensor(vae.widths, dtype=torch.int64)
    return out

def vae_from_tensors(tensors: dict[str, Tensor], prefix: str = "") -> Autoencoder:
    own = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    vae = Autoencoder(tuple(int(w) for w in own.pop("widths")))
    vae.load_state_dict(own)
    vae.eval()
    return vae

def save_vae(vae: Autoencoder, path: str | Path):
    nx.save_tensors(path, vae_tensors(vae))

def load_vae(path: str | Path) -> Autoencoder:
    return vae_from_tensors(nx.load_tensors(path))
