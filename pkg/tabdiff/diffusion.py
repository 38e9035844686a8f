"""
Training objective, the ẑ0 estimator, the DDIM sampler and the training loop.

Randomness is counter-style: every draw is keyed by (run seed, purpose,
iteration or sample id) through numerics.derive_seed, so a run resumed at
iteration k draws exactly what an uninterrupted run would have drawn.
"""
import json
import math
import os
import shutil
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor
from tqdm import tqdm

from tabdiff import numerics as nx
from tabdiff.annotations import StructureMask
from tabdiff.autoencoder import (DOWNSAMPLE, LATENT_CHANNELS, Autoencoder, LatentCache, decode, encode,
                                 mask_to_model_input, scale_latent, to_pixel_range, unscale_latent,
                                 vae_from_tensors, vae_tensors)
from tabdiff.dit import PRESETS, DiT, DiTConfig, dit_from_tensors, dit_tensors, predict_noise, preset
from tabdiff.errors import CacheFormatError, ConfigError, MissingArtifactError, ScheduleError, ShapeError
from tabdiff.runlog import MetricsWriter
from tabdiff.schedule import NoiseSchedule, build_schedule, per_sample_coeff, q_sample

# -----------------------------------------------------------------------------
# Config

@dataclass
class TrainConfig:
    preset: str = "desk-64"       # DiT preset name
    conditional: bool = True      # mask-conditioned (8 input channels) or unconditional (4)
    samples: int = 2000           # leading latent-cache entries used for training
    iterations: int = 2000
    batch_size: int = 32
    lr: float = 1e-4
    T: int = 1000
    seed: int = 0
    checkpoint_every: int = 500   # 0: only the final checkpoint

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"train.preset: unknown preset {self.preset!r}")
        if self.iterations <= 0:
            raise ConfigError(f"train.iterations must be > 0, got {self.iterations}")
        if self.lr <= 0:
            raise ConfigError(f"train.lr must be > 0, got {self.lr}")
        if self.batch_size <= 0 or self.samples <= 0 or self.T <= 0 or self.checkpoint_every < 0:
            raise ConfigError("train: batch_size, samples and T must be positive, checkpoint_every >= 0")

    def dit_config(self) -> DiTConfig:
        return preset(self.preset, conditional=self.conditional, max_T=self.T)

# -----------------------------------------------------------------------------
# Objective

NoisePredictor = Callable[[Tensor, Tensor | None, np.ndarray, DiT], Tensor]

def noise_draws(shape: Sequence[int], seed: int, ids: Sequence[int], T: int) -> tuple[np.ndarray, Tensor]:
    """Per-sample t ~ U{1..T} and ε ~ N(0, I), keyed by (seed, sample id) so batch order does not matter."""
    ts, eps = [], []
    for i in ids:
        s = nx.derive_seed(seed, int(i))
        ts.append(int(nx.random_integers(1, T, 1, nx.derive_seed(s, "t"))[0]))
        eps.append(nx.random_normal(shape, nx.derive_seed(s, "eps")))
    return np.asarray(ts, dtype=np.int64), torch.stack(eps).to(nx.default_dtype())

def training_loss(z0: Tensor, m_latent: Tensor | None, seed: int, model: DiT, schedule: NoiseSchedule,
                  ids: Sequence[int] | None = None, predictor: NoisePredictor = predict_noise) -> Tensor:
    """Per-element mean of ‖ε − f_θ(z_t, m, t)‖² with z_t = q_sample(z0, t, ε)."""
    if z0.dim() != 4 or (m_latent is not None and m_latent.shape != z0.shape):
        raise ShapeError("training_loss", z0.shape, None if m_latent is None else m_latent.shape)
    ids = range(len(z0)) if ids is None else ids
    if len(ids) != len(z0):
        raise ShapeError("training_loss", z0.shape, (len(ids),), detail="one id per sample")
    ts, eps = noise_draws(z0.shape[1:], seed, ids, schedule.T)
    z_t = q_sample(z0.to(eps.dtype), ts, eps, schedule)
    return nx.mse_loss(predictor(z_t, m_latent, ts, model), eps)

# -----------------------------------------------------------------------------
# Reverse process

def estimate_z0(z_t: Tensor, eps_hat: Tensor, t, schedule: NoiseSchedule) -> Tensor:
    """ẑ0 = (z_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t. Near t = T this amplifies errors in ε̂ by ~1/√ᾱ_T."""
    if z_t.shape != eps_hat.shape:
        raise ShapeError("estimate_z0", z_t.shape, eps_hat.shape)
    a = per_sample_coeff(t, schedule, z_t, np.sqrt)
    b = per_sample_coeff(t, schedule, z_t, lambda ab: np.sqrt(1.0 - ab))
    return (z_t - b * eps_hat) / a

def ddim_step(z_t: Tensor, eps_hat: Tensor, t: int, t_prev: int, schedule: NoiseSchedule,
              eta: float = 0.0, noise: Tensor | None = None) -> Tensor:
    """
    z_{t_prev} = √ᾱ_prev·ẑ0 + √(1−ᾱ_prev−σ²)·ε̂ + σ·noise, with
    σ = η·√((1−ᾱ_prev)/(1−ᾱ_t))·√(1−ᾱ_t/ᾱ_prev) and ᾱ_0 = 1.
    """
    t, t_prev = int(t), int(t_prev)
    if not 0 <= t_prev < t:
        raise ScheduleError(f"ddim_step: need 0 <= t_prev < t, got t={t} t_prev={t_prev}")
    z0_hat = estimate_z0(z_t, eps_hat, t, schedule)
    if t_prev == 0:
        return z0_hat
    ab_t, ab_prev = schedule.alpha_bar(t), schedule.alpha_bar(t_prev)
    sigma = eta * math.sqrt((1 - ab_prev) / (1 - ab_t)) * math.sqrt(1 - ab_t / ab_prev)
    out = math.sqrt(ab_prev) * z0_hat + math.sqrt(max(1 - ab_prev - sigma ** 2, 0.0)) * eps_hat
    if sigma > 0:
        if noise is None or noise.shape != z_t.shape:
            raise ShapeError("ddim_step", z_t.shape, None if noise is None else noise.shape, detail="eta > 0 needs noise")
        out = out + sigma * noise
    return out

def timestep_subsequence(T: int, steps: int) -> list[int]:
    """`steps` evenly spaced integers from T down to 1 (both included), rounded half up, duplicates dropped."""
    if not 1 <= steps <= T:
        raise ScheduleError(f"need 1 <= steps <= T, got steps={steps} T={T}")
    if steps == 1:
        return [T]
    raw = np.floor(np.linspace(T, 1, steps, dtype=np.float64) + 0.5).astype(np.int64)
    out = []
    for t in raw.tolist():
        if not out or out[-1] != t:
            out.append(t)
    return out

# -----------------------------------------------------------------------------
# Checkpoints

@dataclass
class Checkpoint:
    dit: DiT
    vae: Autoencoder
    schedule: NoiseSchedule
    adam: nx.AdamState | None
    iteration: int
    seed: int
    train: TrainConfig | None = None

    @property
    def scale_factor(self) -> float:
        return float(self.vae.scale_factor)

    @property
    def conditional(self) -> bool:
        return self.dit.config.conditional

    @property
    def image_size(self) -> int:
        return self.dit.config.latent_size * DOWNSAMPLE

CHECKPOINT_FORMAT = "tabdiff-checkpoint"
WEIGHTS_FILE = "weights.tdw"
MANIFEST_FILE = "manifest.json"

def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """TDW1 weights (dit.*, vae.*, adam.*) plus a JSON manifest in one directory, swapped in atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    shutil.rmtree(tmp, ignore_errors=True)
    tmp.mkdir(parents=True)
    try:
        tensors = dit_tensors(ckpt.dit, "dit.")
        tensors.update(vae_tensors(ckpt.vae, "vae."))
        if ckpt.adam is not None:
            tensors.update(ckpt.adam.tensors())
        nx.save_tensors(tmp / WEIGHTS_FILE, tensors)
        manifest = dict(
            format=CHECKPOINT_FORMAT,
            version=1,
            dit=ckpt.dit.config.to_dict(),
            schedule=ckpt.schedule.params(),
            adam=ckpt.adam.hyper() if ckpt.adam is not None else None,
            iteration=ckpt.iteration,
            scale_factor=ckpt.scale_factor,
            rng=dict(seed=ckpt.seed, next_iteration=ckpt.iteration),
            train=asdict(ckpt.train) if ckpt.train is not None else None,
        )
        (tmp / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    old = path.with_name(path.name + ".old")
    if path.exists():
        os.replace(path, old)
    os.replace(tmp, path)
    shutil.rmtree(old, ignore_errors=True)
    return path

def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not (path / MANIFEST_FILE).exists() or not (path / WEIGHTS_FILE).exists():
        raise MissingArtifactError(path, "train-dit")
    try:
        manifest = json.loads((path / MANIFEST_FILE).read_text())
    except json.JSONDecodeError as e:
        raise CacheFormatError(f"{path / MANIFEST_FILE}: {e}") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CacheFormatError(f"{path}: not a tabdiff checkpoint")
    tensors = nx.load_tensors(path / WEIGHTS_FILE)
    dit = dit_from_tensors(DiTConfig.from_dict(manifest["dit"]), tensors, "dit.")
    vae = vae_from_tensors(tensors, "vae.")
    adam = nx.AdamState.from_tensors(tensors, manifest["adam"]) if manifest["adam"] is not None else None
    train = TrainConfig(**manifest["train"]) if manifest["train"] is not None else None
    return Checkpoint(dit, vae, build_schedule(**manifest["schedule"]), adam,
                      manifest["iteration"], manifest["rng"]["seed"], train)

# -----------------------------------------------------------------------------
# Sampling

def encode_mask(mask: StructureMask, vae: Autoencoder, image_size: int) -> Tensor:
    """RGB-convert, VAE-encode (mean) and scale a mask into the diffusion latent space."""
    if (mask.height, mask.width) != (image_size, image_size):
        raise ShapeError("sample", (mask.height, mask.width), (image_size, image_size), detail="mask size")
    with torch.no_grad():
        return scale_latent(encode(mask_to_model_input(mask), vae), float(vae.scale_factor))

@torch.no_grad()
def sample_batch(masks: Sequence[StructureMask] | None, ckpt: Checkpoint, seeds: Sequence[int], steps: int = 750,
                 eta: float = 0.0, keep_trajectory: bool = True, progress: bool = False
                 ) -> tuple[np.ndarray, list[Tensor]]:
    """
    DDIM from z_T ~ N(0, I) (drawn per seed) down to t = 0, one sample per seed.
    masks is either None (unconditional checkpoint) or one mask per seed.
    Returns images (B, 3, H, W) in [0, 1] and the per-step latent trajectory
    (len == number of steps, each entry (B, 4, h, w) in the scaled space).
    """
    if ckpt.conditional and masks is None:
        raise ConfigError("conditional checkpoint needs a mask")
    if not ckpt.conditional and masks is not None:
        raise ConfigError("unconditional checkpoint takes no mask")
    if masks is not None and len(masks) != len(seeds):
        raise ShapeError("sample", (len(masks),), (len(seeds),), detail="one mask per seed")
    ts = timestep_subsequence(ckpt.schedule.T, steps)
    model, schedule = ckpt.dit.eval(), ckpt.schedule
    L = model.config.latent_size
    shape = (LATENT_CHANNELS, L, L)
    m = torch.stack([encode_mask(mk, ckpt.vae, ckpt.image_size) for mk in masks]) if masks is not None else None
    z = torch.stack([nx.random_normal(shape, nx.derive_seed(s, "z_T")) for s in seeds]).to(nx.default_dtype())
    trajectory = []
    for k, t in enumerate(tqdm(ts, desc="ddim", disable=not progress)):
        t_prev = ts[k + 1] if k + 1 < len(ts) else 0
        eps_hat = predict_noise(z, m, np.full(len(seeds), t), model)
        noise = None
        if eta > 0 and t_prev > 0:
            noise = torch.stack([nx.random_normal(shape, nx.derive_seed(s, "ddim", t)) for s in seeds]).to(z.dtype)
        z = ddim_step(z, eps_hat, t, t_prev, schedule, eta, noise)
        if keep_trajectory:
            trajectory.append(z.clone())
    images = to_pixel_range(decode(unscale_latent(z, ckpt.scale_factor), ckpt.vae))
    return images, trajectory

def sample(mask: StructureMask | None, ckpt: Checkpoint, steps: int = 750, seed: int = 0,
           eta: float = 0.0) -> tuple[np.ndarray, list[Tensor]]:
    images, trajectory = sample_batch(None if mask is None else [mask], ckpt, [seed], steps, eta)
    return images[0], [z[0] for z in trajectory]

# -----------------------------------------------------------------------------
# Training loop

def check_cache(cache: LatentCache, config: DiTConfig):
    """Resolution and conditioning agreement between a latent cache and the model it will train."""
    if len(cache) == 0:
        raise ConfigError(f"{cache.path}: latent cache is empty")
    if config.conditional and not cache.has_mask:
        raise ConfigError(f"conditional config needs a cache with mask latents, {cache.path} has none")
    if not config.conditional and cache.has_mask:
        raise ConfigError(f"unconditional config rejects the conditional cache {cache.path}")
    want = (LATENT_CHANNELS, config.latent_size, config.latent_size)
    if cache.latent_shape != want:
        raise ConfigError(f"cache latents {cache.latent_shape} do not match model latents {want}")

def _order(n: int, seed: int, epoch: int) -> np.ndarray:
    return nx.generator(nx.derive_seed(seed, "order", epoch)).permutation(n)

def train_loop(config: TrainConfig, cache: LatentCache, vae: Autoencoder, out_dir: str | Path,
               schedule: NoiseSchedule | None = None, dit_config: DiTConfig | None = None,
               resume: Checkpoint | None = None, log=None, progress: bool = False) -> Checkpoint:
    """
    Adam on the ε-MSE over batches of the latent cache. Writes
    out_dir/metrics.csv and out_dir/ckpt-<iteration> every checkpoint_every
    iterations and at the end; returns the final checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    schedule = schedule or build_schedule(config.T)
    dit_config = dit_config or config.dit_config()
    if dit_config.conditional != config.conditional:
        raise ConfigError(f"train.conditional={config.conditional} but the DiT takes {dit_config.in_channels} channels")
    if schedule.T != config.T or dit_config.max_T != config.T:
        raise ConfigError(f"T disagrees: train {config.T}, schedule {schedule.T}, dit {dit_config.max_T}")
    check_cache(cache, dit_config)

    if resume is not None:
        model, state, start = resume.dit, resume.adam, resume.iteration
        if state is None or model.config != dit_config:
            raise ConfigError("resume checkpoint does not match the training config")
    else:
        model = DiT(dit_config, seed=nx.derive_seed(config.seed, "dit-init"))
        state, start = None, 0
    model.train()
    params = list(model.parameters())
    state = state or nx.AdamState.for_params(params, lr=config.lr)
    metrics = MetricsWriter(out_dir / "metrics.csv", truncate_after=start)

    n = min(len(cache), config.samples)
    bs = min(config.batch_size, n)
    per_epoch = math.ceil(n / bs)
    ckpt = Checkpoint(model, vae, schedule, state, start, config.seed, config)
    t0 = time.perf_counter()
    for it in tqdm(range(start, config.iterations), desc="train-dit", disable=not progress):
        epoch, k = divmod(it, per_epoch)
        idx = _order(n, config.seed, epoch)[k * bs:(k + 1) * bs]
        z0, zm = cache.batch(idx)
        with nx.Tape():
            loss = training_loss(z0, zm, nx.derive_seed(config.seed, "step", it), model, schedule, ids=idx)
            nx.backward(loss, params)
        nx.adam_step(params, [p.grad for p in params], state)
        nx.zero_grad(params)
        elapsed_ms = 1000 * (time.perf_counter() - t0)
        metrics.write(it + 1, loss.item(), elapsed_ms)
        if log is not None:
            log.log(f"step:{it+1}/{config.iterations} train_loss:{loss.item():.4f} train_time:{elapsed_ms:.0f}ms "
                    f"step_avg:{elapsed_ms/(it+1-start):.2f}ms")
        ckpt.iteration = it + 1
        if (config.checkpoint_every and ckpt.iteration % config.checkpoint_every == 0) \
                or ckpt.iteration == config.iterations:
            save_checkpoint(ckpt, out_dir / f"ckpt-{ckpt.iteration:07d}")
    return ckpt

def latest_checkpoint(out_dir: str | Path) -> Path | None:
    found = sorted(p for p in Path(out_dir).glob("ckpt-*") if p.is_dir() and not p.name.endswith((".old",))
                   and ".tmp" not in p.name)
    return found[-1] if found else None
