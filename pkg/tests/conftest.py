import numpy as np
import pytest
import torch

from tabdiff import numerics as nx
from tabdiff.annotations import StructureConstraints, generate_toy_table, random_structure, render_mask
from tabdiff.autoencoder import Autoencoder
from tabdiff.diffusion import Checkpoint
from tabdiff.dit import DiT, DiTConfig
from tabdiff.schedule import build_schedule

TINY_T = 20


@pytest.fixture
def tiny_config():
    """16x16 images -> 4x2x2 latents, one block."""
    return DiTConfig(depth=1, dim=32, heads=4, patch=2, latent_size=2, max_T=TINY_T, freq_dim=16)


@pytest.fixture
def tiny_vae():
    return Autoencoder(widths=(8, 8, 8), seed=3).eval()


@pytest.fixture
def randomize():
    """Overwrite every parameter with small seeded noise (breaks the zero init)."""
    def apply(module: torch.nn.Module, seed: int = 0, scale: float = 0.2):
        with torch.no_grad():
            for i, p in enumerate(module.parameters()):
                p.copy_(nx.random_normal(p.shape, nx.derive_seed(seed, i)).to(p.dtype) * scale)
        return module
    return apply


@pytest.fixture
def tiny_checkpoint(tiny_config, tiny_vae):
    def make(conditional: bool = True, seed: int = 0) -> Checkpoint:
        cfg = DiTConfig(**{**tiny_config.to_dict(), "in_channels": 8 if conditional else 4})
        return Checkpoint(DiT(cfg, seed=seed), tiny_vae, build_schedule(TINY_T), None, 0, seed)
    return make


@pytest.fixture
def toy_tables():
    def make(n: int, seed: int = 0, constraints: StructureConstraints | None = None):
        c = constraints or StructureConstraints()
        ys = [random_structure(nx.derive_seed(seed, "y", i), c) for i in range(n)]
        images = np.stack([generate_toy_table(y, nx.derive_seed(seed, "style", i)) for i, y in enumerate(ys)])
        masks = [render_mask(y, c.height, c.width) for y in ys]
        return images, ys, masks
    return make
