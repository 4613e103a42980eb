"""Latent diffusion world model for the continuous front end.

A small MLP denoiser predicts the noise added to the next frame's 48-d
latent, conditioned on mean-pooled visual and action features from the
backbone. Gradients flow through the conditioning back into the backbone;
that path is the dense supervision signal.

Sampled frames are dumped as raw bytes with a 16-byte header:
magic b"DW0I", width u32, height u32, channels u32 (little-endian).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import DiffTensor, add, concat, constant, gelu, matmul, mse
from .params import ParamStore

LATENT_DIM = 48
TIME_EMB_DIM = 32
DENOISER_WIDTH = 256
IMAGE_MAGIC = b"DW0I"


@dataclass
class NoiseSchedule:
    """Linear beta schedule; defaults chosen so alpha-bar spans ~1 to <0.05."""

    steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.07
    betas: np.ndarray = field(init=False)
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        if self.steps < 2 or not 0 < self.beta_start < self.beta_end < 1:
            raise ValueError(f"bad schedule: T={self.steps}, "
                             f"beta {self.beta_start}..{self.beta_end}")
        self.betas = np.linspace(self.beta_start, self.beta_end, self.steps)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def check_invariants(self) -> None:
        if not np.all(np.diff(self.alpha_bars) < 0):
            raise ValueError("alpha-bar must be strictly decreasing")
        if self.alpha_bars[0] <= 0.99 or self.alpha_bars[-1] >= 0.05:
            raise ValueError(
                f"alpha-bar endpoints out of bounds: {self.alpha_bars[0]:.4f}, "
                f"{self.alpha_bars[-1]:.4f}")


def encode_latent(image: np.ndarray) -> np.ndarray:
    """8x8-block average pooling, then affine map of bytes to [-1, 1]."""
    img = np.asarray(image, dtype=np.float64)
    pooled = img.reshape(4, 8, 4, 8, 3).mean(axis=(1, 3))
    return (pooled / 127.5 - 1.0).reshape(LATENT_DIM)


def decode_latent(z: np.ndarray) -> np.ndarray:
    """Invert the affine map and upsample 8x by nearest neighbor."""
    pooled = (np.asarray(z, dtype=np.float64).reshape(4, 4, 3) + 1.0) * 127.5
    img = np.repeat(np.repeat(pooled, 8, axis=0), 8, axis=1)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def noising(z: np.ndarray, k: int, eps: np.ndarray,
            schedule: NoiseSchedule) -> np.ndarray:
    """Forward process z_k = sqrt(abar_k) z + sqrt(1 - abar_k) eps; k is 1-based."""
    if not 1 <= k <= schedule.steps:
        raise ValueError(f"diffusion step {k} outside [1, {schedule.steps}]")
    ab = schedule.alpha_bars[k - 1]
    return np.sqrt(ab) * z + np.sqrt(1.0 - ab) * eps


def sinusoidal_embedding(value: float, dim: int) -> np.ndarray:
    """Standard sin/cos embedding of a scalar timestep."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = value * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def init_denoiser_params(store: ParamStore, rng: np.random.Generator,
                         cond_dim: int, prefix: str = "denoiser.") -> ParamStore:
    in_dim = LATENT_DIM + TIME_EMB_DIM + 2 * cond_dim
    store.normal(prefix + "w1", (in_dim, DENOISER_WIDTH), rng)
    store.zeros(prefix + "b1", (1, DENOISER_WIDTH))
    store.normal(prefix + "w2", (DENOISER_WIDTH, DENOISER_WIDTH), rng)
    store.zeros(prefix + "b2", (1, DENOISER_WIDTH))
    store.normal(prefix + "w3", (DENOISER_WIDTH, LATENT_DIM), rng)
    store.zeros(prefix + "b3", (1, LATENT_DIM))
    return store


def denoise(z_k: DiffTensor, k: int, cond_v: DiffTensor, cond_a: DiffTensor,
            store: ParamStore, schedule: NoiseSchedule,
            prefix: str = "denoiser.") -> DiffTensor:
    """Predicted noise for one noised latent; conditions stay differentiable."""
    dtype = cond_v.dtype
    t_emb = constant(sinusoidal_embedding(float(k), TIME_EMB_DIM).reshape(1, -1),
                     dtype=dtype)
    x = concat([z_k, t_emb, cond_v, cond_a], axis=1)
    h = gelu(add(matmul(x, store[prefix + "w1"]), store[prefix + "b1"]))
    h = gelu(add(matmul(h, store[prefix + "w2"]), store[prefix + "b2"]))
    return add(matmul(h, store[prefix + "w3"]), store[prefix + "b3"])


def loss_wm_diff(cond_v: DiffTensor, cond_a: DiffTensor, image_next: np.ndarray,
                 store: ParamStore, schedule: NoiseSchedule,
                 rng: np.random.Generator, prefix: str = "denoiser.") -> DiffTensor:
    """MSE between sampled and predicted noise on the future frame's latent."""
    z = encode_latent(image_next)
    k = int(rng.integers(1, schedule.steps + 1))
    eps = rng.standard_normal(LATENT_DIM)
    dtype = cond_v.dtype
    z_k = constant(noising(z, k, eps, schedule).reshape(1, -1), dtype=dtype)
    eps_hat = denoise(z_k, k, cond_v, cond_a, store, schedule, prefix)
    return mse(eps_hat, constant(eps.reshape(1, -1), dtype=dtype))


def sample_latent(cond_v: DiffTensor | None, cond_a: DiffTensor | None,
                  store: ParamStore | None, schedule: NoiseSchedule, seed: int,
                  prefix: str = "denoiser.", denoiser=None) -> np.ndarray:
    """Ancestral sampling from z_T down to z_0 using the posterior mean.

    `denoiser` overrides the learned network (used by planted-solution
    tests); it receives (z_k values [1,48], k) and returns predicted noise.
    """
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(LATENT_DIM)
    for k in range(schedule.steps, 0, -1):
        if denoiser is not None:
            eps_hat = np.asarray(denoiser(z.reshape(1, -1), k)).reshape(LATENT_DIM)
        else:
            z_k = constant(z.reshape(1, -1), dtype=cond_v.dtype)
            eps_hat = denoise(z_k, k, cond_v, cond_a, store, schedule,
                              prefix).values.reshape(LATENT_DIM).astype(np.float64)
        a = schedule.alphas[k - 1]
        ab = schedule.alpha_bars[k - 1]
        mean = (z - schedule.betas[k - 1] / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
        if k > 1:
            mean = mean + np.sqrt(schedule.betas[k - 1]) * rng.standard_normal(LATENT_DIM)
        z = mean
    return z


def sample_future(cond_v: DiffTensor, cond_a: DiffTensor, store: ParamStore,
                  schedule: NoiseSchedule, seed: int,
                  prefix: str = "denoiser.", denoiser=None) -> np.ndarray:
    """Sample a latent, clip to [-1, 1], and decode to a 32x32x3 image."""
    z = sample_latent(cond_v, cond_a, store, schedule, seed, prefix, denoiser)
    return decode_latent(np.clip(z, -1.0, 1.0))


def write_image_dump(path: str | Path, image: np.ndarray) -> None:
    img = np.ascontiguousarray(image, dtype=np.uint8)
    h, w, c = img.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", IMAGE_MAGIC, w, h, c))
        fh.write(img.tobytes())


def read_image_dump(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    magic, w, h, c = struct.unpack_from("<4sIII", blob, 0)
    if magic != IMAGE_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    return np.frombuffer(blob, np.uint8, h * w * c, 16).reshape(h, w, c).copy()
