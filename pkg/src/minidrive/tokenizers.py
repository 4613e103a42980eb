"""Visual and action tokenization.

Three pieces: a seeded k-means patch codebook (discrete visual tokens), a
learned affine patch embedding (continuous visual front end), and the
fixed-length trajectory tokenizer built from an orthonormal 6-point DCT-II
with uniform quantization. Trajectories always map to exactly 12 action
tokens (6 coefficients per axis, x coefficients first).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DiffTensor, add, constant, matmul

# vocabulary layout: contiguous id ranges, exhaustive below VOCAB_SIZE
N_COMMANDS = 4
CODEBOOK_K = 256
ACTION_SYMBOLS = 256

LANG_LO = 0
VISUAL_LO = LANG_LO + N_COMMANDS            # 4
ACTION_LO = VISUAL_LO + CODEBOOK_K          # 260
BOS = ACTION_LO + ACTION_SYMBOLS            # 516
BOV = BOS + 1                               # 517
BOA = BOS + 2                               # 518
EOS = BOS + 3                               # 519
VOCAB_SIZE = BOS + 4                        # 520

MODALITY_LANG, MODALITY_VISUAL, MODALITY_ACTION, MODALITY_SPECIAL = range(4)

PATCH = 4
GRID = 8                                    # 8x8 patches over a 32x32 image
PATCH_DIM = PATCH * PATCH * 3               # 48
N_VISUAL_TOKENS = GRID * GRID               # 64
N_ACTION_TOKENS = 12
N_WAYPOINTS = 6

# Quantization scale: symbols must cover the DC coefficient of the fastest
# expert trajectories (mean forward reach x sqrt(6), ~28 coefficient units),
# so gamma * 28 must stay below 128. gamma=4 covers it with margin at a
# ~0.18 m worst-case round-trip bound.
DEFAULT_GAMMA = 4.0
KMEANS_ITERS = 25


def modality_of(token_id: int) -> int:
    if LANG_LO <= token_id < VISUAL_LO:
        return MODALITY_LANG
    if VISUAL_LO <= token_id < ACTION_LO:
        return MODALITY_VISUAL
    if ACTION_LO <= token_id < BOS:
        return MODALITY_ACTION
    if BOS <= token_id < VOCAB_SIZE:
        return MODALITY_SPECIAL
    raise ValueError(f"token id {token_id} outside vocabulary [0, {VOCAB_SIZE})")


def image_to_patches(image: np.ndarray) -> np.ndarray:
    """(32,32,3) uint8 -> (64, 48) float rows in [0, 1], row-major patch grid."""
    img = np.asarray(image, dtype=np.float64) / 255.0
    patches = img.reshape(GRID, PATCH, GRID, PATCH, 3).transpose(0, 2, 1, 3, 4)
    return patches.reshape(N_VISUAL_TOKENS, PATCH_DIM)


def patches_to_image(patches: np.ndarray) -> np.ndarray:
    p = patches.reshape(GRID, GRID, PATCH, PATCH, 3).transpose(0, 2, 1, 3, 4)
    img = p.reshape(32, 32, 3)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


@dataclass
class VisualCodebook:
    centroids: np.ndarray       # (256, 48) float64 in [0, 1]
    seed: int
    inertia: float
    duplicate_fallback: bool = False

    def encode_patches(self, patches: np.ndarray) -> np.ndarray:
        d2 = ((patches**2).sum(axis=1, keepdims=True)
              - 2.0 * patches @ self.centroids.T
              + (self.centroids**2).sum(axis=1))
        return np.argmin(d2, axis=1)

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        """64 visual token ids, row-major over the 8x8 patch grid."""
        return self.encode_patches(image_to_patches(image)) + VISUAL_LO

    def decode_tokens(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.shape != (N_VISUAL_TOKENS,):
            raise ValueError(f"decode_tokens expects {N_VISUAL_TOKENS} ids, got {ids.shape}")
        if ((ids < VISUAL_LO) | (ids >= ACTION_LO)).any():
            bad = int(ids[(ids < VISUAL_LO) | (ids >= ACTION_LO)][0])
            raise ValueError(f"id {bad} outside visual range [{VISUAL_LO}, {ACTION_LO})")
        return patches_to_image(self.centroids[ids - VISUAL_LO])

    def reconstruction_mse(self, image: np.ndarray) -> float:
        patches = image_to_patches(image)
        rec = self.centroids[self.encode_patches(patches)]
        return float(((patches - rec) ** 2).mean())


def fit_codebook(images: list[np.ndarray], seed: int,
                 k: int = CODEBOOK_K, iters: int = KMEANS_ITERS) -> VisualCodebook:
    """Seeded k-means over deduplicated patches, weighted by multiplicity."""
    all_patches = np.concatenate([image_to_patches(im) for im in images], axis=0)
    uniq, counts = np.unique(all_patches, axis=0, return_counts=True)
    rng = np.random.default_rng(seed)
    duplicate = len(uniq) < k
    if duplicate:
        reps = -(-k // len(uniq))
        centroids = np.tile(uniq, (reps, 1))[:k].astype(np.float64)
    else:
        centroids = uniq[rng.choice(len(uniq), size=k, replace=False)].astype(np.float64)
    w = counts.astype(np.float64)
    assign = np.zeros(len(uniq), dtype=np.int64)
    for _ in range(iters):
        d2 = ((uniq**2).sum(axis=1, keepdims=True) - 2.0 * uniq @ centroids.T
              + (centroids**2).sum(axis=1))
        assign = np.argmin(d2, axis=1)
        for j in range(k):
            sel = assign == j
            if sel.any():
                centroids[j] = (uniq[sel] * w[sel, None]).sum(axis=0) / w[sel].sum()
            else:
                centroids[j] = uniq[rng.integers(len(uniq))]
    d2 = ((uniq**2).sum(axis=1, keepdims=True) - 2.0 * uniq @ centroids.T
          + (centroids**2).sum(axis=1))
    inertia = float((np.min(d2, axis=1).clip(min=0.0) * w).sum())
    return VisualCodebook(centroids=centroids, seed=seed, inertia=inertia,
                          duplicate_fallback=duplicate)


def embed_patches_continuous(image: np.ndarray, weight: DiffTensor,
                             bias: DiffTensor) -> DiffTensor:
    """Affine projection of each 48-d patch to d_model; differentiable."""
    patches = constant(image_to_patches(image), dtype=weight.dtype)
    return add(matmul(patches, weight), bias)


# ---------------------------------------------------------------------------
# trajectory tokenizer


def dct_matrix(n: int = N_WAYPOINTS) -> np.ndarray:
    """Orthonormal DCT-II matrix; rows are basis functions."""
    k = np.arange(n)[:, None]
    m = np.arange(n)[None, :]
    d = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * m + 1) * k / (2 * n))
    d[0] /= np.sqrt(2.0)
    return d


_DCT = dct_matrix()


@dataclass
class ActionTokenizer:
    """Quantized-DCT trajectory codec: 6 waypoints <-> 12 action token ids."""

    gamma: float = DEFAULT_GAMMA
    bound: float = 25.0

    def coefficients(self, traj: np.ndarray) -> np.ndarray:
        traj = np.asarray(traj, dtype=np.float64)
        if traj.shape != (N_WAYPOINTS, 2):
            raise ValueError(f"trajectory must be ({N_WAYPOINTS}, 2), got {traj.shape}")
        return np.concatenate([_DCT @ traj[:, 0], _DCT @ traj[:, 1]])

    def tokenize(self, traj: np.ndarray) -> np.ndarray:
        """12 action-range ids; x-axis coefficients first, then y."""
        traj = np.asarray(traj, dtype=np.float64)
        if traj.shape != (N_WAYPOINTS, 2):
            raise ValueError(f"trajectory must be ({N_WAYPOINTS}, 2), got {traj.shape}")
        if np.abs(traj).max() > self.bound + 1e-9:
            raise ValueError(
                f"trajectory exceeds workspace bound {self.bound}: max |coord| = {np.abs(traj).max():.3f}")
        symbols = np.clip(np.rint(self.gamma * self.coefficients(traj)), -128, 127)
        return (symbols + 128).astype(np.int64) + ACTION_LO

    def detokenize(self, ids: np.ndarray) -> np.ndarray:
        """Inverse quantization and inverse DCT; requires exactly 12 action ids."""
        ids = np.asarray(ids)
        if ids.shape != (N_ACTION_TOKENS,):
            raise ValueError(
                f"action decode failure: expected {N_ACTION_TOKENS} ids, got shape {ids.shape}")
        if ((ids < ACTION_LO) | (ids >= BOS)).any():
            bad = int(ids[(ids < ACTION_LO) | (ids >= BOS)][0])
            raise ValueError(f"action decode failure: id {bad} outside [{ACTION_LO}, {BOS})")
        symbols = ids - ACTION_LO - 128
        coeffs = symbols.astype(np.float64) / self.gamma
        x = _DCT.T @ coeffs[:N_WAYPOINTS]
        y = _DCT.T @ coeffs[N_WAYPOINTS:]
        return np.stack([x, y], axis=1)
