"""Jigsaw puzzles: images cut into d x d patches and shuffled."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from ..data import Example
from ..graph import fully_connected


@dataclass(frozen=True)
class TextureSpec:
    """Smooth random image: Gaussian-filtered white noise, rescaled to [0, 1] per channel."""

    size: int = 48
    channels: int = 1
    smoothness: float = 4.0


def synthetic_texture(spec: TextureSpec, rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal((spec.size, spec.size, spec.channels))
    img = gaussian_filter(noise, sigma=(spec.smoothness, spec.smoothness, 0))
    lo = img.min(axis=(0, 1), keepdims=True)
    hi = img.max(axis=(0, 1), keepdims=True)
    return ((img - lo) / np.maximum(hi - lo, 1e-12)).astype(np.float32)


@dataclass(eq=False)
class PuzzleInstance:
    d: int
    patches: np.ndarray   # d^2 x ph x pw x C, in shuffled order
    targets: np.ndarray   # true position (row-major) of each shuffled patch

    @property
    def features(self) -> np.ndarray:
        return self.patches.reshape(len(self.patches), -1).astype(np.float32)

    def reassemble(self, positions=None) -> np.ndarray:
        """Put every patch at ``positions`` (default: the true targets)."""
        positions = self.targets if positions is None else np.asarray(positions)
        d = self.d
        _, ph, pw, c = self.patches.shape
        img = np.zeros((d * ph, d * pw, c), dtype=self.patches.dtype)
        for patch, pos in zip(self.patches, positions):
            r, col = divmod(int(pos), d)
            img[r * ph:(r + 1) * ph, col * pw:(col + 1) * pw] = patch
        return img

    def to_example(self, split: str = "train") -> Example:
        n = self.d * self.d
        return Example(self.features, fully_connected(n), self.targets.copy(),
                       np.ones(n, dtype=bool), split, info={"d": self.d})


def split_patches(img: np.ndarray, d: int) -> np.ndarray:
    if img.ndim == 2:
        img = img[:, :, None]
    H, W = img.shape[:2]
    if H % d or W % d:
        raise ValueError(f"image of size {H}x{W} is not divisible into {d}x{d} patches")
    ph, pw = H // d, W // d
    return np.stack([img[r * ph:(r + 1) * ph, c * pw:(c + 1) * pw] for r in range(d) for c in range(d)])


def gen_puzzle(source, d: int, rng: np.random.Generator) -> PuzzleInstance:
    """Cut ``source`` (an image array or a :class:`TextureSpec`) into d x d shuffled patches.

    Shuffled patch ``i`` came from position ``targets[i]``.
    """
    if d < 2:
        raise ValueError(f"puzzle side must be at least 2, got {d}")
    img = synthetic_texture(source, rng) if isinstance(source, TextureSpec) else np.asarray(source)
    patches = split_patches(img, d)
    perm = rng.permutation(d * d)
    return PuzzleInstance(d, patches[perm], perm.astype(np.int64))


def feature_dim(spec: TextureSpec, d: int) -> int:
    return (spec.size // d) ** 2 * spec.channels
