"""Synthetic image datasets and minimal augmentation.

Three class-separable 32x32x3 recipes stand in for a real corpus. Every
dataset regenerates bit-identically from (recipe, seed, split, n), and labels
are balanced to within one count by construction.
"""

import zlib
from dataclasses import dataclass

import numpy as np

RECIPES = ("striped-shapes", "gaussian-blobs", "textured-digits")

_PALETTE = np.array([
    [0.95, 0.30, 0.25], [0.25, 0.85, 0.35], [0.30, 0.40, 0.95],
    [0.90, 0.85, 0.25], [0.85, 0.30, 0.85], [0.25, 0.85, 0.85],
    [0.95, 0.60, 0.25], [0.55, 0.30, 0.90], [0.45, 0.75, 0.30],
    [0.80, 0.45, 0.55],
], dtype=np.float32)

_DIGITS = {
    0: "111101101101111", 1: "010110010010111", 2: "111001111100111",
    3: "111001111001111", 4: "101101111001001", 5: "111100111001111",
    6: "111100111101111", 7: "111001001001001", 8: "111101111101111",
    9: "111101111001111",
}


@dataclass
class Dataset:
    """Images in [0, 1], integer labels, and the generation recipe."""

    images: np.ndarray
    labels: np.ndarray
    recipe: str
    seed: int
    split: str
    n_classes: int

    def __len__(self):
        return len(self.images)


def _split_rng(seed, split, recipe):
    tag = zlib.crc32(f"{recipe}/{split}".encode())
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))


def synth_dataset(recipe, seed, n, n_classes=10, image_size=32, split="train") -> Dataset:
    """Deterministic class-separable images; labels balanced within one count."""
    if recipe not in RECIPES:
        raise ValueError(f"unknown recipe {recipe!r}; expected one of {RECIPES}")
    if not 2 <= n_classes <= 10:
        raise ValueError("n_classes must lie in [2, 10]")
    if n < n_classes:
        raise ValueError(f"need at least one sample per class, got n={n}")
    rng = _split_rng(seed, split, recipe)
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    maker = {
        "striped-shapes": _striped_shapes,
        "gaussian-blobs": _gaussian_blobs,
        "textured-digits": _textured_digits,
    }[recipe]
    images = maker(labels, image_size, rng)
    # keep pixel noise well below texture contrast: per-patch-normalized
    # reconstruction targets amplify noise on flat patches
    noise = rng.normal(0.0, 0.02, images.shape).astype(np.float32)
    images = np.clip(images + noise, 0.0, 1.0)
    return Dataset(images.astype(np.float32), labels.astype(np.int64),
                   recipe, int(seed), split, n_classes)


def _grid(size):
    c = np.arange(size, dtype=np.float32)
    return np.meshgrid(c, c, indexing="ij")


def _striped_shapes(labels, size, rng):
    """Class-specific grating orientation/frequency plus a bright disc on a
    class-specific ring position, in the class color.

    Orientation, frequency, brightness, and disc position all carry
    per-sample jitter, so class boundaries stay separable by construction but
    blur for small labeled sets.
    """
    u, v = _grid(size)
    images = np.empty((len(labels), size, size, 3), dtype=np.float32)
    for i, c in enumerate(labels):
        theta = np.pi * (c + rng.uniform(-0.35, 0.35)) / 10.0
        freq = 2.0 + (c % 3) + rng.uniform(-0.25, 0.25)
        phase = rng.uniform(-0.9, 0.9)
        wave = np.sin(2.0 * np.pi * freq * (u * np.cos(theta) + v * np.sin(theta))
                      / size + phase)
        base = 0.45 + 0.3 * wave
        ang = 2.0 * np.pi * c / 10.0
        cy = size / 2 + (size / 4) * np.sin(ang) + rng.uniform(-3, 3)
        cx = size / 2 + (size / 4) * np.cos(ang) + rng.uniform(-3, 3)
        disc = np.exp(-(((u - cy) ** 2 + (v - cx) ** 2) / (2.0 * (size / 7.0) ** 2)))
        tint = _PALETTE[c] * rng.uniform(0.55, 1.05)
        img = base[:, :, None] * tint + 0.35 * disc[:, :, None]
        images[i] = img
    return images


def _gaussian_blobs(labels, size, rng):
    """One soft blob per image; class sets its grid cell and color."""
    u, v = _grid(size)
    images = np.empty((len(labels), size, size, 3), dtype=np.float32)
    for i, c in enumerate(labels):
        row, col = divmod(int(c), 5)
        cy = size * (0.30 + 0.40 * row) + rng.uniform(-2.5, 2.5)
        cx = size * (0.12 + 0.19 * col) + rng.uniform(-2.5, 2.5)
        blob = np.exp(-(((u - cy) ** 2 + (v - cx) ** 2) / (2.0 * (size / 7.5) ** 2)))
        images[i] = 0.10 + 0.85 * blob[:, :, None] * _PALETTE[c]
    return images


def _textured_digits(labels, size, rng):
    """Blocky digit glyphs over a checkerboard texture with jittered placement."""
    u, v = _grid(size)
    scale = max(2, size // 8)
    images = np.empty((len(labels), size, size, 3), dtype=np.float32)
    for i, c in enumerate(labels):
        phase = rng.integers(0, 2)
        checker = 0.12 + 0.22 * (((u // 4 + v // 4 + phase) % 2))
        img = np.repeat(checker[:, :, None], 3, axis=2)
        glyph = np.array([float(b) for b in _DIGITS[int(c)]], dtype=np.float32)
        glyph = glyph.reshape(5, 3)
        glyph = np.kron(glyph, np.ones((scale, scale), dtype=np.float32))
        gy = (size - glyph.shape[0]) // 2 + int(rng.integers(-3, 4))
        gx = (size - glyph.shape[1]) // 2 + int(rng.integers(-3, 4))
        gy = int(np.clip(gy, 0, size - glyph.shape[0]))
        gx = int(np.clip(gx, 0, size - glyph.shape[1]))
        region = img[gy:gy + glyph.shape[0], gx:gx + glyph.shape[1]]
        region += 0.75 * glyph[:, :, None]
        images[i] = img
    return images


def augment(images, rng, crop=True, flip=True):
    """Random horizontal flip and padded random crop; disabled flags are the
    identity. Input is never modified."""
    out = np.array(images, copy=True)
    n, h, w, _ = out.shape
    if flip:
        mask = rng.random(n) < 0.5
        out[mask] = out[mask, :, ::-1]
    if crop:
        pad = 2
        padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="edge")
        offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
        for i, (dy, dx) in enumerate(offsets):
            out[i] = padded[i, dy:dy + h, dx:dx + w]
    return out


def batches(n, batch_size, rng=None):
    """Index batches covering [0, n); shuffled when an rng is supplied."""
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
