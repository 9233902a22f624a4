"""Image preprocessing and the patch-shuffling (jigsaw) augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

IMAGE_SIZE = 224
# CLIP preprocessing statistics
MEAN = (0.48145466, 0.4578275, 0.40821073)
STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass(frozen=True)
class PatchPermutation:
    grid: int
    perm: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "perm", tuple(int(i) for i in self.perm))
        if self.grid < 1 or IMAGE_SIZE % self.grid:
            raise ValueError(f"grid {self.grid} does not divide {IMAGE_SIZE}")
        if sorted(self.perm) != list(range(self.grid**2)):
            raise ValueError(f"perm is not a bijection on {self.grid**2} patches")

    @classmethod
    def identity(cls, grid: int) -> "PatchPermutation":
        return cls(grid, tuple(range(grid * grid)))

    def is_identity(self) -> bool:
        return self.perm == tuple(range(self.grid**2))


def sample_permutation(grid: int, rng_seed, exclude_identity: bool = False) -> PatchPermutation:
    """Uniform draw over all grid**2! patch orderings.

    ``rng_seed`` may be an int or a sequence of ints (fed to numpy's
    SeedSequence), which is how per-sample streams are derived.
    """
    if grid < 1 or IMAGE_SIZE % grid:
        raise ValueError(f"grid {grid} does not divide {IMAGE_SIZE}")
    rng = np.random.default_rng(rng_seed)
    n = grid * grid
    while True:
        perm = rng.permutation(n)
        if not exclude_identity or n == 1 or not np.array_equal(perm, np.arange(n)):
            return PatchPermutation(grid, tuple(perm.tolist()))


def inverse(p: PatchPermutation) -> PatchPermutation:
    inv = [0] * len(p.perm)
    for slot, src in enumerate(p.perm):
        inv[src] = slot
    return PatchPermutation(p.grid, tuple(inv))


def apply_jigsaw(x, p: PatchPermutation):
    """Move patch ``p.perm[i]`` into slot ``i`` (row-major patch order).

    Works on ``(..., C, H, W)`` torch tensors or numpy arrays; the rearrangement
    is a pure copy so values are reproduced bit for bit.
    """
    h, w = x.shape[-2:]
    g = p.grid
    if h % g or w % g:
        raise ValueError(f"image of size {h}x{w} cannot be cut into a {g}x{g} grid")
    ph, pw = h // g, w // g
    lead = x.shape[:-2]
    # (..., g, ph, g, pw) -> (..., g*g, ph, pw)
    patches = x.reshape(*lead, g, ph, g, pw)
    if isinstance(x, torch.Tensor):
        patches = patches.movedim(-3, -2).reshape(*lead, g * g, ph, pw)
        idx = torch.as_tensor(p.perm, device=x.device)
        out = patches.index_select(len(lead), idx)
        return out.reshape(*lead, g, g, ph, pw).movedim(-2, -3).reshape(x.shape)
    patches = np.moveaxis(patches, -3, -2).reshape(*lead, g * g, ph, pw)
    out = np.take(patches, np.asarray(p.perm), axis=len(lead))
    return np.moveaxis(out.reshape(*lead, g, g, ph, pw), -2, -3).reshape(x.shape)


def jigsaw_batch(x: torch.Tensor, perms) -> torch.Tensor:
    return torch.stack([apply_jigsaw(img, p) for img, p in zip(x, perms)])


def normalize(x: torch.Tensor) -> torch.Tensor:
    mean = torch.tensor(MEAN, dtype=x.dtype, device=x.device).view(3, 1, 1)
    std = torch.tensor(STD, dtype=x.dtype, device=x.device).view(3, 1, 1)
    return (x - mean) / std


def denormalize(x: torch.Tensor) -> torch.Tensor:
    mean = torch.tensor(MEAN, dtype=x.dtype, device=x.device).view(3, 1, 1)
    std = torch.tensor(STD, dtype=x.dtype, device=x.device).view(3, 1, 1)
    return x * std + mean


def load_image(path, size: int = IMAGE_SIZE) -> torch.Tensor:
    """Read an RGB file and return a normalized ``(3, size, size)`` float tensor."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    x = torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)
    if x.shape[-2:] != (size, size):
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    return normalize(x[0])


def to_uint8_image(x: torch.Tensor) -> np.ndarray:
    """Normalized ``(3, H, W)`` tensor back to an ``(H, W, 3)`` uint8 array."""
    rgb = denormalize(x.detach().float().cpu()).clamp(0, 1)
    return (rgb.permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
