"""Dataset manifests, base/new splits, few-shot sampling and a synthetic image folder."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}

# Colour words used as class names by the synthetic generator. The stand-in
# backbone grounds these same words so it behaves like a pretrained VLM on them.
PALETTE: dict[str, tuple[int, int, int]] = {
    "red": (200, 40, 40),
    "green": (40, 170, 60),
    "blue": (40, 70, 200),
    "yellow": (220, 210, 50),
    "purple": (130, 50, 160),
    "orange": (235, 130, 30),
    "cyan": (40, 190, 200),
    "grey": (128, 128, 128),
}


class DatasetError(ValueError):
    pass


@dataclass
class DatasetManifest:
    name: str
    classes: list[str]
    samples: list[tuple[str, int]]
    image_size: tuple[int, int]
    root: str | None = None

    def __post_init__(self):
        self.samples = [(str(p), int(c)) for p, c in self.samples]
        self.image_size = tuple(int(v) for v in self.image_size)
        if len(self.classes) < 2:
            raise DatasetError(f"{self.name}: need at least 2 classes, got {len(self.classes)}")
        if len({p for p, _ in self.samples}) != len(self.samples):
            raise DatasetError(f"{self.name}: duplicate sample paths")
        used = {c for _, c in self.samples}
        if not used <= set(range(len(self.classes))):
            raise DatasetError(f"{self.name}: class index outside [0, {len(self.classes)})")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def indices_of(self, class_index: int) -> list[int]:
        return [i for i, (_, c) in enumerate(self.samples) if c == class_index]

    def path(self, sample_index: int) -> Path:
        rel = self.samples[sample_index][0]
        return Path(self.root) / rel if self.root else Path(rel)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "classes": list(self.classes),
            "samples": [[p, c] for p, c in self.samples],
            "image_size": list(self.image_size),
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def from_json(cls, doc: dict, root=None) -> "DatasetManifest":
        return cls(doc["name"], list(doc["classes"]), [tuple(s) for s in doc["samples"]],
                   tuple(doc["image_size"]), root=None if root is None else str(root))


@dataclass
class SplitFile:
    dataset: str
    seed: int
    base_classes: list[int]
    new_classes: list[int]
    shots: dict[int, list[int]] = field(default_factory=dict)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["shots"] = {str(k): list(v) for k, v in sorted(self.shots.items())}
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2) + "\n"

    @classmethod
    def from_json(cls, doc: dict) -> "SplitFile":
        return cls(
            dataset=doc["dataset"],
            seed=int(doc["seed"]),
            base_classes=[int(c) for c in doc["base_classes"]],
            new_classes=[int(c) for c in doc["new_classes"]],
            shots={int(k): [int(i) for i in v] for k, v in doc["shots"].items()},
        )

    @classmethod
    def load(cls, path) -> "SplitFile":
        return cls.from_json(json.loads(Path(path).read_text()))


def load_manifest(root_path) -> DatasetManifest:
    """Scan ``<root>/<class_name>/<image files>`` into a manifest.

    Classes and samples come out in lexicographic order so two scans of the
    same tree always agree. Every image is opened once to catch corrupt files.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"no classes found under {root}")

    classes, samples = [], []
    image_size = None
    for idx, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir()
                       if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise DatasetError(f"class {cdir.name!r} has no images")
        classes.append(cdir.name)
        for f in files:
            try:
                with Image.open(f) as im:
                    im.verify()
                    size = (im.height, im.width)
            except (UnidentifiedImageError, OSError) as exc:
                raise DatasetError(f"unreadable image {f}: {exc}") from exc
            if image_size is None:
                image_size = size
            samples.append((f.relative_to(root).as_posix(), idx))
    return DatasetManifest(root.name, classes, samples, image_size, root=str(root))


def restrict_manifest(manifest: DatasetManifest, class_names, name=None) -> DatasetManifest:
    """Keep only ``class_names`` (in that order), re-indexing labels densely."""
    missing = [c for c in class_names if c not in manifest.classes]
    if missing:
        raise DatasetError(f"{manifest.name}: missing shared classes {missing}")
    remap = {manifest.classes.index(c): i for i, c in enumerate(class_names)}
    samples = [(p, remap[c]) for p, c in manifest.samples if c in remap]
    return DatasetManifest(name or manifest.name, list(class_names), samples,
                           manifest.image_size, root=manifest.root)


def make_b2n_split(manifest: DatasetManifest, seed: int) -> SplitFile:
    k = manifest.num_classes
    if k < 2:
        raise DatasetError("base-to-new split needs at least 2 classes")
    order = np.random.default_rng(seed).permutation(k)
    n_base = math.ceil(k / 2)
    return SplitFile(
        dataset=manifest.name,
        seed=int(seed),
        base_classes=sorted(int(c) for c in order[:n_base]),
        new_classes=sorted(int(c) for c in order[n_base:]),
    )


def sample_shots(manifest: DatasetManifest, classes, shots: int, seed: int) -> dict[int, list[int]]:
    """Draw ``shots`` sample indices per class; short classes are taken whole."""
    out = {}
    for c in classes:
        c = int(c)
        if not 0 <= c < manifest.num_classes:
            raise DatasetError(f"unknown class index {c} for {manifest.name}")
        pool = manifest.indices_of(c)
        if len(pool) < shots:
            logger.warning("class %r has %d samples, fewer than %d shots; using all",
                           manifest.classes[c], len(pool), shots)
            out[c] = sorted(pool)
            continue
        # one stream per (seed, class) so adding classes does not reshuffle others
        rng = np.random.default_rng([int(seed), c])
        pick = rng.choice(len(pool), size=shots, replace=False)
        out[c] = sorted(pool[i] for i in pick)
    return out


def _synthetic_image(rgb, class_index, rng, size):
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # class-specific stripe orientation and frequency on top of the base colour
    angle = np.pi * class_index / 5.0
    freq = 2 * np.pi * (2 + class_index % 3) / size
    phase = rng.uniform(0, 2 * np.pi)
    stripes = np.sin(freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
    base = np.asarray(rgb, dtype=np.float64) * rng.uniform(0.85, 1.15)
    img = base[None, None, :] + 25.0 * stripes[..., None] + rng.normal(0, 12.0, (h, w, 3))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_synthetic_dataset(root, K: int, per_class: int, seed: int, size: int = 64) -> DatasetManifest:
    """Write a small colour/stripe image folder that a toy model can learn.

    Class names are taken from :data:`PALETTE`, so ``K`` is capped at its size.
    Output is byte-identical for a fixed ``seed``.
    """
    if K < 2 or per_class < 1:
        raise DatasetError("need K >= 2 and per_class >= 1")
    if K > len(PALETTE):
        raise DatasetError(f"synthetic generator supports at most {len(PALETTE)} classes")
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create {root}: {exc}") from exc
    if not os.access(root, os.W_OK):
        raise DatasetError(f"{root} is not writable")

    names = list(PALETTE)[:K]
    for c, name in enumerate(names):
        cdir = root / name
        cdir.mkdir(exist_ok=True)
        for i in range(per_class):
            rng = np.random.default_rng([int(seed), c, i])
            arr = _synthetic_image(PALETTE[name], c, rng, size)
            Image.fromarray(arr).save(cdir / f"{name}_{i:04d}.png", optimize=False)
    return load_manifest(root)
