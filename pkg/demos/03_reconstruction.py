"""
Reconstructing the clean image from a jumbled one
=================================================

The reconstructor maps the embedding of a jumbled image back to a full
224x224 picture. Compare its output before and after a short training run.
"""

import tempfile
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from csaw import config
from csaw.cli import reconstruct_samples, reconstruction_grid
from csaw.data import generate_synthetic_dataset, sample_shots
from csaw.trainer import TrainConfig, TrainSet, build_model, fit

torch.set_num_threads(1)
out_dir = Path("demo_out")
out_dir.mkdir(exist_ok=True)

manifest = generate_synthetic_dataset(Path(tempfile.mkdtemp()) / "syn", K=4, per_class=16, seed=0)
shots = sample_shots(manifest, range(4), shots=16, seed=1)
trainset = TrainSet.from_manifest(manifest, shots, range(4))
cfg = config.defaults()
rows = [0, 16, 32, 48]


def l2(model):
    x_hat, x, _ = reconstruct_samples(model, manifest, rows, grid=4, seed=1)
    return float((x_hat - x).flatten(1).norm(dim=1).mean())


untrained = build_model(cfg)
print("untrained reconstructor, mean L2 to the clean image:", round(l2(untrained), 2))

trained = build_model(cfg)
fit(trainset, trained, TrainConfig(epochs=20, lr=5e-4, momentum=0.9, seed=1), cfg)
print("trained reconstructor, mean L2 to the clean image:", round(l2(trained), 2))

# one row per image: original, jumbled input, reconstruction
x_hat, x, x_jig = reconstruct_samples(trained, manifest, rows, grid=4, seed=1)
Image.fromarray(reconstruction_grid(x, x_jig, x_hat)).save(out_dir / "reconstruction.png")
print("mean colour error per channel:",
      np.round((x_hat - x).mean(dim=(2, 3)).abs().mean(0).numpy(), 3))
