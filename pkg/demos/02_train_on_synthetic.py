"""
Training the prompt learner
===========================

Train the learnable context, the visual-attentive token generator and the
reconstructor on a 4-class, 16-shot synthetic dataset, then plot the loss
components per epoch.
"""

import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from csaw import config
from csaw.data import generate_synthetic_dataset, sample_shots
from csaw.trainer import ImageClassifier, TrainConfig, TrainSet, build_model, fit, top1

torch.set_num_threads(1)
out_dir = Path("demo_out")
out_dir.mkdir(exist_ok=True)

manifest = generate_synthetic_dataset(Path(tempfile.mkdtemp()) / "syn", K=4, per_class=16, seed=0)
shots = sample_shots(manifest, range(4), shots=16, seed=1)
trainset = TrainSet.from_manifest(manifest, shots, range(4))

cfg = config.defaults()
model = build_model(cfg)
print("trainable groups:", sorted(model.trainable_groups()))

# alpha balances the self-supervised pair (ssl + recon) against diversity
tc = TrainConfig(epochs=20, lr=5e-4, momentum=0.9, alpha=0.5, seed=1)
result = fit(trainset, model, tc, cfg, out_dir=out_dir / "run")

for entry in result.log[:: 4] + [result.log[-1]]:
    print(f"epoch {entry['epoch']:2d}  total {entry['total']:8.3f}  recon {entry['recon']:8.3f}  "
          f"ssl {entry['ssl']:.3f}  ce {entry['ce']:.4f}")

acc = top1(ImageClassifier(model), manifest, trainset.sample_ids, trainset.class_names, trainset.labels.tolist())
print("train top-1:", acc)

# %%
# Loss curves
# -----------

epochs = [e["epoch"] for e in result.log]
fig, axes = plt.subplots(1, 2, figsize=(8, 3))
axes[0].plot(epochs, [e["total"] for e in result.log], label="total")
axes[0].plot(epochs, [e["recon"] / 2 for e in result.log], "--", label="recon / 2")
axes[0].set_xlabel("epoch")
axes[0].legend()
axes[1].plot(epochs, [e["ssl"] for e in result.log], label="ssl")
axes[1].plot(epochs, [e["dm"] for e in result.log], label="dm")
axes[1].set_xlabel("epoch")
axes[1].legend()
fig.tight_layout()
fig.savefig(out_dir / "loss_curves.png", dpi=110)
