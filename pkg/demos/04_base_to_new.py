"""
Base-to-new evaluation
======================

Split the classes in half, train on the base half, and score both halves.
New classes are recognised purely through their names in the learned prompt.
"""

import tempfile
from pathlib import Path

import torch

from csaw import config
from csaw.data import generate_synthetic_dataset
from csaw.protocols import audit_b2n, build_task, evaluate, format_table
from csaw.trainer import ImageClassifier, TrainConfig, TrainSet, build_model, fit

torch.set_num_threads(1)
manifest = generate_synthetic_dataset(Path(tempfile.mkdtemp()) / "syn", K=6, per_class=20, seed=0)
task = build_task("b2n", {manifest.name: manifest}, shots=16, seeds=[1, 2, 3])
cfg = config.defaults()

classifiers = {}
for seed in task.seeds:
    split = task.splits[seed]
    print(f"seed {seed}: base {[manifest.classes[c] for c in split.base_classes]}")
    trainset = TrainSet.from_manifest(manifest, split.shots, task.train_classes(seed))
    model = build_model(cfg)
    result = fit(trainset, model, TrainConfig(epochs=3, lr=5e-4, momentum=0.9, seed=seed), cfg)
    # no new-class label may reach the optimiser
    audit_b2n(task, seed, result.checkpoint.extra["seen_classes"])
    classifiers[seed] = ImageClassifier(model)

res = evaluate(classifiers, task, "b2n", {manifest.name: manifest})
print(format_table(task, [res]))
