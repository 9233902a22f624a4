"""Command-line entry points: splits, training, evaluation and the reconstruction demo.

Exit codes: 0 success, 1 runtime failure (bad data, missing checkpoint,
aborted training), 2 configuration or usage error.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import config as cfgmod
from .backbone import BackboneError
from .data import DatasetError, generate_synthetic_dataset, load_manifest
from .jigsaw import apply_jigsaw, load_image, sample_permutation, to_uint8_image
from .protocols import (ProtocolError, TaskSpec, audit_b2n, build_task, evaluate, format_table,
                        plot_alpha_sweep, task_manifests, write_report)
from .trainer import Checkpoint, ImageClassifier, TrainConfig, TrainingAborted, TrainSet, build_model, fit

RUN_FILE = "run.json"
RUNTIME_ERRORS = (DatasetError, ProtocolError, BackboneError, TrainingAborted, FileNotFoundError, OSError,
                  ValueError, KeyError)


class ConfigFailure(click.ClickException):
    exit_code = 2

    def show(self, file=None):
        click.echo(f"config error: {self.message}", err=True)


class RuntimeFailure(click.ClickException):
    exit_code = 1


def _guard(fn):
    """Map library exceptions onto the documented exit codes."""

    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except cfgmod.ConfigError as exc:
            raise ConfigFailure(str(exc)) from exc
        except click.ClickException:
            raise
        except RUNTIME_ERRORS as exc:
            raise RuntimeFailure(str(exc)) from exc

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _seeds(text) -> list[int]:
    try:
        seeds = [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError as exc:
        raise cfgmod.ConfigError(f"--seeds expects comma-separated integers, got {text!r}") from exc
    if not seeds or len(set(seeds)) != len(seeds):
        raise cfgmod.ConfigError(f"--seeds needs distinct integers, got {text!r}")
    return seeds


def _names(text) -> list[str] | None:
    if text is None:
        return None
    p = Path(text)
    raw = p.read_text() if p.is_file() else text
    names = [n.strip() for n in raw.replace("\n", ",").split(",") if n.strip()]
    return names or None


def _load_datasets(paths) -> dict:
    manifests, roots = {}, {}
    for p in paths:
        m = load_manifest(p)
        if m.name in manifests:
            raise cfgmod.ConfigError(f"two datasets share the name {m.name!r}")
        manifests[m.name] = m
        roots[m.name] = str(Path(p).resolve())
    return manifests, roots


def _task_from_args(kind, datasets, seeds, shots, shared_classes):
    kind = kind.upper()
    if not datasets:
        raise cfgmod.ConfigError("at least one --dataset is required")
    if kind == "SSMT" and not shared_classes:
        raise cfgmod.ConfigError("--task ssmt needs --shared-classes (comma list or file)")
    if kind == "B2N" and len(datasets) != 1:
        raise cfgmod.ConfigError("--task b2n takes exactly one --dataset")
    if kind in ("CD", "SSMT") and len(datasets) < 2:
        raise cfgmod.ConfigError(f"--task {kind.lower()} needs a source and at least one target --dataset")
    manifests, roots = _load_datasets(datasets)
    names = list(manifests)
    task = build_task(kind, manifests, source=names[0], targets=names[1:], shots=shots, seeds=seeds,
                      shared_classes=shared_classes)
    return task, manifests, roots


def _config_options(fn):
    opts = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML config file."),
        click.option("--set", "assignments", multiple=True, metavar="KEY=VALUE", help="Override any config key."),
        click.option("--backbone", default=None, help="Shortcut for backbone.name."),
        click.option("--epochs", type=int, default=None, help="Shortcut for train.epochs."),
        click.option("--alpha", type=float, default=None, help="Shortcut for loss.alpha."),
        click.option("--lr", type=float, default=None, help="Shortcut for train.lr."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _resolve_config(config_path, assignments, **shortcuts):
    overrides = cfgmod.parse_assignments(assignments)
    keys = {"backbone": "backbone.name", "epochs": "train.epochs", "alpha": "loss.alpha", "lr": "train.lr",
            "shots": "train.shots", "jumble_eval": "eval.jumble"}
    for k, v in shortcuts.items():
        if v is not None:
            overrides[keys[k]] = v
    return cfgmod.resolve(config_path, overrides)


HELP_EPILOG = "\b\nConfiguration keys (set with --set KEY=VALUE or a YAML file):\n" + cfgmod.help_text()


@click.group(epilog=HELP_EPILOG, context_settings={"max_content_width": 120})
@click.option("-v", "--verbose", is_flag=True, help="Log every epoch.")
def main(verbose):
    """Prompt learning with jigsaw self-supervision on a frozen vision-language backbone."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)


@main.command("make-synthetic")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--classes", "K", default=4, show_default=True)
@click.option("--per-class", default=24, show_default=True)
@click.option("--seed", default=0, show_default=True)
@_guard
def cmd_make_synthetic(out, K, per_class, seed):
    """Write a small coloured-stripe image folder for smoke tests."""
    m = generate_synthetic_dataset(out, K, per_class, seed)
    click.echo(f"wrote {len(m.samples)} images in {m.num_classes} classes to {out}")


@main.command("make-splits")
@click.option("--dataset", "datasets", multiple=True, type=click.Path(), help="Image-folder root; first is the source.")
@click.option("--task", "kind", type=click.Choice(["b2n", "cd", "ssmt"], case_sensitive=False), default="b2n")
@click.option("--seeds", default="1,2,3", show_default=True)
@click.option("--shots", default=16, show_default=True)
@click.option("--shared-classes", default=None, help="SSMT class list: comma-separated or a file.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@_guard
def cmd_make_splits(datasets, kind, seeds, shots, shared_classes, out):
    """Write one split file per seed plus the task description."""
    task, _, roots = _task_from_args(kind, datasets, _seeds(seeds), shots, _names(shared_classes))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in task.seeds:
        (out / f"{task.source}_seed{seed}.json").write_text(task.splits[seed].dumps())
    (out / "task.json").write_text(json.dumps({"task": task.to_json(), "roots": roots}, indent=2) + "\n")
    click.echo(f"wrote {len(task.seeds)} split files to {out}")


def _load_task_file(path):
    doc = json.loads(Path(path).read_text())
    return TaskSpec.from_json(doc["task"]), doc["roots"]


@main.command("train")
@click.option("--dataset", "datasets", multiple=True, type=click.Path())
@click.option("--task", "kind", type=click.Choice(["b2n", "cd", "ssmt"], case_sensitive=False), default="b2n")
@click.option("--seeds", default="1,2,3", show_default=True)
@click.option("--shots", type=int, default=None, help="Shortcut for train.shots.")
@click.option("--shared-classes", default=None)
@click.option("--splits", "task_file", type=click.Path(dir_okay=False), help="task.json from make-splits.")
@click.option("--resume", is_flag=True, help="Continue from existing checkpoints under --out.")
@_config_options
@click.option("--out", required=True, type=click.Path(file_okay=False))
@_guard
def cmd_train(datasets, kind, seeds, shots, shared_classes, task_file, resume, config_path, assignments,
              backbone, epochs, alpha, lr, out):
    """Train one model per seed; writes <out>/seed<N>/checkpoint.safetensors and log.jsonl."""
    cfg = _resolve_config(config_path, assignments, backbone=backbone, epochs=epochs, alpha=alpha, lr=lr,
                          shots=shots)
    if task_file:
        task, roots = _load_task_file(task_file)
        manifests = {n: load_manifest(r) for n, r in roots.items()}
    else:
        task, manifests, roots = _task_from_args(kind, datasets, _seeds(seeds), cfg["train.shots"],
                                                 _names(shared_classes))
    manifests = task_manifests(task, manifests)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / RUN_FILE).write_text(json.dumps({"config": cfg, "task": task.to_json(), "roots": roots}, indent=2) + "\n")
    src = manifests[task.source]
    for seed in task.seeds:
        split = task.splits[seed]
        classes = task.train_classes(seed)
        tcfg = TrainConfig.from_run_config(cfg, seed=seed)
        dtype = torch.float64 if cfg["train.dtype"] == "float64" else torch.float32
        trainset = TrainSet.from_manifest(src, split.shots, classes, dtype=dtype)
        model = build_model(cfg)
        seed_dir = out / f"seed{seed}"
        previous = None
        if resume and (seed_dir / "checkpoint.safetensors").exists():
            previous = Checkpoint.load(seed_dir / "checkpoint.safetensors")
        result = fit(trainset, model, tcfg, cfg, seed_dir, resume=previous,
                     extra={"task": task.kind, "dataset": task.source})
        if task.kind == "B2N":
            audit_b2n(task, seed, result.checkpoint.extra.get("seen_classes", []))
        last = result.log[-1] if result.log else None
        msg = f"seed {seed}: {result.checkpoint.epoch} epochs"
        if last:
            msg += f", final total loss {last['total']:.4f}"
        click.echo(msg)


def _load_run(run_dir):
    run_dir = Path(run_dir)
    if not (run_dir / RUN_FILE).is_file():
        raise FileNotFoundError(f"{run_dir} has no {RUN_FILE}; was it produced by 'train'?")
    doc = json.loads((run_dir / RUN_FILE).read_text())
    task = TaskSpec.from_json(doc["task"])
    cfg = cfgmod.validate({**cfgmod.defaults(), **doc["config"]})
    return cfg, task, doc["roots"]


def _load_trained(run_dir, seed, cfg):
    ckpt = Checkpoint.load(Path(run_dir) / f"seed{seed}" / "checkpoint.safetensors")
    model = build_model(cfg)
    ckpt.apply_to(model)
    return model, ckpt


@main.command("eval")
@click.option("--run", "runs", multiple=True, required=True, type=click.Path(file_okay=False),
              help="Training output directory; repeat to evaluate an alpha sweep.")
@click.option("--jumble-eval", is_flag=True, default=None, help="Evaluate on jumbled inputs (eval.jumble).")
@click.option("--report", type=click.Path(dir_okay=False), help="JSON report path (default <run>/report.json).")
@click.option("--plot", type=click.Path(dir_okay=False), help="Alpha-sweep plot path; needs several --run.")
@_guard
def cmd_eval(runs, jumble_eval, report, plot):
    """Top-1 accuracy per seed and averaged; B2N adds base, new and harmonic mean."""
    sweep = []
    for run_dir in runs:
        cfg, task, roots = _load_run(run_dir)
        if jumble_eval is not None:
            cfg["eval.jumble"] = jumble_eval
        manifests = {n: load_manifest(r) for n, r in roots.items()}
        classifiers = {}
        for seed in task.seeds:
            model, _ = _load_trained(run_dir, seed, cfg)
            classifiers[seed] = ImageClassifier(model, cfg["eval.batch_size"], cfg["eval.jumble"],
                                                cfg["jigsaw.grid"], seed)
        if task.kind == "B2N":
            results = [evaluate(classifiers, task, "b2n", manifests)]
        else:
            results = [evaluate(classifiers, task, "source", manifests)]
            results += [evaluate(classifiers, task, t, manifests) for t in task.targets]
        path = Path(report) if report and len(runs) == 1 else Path(run_dir) / "report.json"
        doc = write_report(path, task, results)
        doc["alpha"] = cfg["loss.alpha"]
        click.echo(f"== {run_dir} (alpha={cfg['loss.alpha']}, jumble_eval={cfg['eval.jumble']})")
        click.echo(format_table(task, results))
        headline = results[0].hm if task.kind == "B2N" else float(np.mean([r.mean_top1 for r in results[1:]]))
        sweep.append((cfg["loss.alpha"], headline))
    if plot:
        if len(runs) < 2:
            raise cfgmod.ConfigError("--plot needs at least two --run directories")
        plot_alpha_sweep(sweep, plot)
        click.echo(f"wrote {plot}")


@main.command("demo-reconstruct")
@click.option("--run", "run_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None, help="Which seed's checkpoint (default: first).")
@click.option("--index", "indices", multiple=True, type=int, help="Source sample indices (default: first 4).")
@click.option("--untrained", is_flag=True, help="Use the freshly initialised reconstructor instead.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@_guard
def cmd_demo_reconstruct(run_dir, seed, indices, untrained, out):
    """Save an image grid with rows of (original, jumbled, reconstruction)."""
    from PIL import Image

    cfg, task, roots = _load_run(run_dir)
    seed = task.seeds[0] if seed is None else seed
    if seed not in task.seeds:
        raise cfgmod.ConfigError(f"seed {seed} is not part of this run ({task.seeds})")
    model, _ = _load_trained(run_dir, seed, cfg)
    if untrained:
        model = build_model(cfg)
    manifest = load_manifest(roots[task.source])
    indices = list(indices) or list(range(min(4, len(manifest.samples))))
    x_hat, x, x_jig = reconstruct_samples(model, manifest, indices, cfg["jigsaw.grid"], seed)
    Image.fromarray(reconstruction_grid(x, x_jig, x_hat)).save(out)
    err = float(((x_hat - x) ** 2).flatten(1).sum(1).sqrt().mean())
    click.echo(f"wrote {out} ({len(indices)} rows, mean L2 to original {err:.2f})")


def reconstruct_samples(model, manifest, indices, grid, seed):
    dtype = model.context.dtype
    x = torch.stack([load_image(manifest.path(i)) for i in indices]).to(dtype)
    x_jig = torch.stack([apply_jigsaw(img, sample_permutation(grid, [seed, 0, i])) for img, i in zip(x, indices)])
    model.eval()
    with torch.no_grad():
        emb, _ = model.encode(x_jig)
        x_hat = model.reconstructor(emb)
    return x_hat, x, x_jig


def reconstruction_grid(x, x_jig, x_hat) -> np.ndarray:
    rows = [np.concatenate([to_uint8_image(a), to_uint8_image(b), to_uint8_image(c)], axis=1)
            for a, b, c in zip(x, x_jig, x_hat)]
    return np.concatenate(rows, axis=0)


if __name__ == "__main__":
    sys.exit(main())
