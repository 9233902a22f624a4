"""Base-to-new, cross-dataset and single-source multi-target task builders and metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .data import DatasetManifest, SplitFile, make_b2n_split, restrict_manifest, sample_shots

KINDS = ("B2N", "CD", "SSMT")
DEFAULT_SEEDS = (1, 2, 3)
DEFAULT_CD_SOURCE = "PatternNet"


class ProtocolError(ValueError):
    pass


def harmonic_mean(base: float, new: float) -> float:
    if base <= 0 or new <= 0:
        raise ValueError(f"harmonic mean needs positive accuracies, got {base}, {new}")
    return 2 * base * new / (base + new)


@dataclass
class TaskSpec:
    kind: str
    source: str
    targets: list[str]
    splits: dict[int, SplitFile]
    shots: int
    seeds: list[int]
    shared_classes: list[str] | None = None

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "source": self.source,
            "targets": list(self.targets),
            "shots": self.shots,
            "seeds": list(self.seeds),
            "shared_classes": self.shared_classes,
            "splits": {str(s): sp.to_json() for s, sp in sorted(self.splits.items())},
        }

    @classmethod
    def from_json(cls, doc) -> "TaskSpec":
        return cls(doc["kind"], doc["source"], list(doc["targets"]),
                   {int(s): SplitFile.from_json(sp) for s, sp in doc["splits"].items()},
                   int(doc["shots"]), [int(s) for s in doc["seeds"]], doc.get("shared_classes"))

    def train_classes(self, seed: int) -> list[int]:
        return list(self.splits[seed].base_classes)


def _resolve_manifests(kind, manifests, source, targets, shared_classes):
    if source not in manifests:
        raise ProtocolError(f"missing manifest for source dataset {source!r}")
    missing = [t for t in targets if t not in manifests]
    if missing:
        raise ProtocolError(f"missing manifest for target dataset(s) {', '.join(missing)}")
    if kind != "SSMT":
        return manifests
    if not shared_classes:
        raise ProtocolError("SSMT needs the shared class list")
    problems = {}
    for name in [source, *targets]:
        absent = [c for c in shared_classes if c not in manifests[name].classes]
        if absent:
            problems[name] = absent
    if problems:
        detail = "; ".join(f"{n} lacks {a}" for n, a in problems.items())
        raise ProtocolError(f"manifests do not share the {len(shared_classes)} common classes: {detail}")
    out = dict(manifests)
    for name in [source, *targets]:
        out[name] = restrict_manifest(manifests[name], shared_classes)
    return out


def build_task(kind: str, manifests: Mapping[str, DatasetManifest], source: str | None = None, targets=(),
               shots: int = 16, seeds=DEFAULT_SEEDS, shared_classes=None) -> TaskSpec:
    """Resolve class splits and few-shot lists for every seed.

    B2N halves the source's classes; CD and SSMT train on every source class.
    For SSMT all manifests are first restricted to ``shared_classes``.
    """
    kind = kind.upper()
    if kind not in KINDS:
        raise ProtocolError(f"unknown task kind {kind!r}; expected one of {KINDS}")
    if source is None:
        source = DEFAULT_CD_SOURCE if kind == "CD" else next(iter(manifests), None)
    targets = list(targets)
    if kind == "B2N" and targets:
        raise ProtocolError("B2N uses a single dataset; targets are not allowed")
    if kind in ("CD", "SSMT") and not targets:
        raise ProtocolError(f"{kind} needs at least one target dataset")
    resolved = _resolve_manifests(kind, manifests, source, targets, shared_classes)
    src = resolved[source]
    splits = {}
    for seed in seeds:
        if kind == "B2N":
            split = make_b2n_split(src, seed)
        else:
            split = SplitFile(src.name, int(seed), list(range(src.num_classes)), [])
        split.shots = sample_shots(src, split.base_classes, shots, seed)
        splits[int(seed)] = split
    return TaskSpec(kind, source, targets, splits, int(shots), [int(s) for s in seeds],
                    list(shared_classes) if kind == "SSMT" else None)


def task_manifests(task: TaskSpec, manifests: Mapping[str, DatasetManifest]) -> dict[str, DatasetManifest]:
    return _resolve_manifests(task.kind, manifests, task.source, task.targets, task.shared_classes)


def audit_b2n(task: TaskSpec, seed: int, seen_classes) -> None:
    """Raise if base training touched any new-class label."""
    leaked = sorted(set(int(c) for c in seen_classes) & set(task.splits[seed].new_classes))
    if leaked:
        raise ProtocolError(f"seed {seed}: new classes {leaked} were seen during base training")


def eval_samples(task: TaskSpec, manifests, seed: int, domain: str):
    """(manifest, sample indices, class names, local labels) for one evaluation domain.

    ``base``/``source`` use held-out samples of the training classes (all
    samples if the shots exhausted a class); ``new`` and targets use everything.
    """
    split = task.splits[seed]
    if domain in ("base", "new", "source"):
        m = manifests[task.source]
        if domain == "new":
            if task.kind != "B2N":
                raise ProtocolError("'new' domain only exists for B2N")
            classes = split.new_classes
            used = set()
        else:
            classes = split.base_classes
            used = {i for ids in split.shots.values() for i in ids}
    elif domain in task.targets:
        m = manifests[domain]
        classes = list(range(m.num_classes))
        used = set()
    else:
        raise ProtocolError(f"unknown evaluation domain {domain!r}")
    local = {c: i for i, c in enumerate(classes)}
    idx, labels = [], []
    for c in classes:
        pool = m.indices_of(c)
        keep = [i for i in pool if i not in used] or pool
        idx.extend(keep)
        labels.extend([local[c]] * len(keep))
    return m, idx, [m.classes[c] for c in classes], labels


@dataclass
class EvalResult:
    domain: str
    per_seed_top1: dict[int, float]
    base_acc: float | None = None
    new_acc: float | None = None
    hm: float | None = None
    per_seed_detail: dict[int, dict] = field(default_factory=dict)

    @property
    def mean_top1(self) -> float:
        return float(np.mean([self.per_seed_top1[s] for s in sorted(self.per_seed_top1)]))


def evaluate(models: Mapping[int, object], task: TaskSpec, domain: str,
             manifests: Mapping[str, DatasetManifest]) -> EvalResult:
    """Top-1 accuracy per seed and averaged.

    ``models`` maps each seed of ``task`` to an object with
    ``predict(manifest, indices, class_names) -> array of class positions``.
    For B2N, ``domain="b2n"`` scores base and new classes and their harmonic mean.
    """
    if set(models) != set(task.seeds):
        raise ProtocolError(f"checkpoints for seeds {sorted(models)} do not match task seeds {task.seeds}")
    manifests = task_manifests(task, manifests)

    def score(seed, dom):
        m, idx, names, labels = eval_samples(task, manifests, seed, dom)
        if not idx:
            return math.nan
        pred = np.asarray(models[seed].predict(m, idx, names))
        return float(np.mean(pred == np.asarray(labels)))

    if domain == "b2n":
        if task.kind != "B2N":
            raise ProtocolError("b2n evaluation needs a B2N task")
        detail = {s: {"base": score(s, "base"), "new": score(s, "new")} for s in task.seeds}
        base = float(np.mean([d["base"] for d in detail.values()]))
        new = float(np.mean([d["new"] for d in detail.values()]))
        hm = harmonic_mean(base, new) if base > 0 and new > 0 else 0.0
        for d in detail.values():
            d["hm"] = harmonic_mean(d["base"], d["new"]) if d["base"] > 0 and d["new"] > 0 else 0.0
        return EvalResult("b2n", {s: d["hm"] for s, d in detail.items()}, base, new, hm, detail)
    return EvalResult(domain, {s: score(s, domain) for s in task.seeds})


# -- reports ---------------------------------------------------------------------


def report_rows(task: TaskSpec, results) -> list[dict]:
    rows = []
    for res in results:
        for seed in sorted(res.per_seed_top1):
            row = {"task": task.kind, "seed": seed, "split": res.domain, "top1": res.per_seed_top1[seed]}
            if res.domain == "b2n":
                row.update(res.per_seed_detail[seed])
            rows.append(row)
        mean = {"task": task.kind, "seed": "mean", "split": res.domain, "top1": res.mean_top1}
        if res.domain == "b2n":
            mean.update(base=res.base_acc, new=res.new_acc, hm=res.hm)
        rows.append(mean)
    return rows


def pct(v) -> str:
    return "  nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{100 * v:.2f}"


def format_table(task: TaskSpec, results) -> str:
    """Human-readable summary with accuracies as percentages (2 decimals)."""
    lines = []
    if task.kind == "B2N":
        lines.append(f"{'dataset':<16}{'base':>8}{'new':>8}{'HM':>8}")
        for res in results:
            if res.domain == "b2n":
                lines.append(f"{task.source:<16}{pct(res.base_acc):>8}{pct(res.new_acc):>8}"
                             f"{100 * res.hm:>8.2f}")
        return "\n".join(lines)
    lines.append(f"{'domain':<16}{'top-1':>8}")
    target_means = []
    for res in results:
        lines.append(f"{res.domain:<16}{pct(res.mean_top1):>8}")
        if res.domain in task.targets:
            target_means.append(res.mean_top1)
    if target_means:
        lines.append(f"{'target average':<16}{pct(float(np.mean(target_means))):>8}")
    return "\n".join(lines)


def write_report(path, task: TaskSpec, results):
    doc = {"task": task.kind, "source": task.source, "rows": report_rows(task, results)}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    return doc


def plot_alpha_sweep(points, path, ylabel="top-1 accuracy (%)"):
    """Line plot of accuracy against the loss-balance weight.

    ``points`` is an iterable of ``(alpha, accuracy_fraction)``; repeated
    alphas are averaged.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_alpha: dict[float, list[float]] = {}
    for a, acc in points:
        by_alpha.setdefault(float(a), []).append(float(acc))
    if not by_alpha:
        raise ValueError("no sweep points to plot")
    xs = sorted(by_alpha)
    ys = [100 * float(np.mean(by_alpha[a])) for a in xs]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel("alpha")
    ax.set_ylabel(ylabel)
    ax.set_xlim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return list(zip(xs, ys))
