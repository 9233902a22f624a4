import json

import numpy as np
import pytest

from csaw.data import DatasetManifest
from csaw.protocols import (EvalResult, ProtocolError, TaskSpec, audit_b2n, build_task, eval_samples, evaluate,
                            format_table, harmonic_mean, plot_alpha_sweep, report_rows, write_report)

SHARED = [f"shared{i:02d}" for i in range(16)]


def manifest(name, classes, per_class=6):
    samples = [(f"{c}/{i}.png", k) for k, c in enumerate(classes) for i in range(per_class)]
    return DatasetManifest(name, list(classes), samples, (8, 8))


class Oracle:
    """Predicts from a lookup of true labels; ``mode`` selects perfect or constant output."""

    def __init__(self, mode="perfect", constant=0):
        self.mode, self.constant = mode, constant

    def predict(self, m, indices, names):
        if self.mode == "constant":
            return np.full(len(indices), self.constant)
        return np.array([names.index(m.classes[m.samples[i][1]]) for i in indices])


@pytest.mark.parametrize("base,new,hm", [(92.90, 66.03, 77.20), (96.03, 70.18, 81.09)])
def test_harmonic_mean_reported_rows(base, new, hm):
    assert abs(harmonic_mean(base, new) - hm) <= 0.05


def test_harmonic_mean_properties(rng):
    for x in rng.uniform(0.01, 100, 20):
        assert harmonic_mean(x, x) == pytest.approx(x, rel=1e-12)
    for a, b in rng.uniform(0.01, 100, (50, 2)):
        assert harmonic_mean(a, b) <= (a + b) / 2 + 1e-12
        assert harmonic_mean(a, b) >= min(a, b) - 1e-12
    with pytest.raises(ValueError):
        harmonic_mean(0.0, 50.0)


def test_b2n_split_sizes_and_shots():
    m = manifest("PatternNet", [f"c{i:02d}" for i in range(38)], per_class=20)
    task = build_task("b2n", {"PatternNet": m}, shots=16)
    assert task.seeds == [1, 2, 3]
    for seed in task.seeds:
        split = task.splits[seed]
        assert len(split.base_classes) == len(split.new_classes) == 19
        assert sorted(split.base_classes + split.new_classes) == list(range(38))
        assert set(split.shots) == set(split.base_classes)
        assert all(len(v) == 16 for v in split.shots.values())


def test_task_json_roundtrip():
    m = manifest("ds", ["a", "b", "c", "d"], per_class=20)
    task = build_task("B2N", {"ds": m}, shots=4, seeds=[1, 2])
    back = TaskSpec.from_json(json.loads(json.dumps(task.to_json())))
    assert back == task


def test_ssmt_restricts_to_shared_classes():
    names = ["PatternNetv2", "RSICDv2", "RESISC45v2", "MLRSNetv2"]
    manifests = {n: manifest(n, SHARED + [f"{n}_extra{i}" for i in range(4)]) for n in names}
    task = build_task("ssmt", manifests, source=names[0], targets=names[1:], shots=2, shared_classes=SHARED)
    assert task.shared_classes == SHARED
    assert all(len(task.splits[s].base_classes) == 16 for s in task.seeds)
    _, idx, class_names, labels = eval_samples(task, _restricted(task, manifests), 1, "RSICDv2")
    assert class_names == SHARED and len(idx) == 16 * 6 and set(labels) == set(range(16))


def _restricted(task, manifests):
    from csaw.protocols import task_manifests

    return task_manifests(task, manifests)


def test_ssmt_rejects_missing_shared_classes():
    manifests = {"src": manifest("src", SHARED), "tgt": manifest("tgt", SHARED[:15] + ["other"])}
    with pytest.raises(ProtocolError, match="tgt lacks \\['shared15'\\]"):
        build_task("ssmt", manifests, source="src", targets=["tgt"], shared_classes=SHARED)
    with pytest.raises(ProtocolError, match="shared class list"):
        build_task("ssmt", manifests, source="src", targets=["tgt"])


def test_cd_missing_target_names_it():
    m = manifest("PatternNet", ["a", "b"])
    with pytest.raises(ProtocolError, match="RSSCN7"):
        build_task("cd", {"PatternNet": m}, targets=["RSSCN7"])
    task = build_task("cd", {"PatternNet": m, "X": manifest("X", ["q", "r"])}, targets=["X"], shots=2)
    assert task.source == "PatternNet" and task.splits[1].base_classes == [0, 1]


def test_perfect_and_constant_classifiers():
    m = manifest("ds", ["a", "b", "c", "d"], per_class=12)
    task = build_task("cd", {"ds": m, "t": manifest("t", ["w", "x", "y", "z"], 9)}, source="ds",
                      targets=["t"], shots=4, seeds=[1, 2, 3])
    manifests = {"ds": m, "t": manifest("t", ["w", "x", "y", "z"], 9)}
    perfect = evaluate({s: Oracle() for s in task.seeds}, task, "t", manifests)
    assert perfect.per_seed_top1 == {1: 1.0, 2: 1.0, 3: 1.0} and perfect.mean_top1 == 1.0
    const = evaluate({s: Oracle("constant", 2) for s in task.seeds}, task, "t", manifests)
    # balanced target: exactly 9 of 36 samples carry label 2
    assert const.mean_top1 == pytest.approx(9 / 36, abs=1e-15)
    src = evaluate({s: Oracle() for s in task.seeds}, task, "source", manifests)
    assert src.mean_top1 == 1.0


def test_mean_over_seeds_is_arithmetic():
    res = EvalResult("t", {1: 0.5, 2: 0.6, 3: 0.9})
    assert res.mean_top1 == pytest.approx((0.5 + 0.6 + 0.9) / 3, abs=1e-15)


def test_b2n_base_excludes_shots_and_new_uses_all():
    m = manifest("ds", ["a", "b", "c", "d"], per_class=10)
    task = build_task("b2n", {"ds": m}, shots=4, seeds=[1])
    split = task.splits[1]
    _, base_idx, base_names, _ = eval_samples(task, {"ds": m}, 1, "base")
    used = {i for v in split.shots.values() for i in v}
    assert not used & set(base_idx) and len(base_idx) == 2 * 6
    assert base_names == [m.classes[c] for c in split.base_classes]
    _, new_idx, new_names, _ = eval_samples(task, {"ds": m}, 1, "new")
    assert len(new_idx) == 2 * 10 and new_names == [m.classes[c] for c in split.new_classes]


def test_b2n_evaluation_reports_hm():
    m = manifest("ds", ["a", "b", "c", "d"], per_class=10)
    task = build_task("b2n", {"ds": m}, shots=4, seeds=[1, 2])
    res = evaluate({1: Oracle(), 2: Oracle("constant", 0)}, task, "b2n", {"ds": m})
    assert res.base_acc == pytest.approx((1.0 + 0.5) / 2)
    assert res.new_acc == pytest.approx((1.0 + 0.5) / 2)
    assert res.hm == pytest.approx(harmonic_mean(res.base_acc, res.new_acc))
    rows = report_rows(task, [res])
    assert {r["seed"] for r in rows} == {1, 2, "mean"}
    assert all({"task", "seed", "split", "top1", "base", "new", "hm"} <= set(r) for r in rows)
    table = format_table(task, [res])
    assert "base" in table and "HM" in table and "75.00" in table


def test_seed_mismatch():
    m = manifest("ds", ["a", "b", "c", "d"], per_class=10)
    task = build_task("b2n", {"ds": m}, shots=4, seeds=[1, 2, 3])
    with pytest.raises(ProtocolError, match="do not match"):
        evaluate({1: Oracle(), 2: Oracle()}, task, "b2n", {"ds": m})


def test_label_audit():
    m = manifest("ds", ["a", "b", "c", "d"], per_class=10)
    task = build_task("b2n", {"ds": m}, shots=4, seeds=[1])
    audit_b2n(task, 1, task.splits[1].base_classes)
    with pytest.raises(ProtocolError, match="new classes"):
        audit_b2n(task, 1, [task.splits[1].new_classes[0]])


def test_cd_table_and_report(tmp_path):
    src = manifest("PatternNet", ["a", "b"], 6)
    manifests = {"PatternNet": src, "T1": manifest("T1", ["x", "y"], 6), "T2": manifest("T2", ["u", "v"], 6)}
    task = build_task("cd", manifests, targets=["T1", "T2"], shots=2, seeds=[1])
    results = [evaluate({1: Oracle()}, task, d, manifests) for d in ("source", "T1", "T2")]
    table = format_table(task, results)
    lines = table.splitlines()
    assert any(l.startswith("T1") for l in lines) and any(l.startswith("T2") for l in lines)
    assert lines[-1].startswith("target average") and "100.00" in lines[-1]
    doc = write_report(tmp_path / "r.json", task, results)
    assert json.loads((tmp_path / "r.json").read_text()) == doc


def test_alpha_sweep_plot(tmp_path):
    from PIL import Image

    pts = plot_alpha_sweep([(0.0, 0.6), (0.5, 0.8), (0.5, 0.7), (1.0, 0.65)], tmp_path / "sweep.png")
    assert pts == [(0.0, 60.0), (0.5, 75.0), (1.0, 65.0)]
    with Image.open(tmp_path / "sweep.png") as im:
        assert im.size[0] > 100
