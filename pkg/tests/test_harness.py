import hashlib
import math

import numpy as np
import pytest

from ppap.data import Batch, TaskSpec, gen_synthetic_loco, gen_synthetic_tasks, make_loco_tasks
from ppap.errors import ConfigError
from ppap.harness import (
    CSV_FIELDS,
    MethodSpec,
    RunConfig,
    euclidean_score,
    evaluate,
    format_csv,
    linear_probe,
    loco_pretrain,
    metrics_rows,
    read_metrics_csv,
    run_loco,
    run_sequence,
    sweep_loco,
)
from ppap.models import build_mlp, init_params


def digest(params):
    h = hashlib.sha256()
    for n in sorted(params):
        h.update(n.encode() + params[n].tobytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def two_tasks():
    return gen_synthetic_tasks("cluster-split", 2, seed=0, classes_per_task=3, n_per_class=30, epochs=3)


@pytest.fixture(scope="module")
def loco_pair():
    data = gen_synthetic_loco(seed=0, n_per_fine=15)
    return make_loco_tasks(data, 2, epochs=(3, 3), batch_size=32)


# euclidean score ------------------------------------------------------------------

def test_euclidean_values():
    assert euclidean_score(0, 0) == 0
    assert euclidean_score(0.803, 0.805) == pytest.approx(1.1370, abs=5e-5)
    assert euclidean_score(1, 1) == pytest.approx(math.sqrt(2))


def test_euclidean_symmetric_and_monotone():
    assert euclidean_score(0.2, 0.7) == euclidean_score(0.7, 0.2)
    assert euclidean_score(0.3, 0.5) < euclidean_score(0.31, 0.5) < euclidean_score(0.31, 0.51)


@pytest.mark.parametrize("xy", [(-0.1, 0.5), (0.5, 1.2)])
def test_euclidean_range(xy):
    with pytest.raises(ConfigError):
        euclidean_score(*xy)


# evaluate -------------------------------------------------------------------------

def test_evaluate_memorized_set():
    model = build_mlp([2, 2])
    params = init_params(model, 0)
    params["head.out.weight"] = np.array([[10, 0], [0, 10]], np.float32)
    params["head.out.bias"] = np.zeros(2, np.float32)
    x = np.array([[1, 0], [0, 1], [2, 0.5]], np.float32)
    assert evaluate(model, params, Batch(x, [0, 1, 0])) == 1.0


def test_evaluate_uniform_model_is_chance(rng):
    c, n = 4, 4000
    model = build_mlp([3, c])
    params = init_params(model, 0)
    for name in list(params):
        params[name] = np.zeros_like(params[name])
    # uniform logits: argmax picks class 0, so accuracy is the share of label 0
    acc = evaluate(model, params, Batch(rng.standard_normal((n, 3)).astype(np.float32), rng.integers(0, c, n)))
    sigma = math.sqrt(0.25 * 0.75 / n)
    assert abs(acc - 1 / c) < 3 * sigma


def test_evaluate_empty_split(small_mlp):
    model, params = small_mlp
    with pytest.raises(ConfigError):
        evaluate(model, params, Batch(np.zeros((0, 4), np.float32), np.zeros(0, int)))


# sequence protocol ----------------------------------------------------------------

def test_sequence_records_every_seen_task(two_tasks):
    rec = run_sequence(two_tasks, MethodSpec("none"), seed=0)
    stages = [(r["stage"], r["task_id"]) for r in rec.rows]
    assert stages == [("after-task1", "task1"), ("after-task2", "task1"), ("after-task2", "task2")]
    assert all(0 <= r["accuracy"] <= 1 for r in rec.rows)
    assert rec.euclidean == pytest.approx(euclidean_score(rec.retention, rec.adaptation))


@pytest.mark.parametrize("method", [MethodSpec("ppap", r=1.0), MethodSpec("si", c=0.0), MethodSpec("ewc", lam=0.0)])
def test_noop_settings_bit_identical(two_tasks, method):
    a = run_sequence(two_tasks, MethodSpec("none"), seed=3)
    b = run_sequence(two_tasks, method, seed=3)
    assert [r["accuracy"] for r in a.rows] == [r["accuracy"] for r in b.rows]
    assert digest(a.params) == digest(b.params)


def test_same_seed_reproducible(two_tasks):
    a = run_sequence(two_tasks, MethodSpec("ppap", r=0.1), seed=1)
    b = run_sequence(two_tasks, MethodSpec("ppap", r=0.1), seed=1)
    assert digest(a.params) == digest(b.params)
    assert a.profiles[0] == b.profiles[0]


def test_identical_tasks_no_shift():
    base = gen_synthetic_tasks("cluster-split", 1, seed=5, classes_per_task=3, n_per_class=40, epochs=5)[0]
    second = TaskSpec("task2", base.train, base.val, "task2", base.n_classes, base.epochs, base.batch_size)
    rec = run_sequence([base, second], MethodSpec("none"), seed=0)
    assert rec.final["task1"] == pytest.approx(rec.final["task2"], abs=0.1)


def test_head_mismatch_is_config_error(two_tasks):
    model = build_mlp([2, 8, 0], head_dims=[3, 4], head_names=["task1", "task2"])
    with pytest.raises(ConfigError):
        run_sequence(two_tasks, MethodSpec("none"), RunConfig(model=model))


def test_scratch_reinitialises(two_tasks):
    rec = run_sequence(two_tasks, MethodSpec("scratch"), seed=0)
    assert [(r["stage"], r["task_id"]) for r in rec.rows] == [("after-task1", "task1"), ("after-task2", "task2")]


def test_method_validation():
    with pytest.raises(ConfigError):
        MethodSpec("lwf")
    with pytest.raises(ConfigError):
        MethodSpec("ppap", r=2.0)
    assert MethodSpec("si", c=0.5).label == "si(0.5)"


# LOCO -----------------------------------------------------------------------------

def test_probe_leaves_backbone_unchanged(loco_pair):
    pre, fin = loco_pair
    snap = loco_pretrain(pre, fin, seed=0)
    before = digest(snap.params)
    linear_probe(snap.model, snap.params, pre, RunConfig(probe_epochs=5))
    assert digest(snap.params) == before


def test_probe_random_backbone_above_chance(loco_pair):
    pre, fin = loco_pair
    model = build_mlp([16, 64, 0], head_dims=[19, 5], head_names=["pretrain", "finetune"])
    acc = linear_probe(model, init_params(model, 0), pre, RunConfig(probe_epochs=30))
    assert acc > 3 / 19


def test_loco_references_and_rows(loco_pair):
    pre, fin = loco_pair
    recs = sweep_loco(pre, fin, [MethodSpec("none"), MethodSpec("ppap", r=0.2)], seed=0)
    none, ppap = recs
    assert set(ppap.references) == {"pretrain_end", "degraded", "finetune_target"}
    assert ppap.references["degraded"] == none.retention
    assert ppap.references["finetune_target"] == none.adaptation
    assert [r["stage"] for r in ppap.rows] == ["pretrain_end", "probe", "finetune_end"]
    assert ppap.profiles and ppap.profiles[0].task_id == pre.task_id


def test_loco_noop_matches_baseline(loco_pair):
    pre, fin = loco_pair
    base = run_loco(pre, fin, MethodSpec("none"), seed=1)
    for m in (MethodSpec("ppap", r=1.0), MethodSpec("si", c=0.0), MethodSpec("ewc", lam=0.0)):
        rec = run_loco(pre, fin, m, seed=1)
        assert (rec.retention, rec.adaptation) == (base.retention, base.adaptation)


def test_loco_rejects_scratch(loco_pair):
    pre, fin = loco_pair
    with pytest.raises(ConfigError):
        run_loco(pre, fin, MethodSpec("scratch"), seed=0)


# CSV ------------------------------------------------------------------------------

def test_csv_round_trip(tmp_path, two_tasks):
    rec = run_sequence(two_tasks, MethodSpec("none"), seed=0)
    rows = metrics_rows(rec, "synthetic/s0/none")
    assert all(r["wall_time_seconds"] == "" for r in rows)
    text = format_csv(rows)
    assert text.splitlines()[0] == ",".join(CSV_FIELDS)
    (tmp_path / "m.csv").write_text(text)
    back = read_metrics_csv(tmp_path / "m.csv")
    assert back == rows
    assert float(back[0]["accuracy"]) == rec.rows[0]["accuracy"]


def test_csv_timing_optional(two_tasks):
    rec = run_sequence(two_tasks, MethodSpec("none"), seed=0)
    assert metrics_rows(rec, "x", record_timing=True)[0]["wall_time_seconds"] != ""


def test_csv_schema_mismatch(tmp_path):
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ConfigError):
        read_metrics_csv(tmp_path / "bad.csv")
    (tmp_path / "empty.csv").write_text(",".join(CSV_FIELDS) + "\n")
    with pytest.raises(ConfigError):
        read_metrics_csv(tmp_path / "empty.csv")


def test_probe_after_pretraining_recovers_accuracy():
    data = gen_synthetic_loco(seed=0, n_per_fine=30)
    pre, fin = make_loco_tasks(data, 0, epochs=(15, 1), batch_size=32)
    snap = loco_pretrain(pre, fin, seed=0)
    acc = linear_probe(snap.model, snap.params, pre, RunConfig(probe_epochs=100))
    assert abs(acc - snap.pretrain_accuracy) <= 0.02
