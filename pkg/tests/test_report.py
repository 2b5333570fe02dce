import xml.etree.ElementTree as ET

import pytest

from ppap.errors import ConfigError
from ppap.harness import CSV_FIELDS
from ppap.report import bar_data, render, scatter_data


def row(run_id, method, strength, task, stage, acc, seed=0):
    r = dict.fromkeys(CSV_FIELDS, "")
    r.update(run_id=run_id, method=method, strength=strength, task_id=task, stage=stage, accuracy=str(acc), seed=str(seed))
    return r


@pytest.fixture
def seq_rows():
    rows = []
    for seed, (a1, a2) in enumerate([(0.5, 0.9), (0.7, 0.8)]):
        rid = f"synthetic/s{seed}/none"
        rows += [row(rid, "none", "", "task1", "after-task1", 0.95, seed),
                 row(rid, "none", "", "task1", "after-task2", a1, seed),
                 row(rid, "none", "", "task2", "after-task2", a2, seed)]
    rid = "synthetic/s0/ppap(0.1)"
    rows += [row(rid, "ppap", "0.1", "task1", "after-task1", 0.95),
             row(rid, "ppap", "0.1", "task1", "after-task2", 0.9),
             row(rid, "ppap", "0.1", "task2", "after-task2", 0.85)]
    rid = "synthetic/s0/scratch"
    rows += [row(rid, "scratch", "", "task1", "after-task1", 0.96),
             row(rid, "scratch", "", "task2", "after-task2", 0.93)]
    return rows


@pytest.fixture
def loco_rows():
    rows = []
    for h, (x0, y0, x1, y1) in enumerate([(0.6, 0.9, 0.8, 0.85), (0.7, 1.0, 0.9, 0.95)]):
        for method, s, x, y in (("none", "", x0, y0), ("ppap", "0.2", x1, y1)):
            rid = f"loco/e20x20/h{h}/s0/{method}" + (f"({s})" if s else "")
            rows += [row(rid, method, s, f"pretrain-h{h}", "pretrain_end", 0.92),
                     row(rid, method, s, f"pretrain-h{h}", "probe", x),
                     row(rid, method, s, f"finetune-h{h}", "finetune_end", y)]
    return rows


def test_bar_data_uses_final_stage_means(seq_rows):
    data, tasks, labels = bar_data(seq_rows)
    assert tasks == ["task1", "task2"]
    assert labels[0] == "scratch" and labels[1] == "none"
    assert data["none"]["task1"] == pytest.approx(0.6)
    assert data["ppap(0.1)"]["task2"] == pytest.approx(0.85)
    assert data["scratch"] == {"task1": 0.96, "task2": 0.93}


def test_bars_svg_is_valid_xml(seq_rows):
    out = render(seq_rows, "bars")
    root = ET.fromstring(out["bars.svg"])
    assert root.tag.endswith("svg")
    assert len([e for e in root.iter() if e.tag.endswith("rect")]) >= 8


def test_scatter_points_and_references(loco_rows):
    groups = scatter_data(loco_rows)
    points, refs = groups["loco/e20x20"]
    assert points["none"] == pytest.approx((0.65, 0.95))
    assert points["ppap(0.2)"] == pytest.approx((0.85, 0.9))
    assert refs == pytest.approx({"pretrain_end": 0.92, "degraded": 0.65, "finetune_target": 0.95})


def test_scatter_svg_has_dashed_references(loco_rows):
    out = render(loco_rows, "scatter")
    assert list(out) == ["scatter-e20x20.svg"]
    root = ET.fromstring(out["scatter-e20x20.svg"])
    dashed = [e for e in root.iter() if e.tag.endswith("line") and e.get("stroke-dasharray")]
    assert len(dashed) == 3


def test_render_errors(seq_rows):
    with pytest.raises(ConfigError):
        render(seq_rows, "pie")
    with pytest.raises(ConfigError):
        render(seq_rows, "scatter")


def test_frontier_scores_best_strength_per_family(loco_rows):
    from ppap.harness import euclidean_score
    from ppap.report import frontier_scores

    for r in loco_rows:
        if r["stage"] == "finetune_end":
            x = next(q for q in loco_rows if q["run_id"] == r["run_id"] and q["stage"] == "probe")["accuracy"]
            r["euclidean_score"] = repr(euclidean_score(float(x), float(r["accuracy"])))
    extra = [dict(r, strength="0.05", run_id=r["run_id"].replace("0.2", "0.05"),
                  euclidean_score=("0.5" if r["euclidean_score"] else "")) for r in loco_rows if r["method"] == "ppap"]
    scores = frontier_scores(loco_rows + extra)[("loco/e20x20", 0)]
    expect = (euclidean_score(0.8, 0.85) + euclidean_score(0.9, 0.95)) / 2
    assert scores["ppap"] == (pytest.approx(expect), "ppap(0.2)")
    assert scores["none"][1] == "none"
