"""Static SVG charts from metrics CSVs, written with plain string primitives.

``bars``: grouped per-task accuracy after the final stage, one bar family per
method (strengths kept apart), "scratch" drawn gray.
``scatter``: one point per method/strength at (mean probed pretrain accuracy,
mean finetune accuracy), with dashed reference lines for the pretraining
target, the degraded baseline, and the finetuning target.
"""

from __future__ import annotations

from collections import defaultdict
from html import escape

import numpy as np

from .errors import ConfigError

W, H = 720, 440
M_LEFT, M_RIGHT, M_TOP, M_BOTTOM = 60, 170, 30, 50
PALETTE = {"ppap": "#e67e22", "si": "#27ae60", "ewc": "#8e44ad", "none": "#c0392b", "scratch": "#999999"}
EXTRA = ["#2980b9", "#16a085", "#d35400", "#7f8c8d"]


def _label(row):
    s = row["strength"]
    return row["method"] if s == "" else f"{row['method']}({float(s):g})"


class Canvas:
    def __init__(self, width=W, height=H, title=""):
        self.width, self.height = width, height
        self.items = [f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>']
        if title:
            self.text(width / 2, 18, title, size=14, anchor="middle")

    def rect(self, x, y, w, h, fill, title=None):
        tip = f"<title>{escape(title)}</title>" if title else ""
        self.items.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{w:.2f}" height="{h:.2f}" fill="{fill}">{tip}</rect>')

    def line(self, x1, y1, x2, y2, stroke="black", dash=None, width=1):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.items.append(
            f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" stroke="{stroke}" stroke-width="{width}"{d}/>'
        )

    def circle(self, x, y, r, fill, title=None):
        tip = f"<title>{escape(title)}</title>" if title else ""
        self.items.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r}" fill="{fill}">{tip}</circle>')

    def text(self, x, y, s, size=11, anchor="start", rotate=None):
        rot = f' transform="rotate({rotate} {x:.2f} {y:.2f})"' if rotate is not None else ""
        self.items.append(
            f'<text x="{x:.2f}" y="{y:.2f}" font-family="sans-serif" font-size="{size}" '
            f'text-anchor="{anchor}"{rot}>{escape(str(s))}</text>'
        )

    def svg(self):
        body = "\n".join(self.items)
        return (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
            f'viewBox="0 0 {self.width} {self.height}">\n{body}\n</svg>\n'
        )


def _axes(cv, x0, x1, y0, y1, xlabel, ylabel, xticks=None):
    """Frame with y ticks; returns coordinate transforms."""
    left, right = M_LEFT, cv.width - M_RIGHT
    top, bottom = M_TOP, cv.height - M_BOTTOM
    fx = lambda v: left + (v - x0) / (x1 - x0) * (right - left)
    fy = lambda v: bottom - (v - y0) / (y1 - y0) * (bottom - top)
    cv.line(left, bottom, right, bottom)
    cv.line(left, top, left, bottom)
    for v in np.linspace(y0, y1, 6):
        cv.line(left - 4, fy(v), left, fy(v))
        cv.text(left - 6, fy(v) + 4, f"{v:.2f}", size=10, anchor="end")
    if xticks is None:
        for v in np.linspace(x0, x1, 6):
            cv.line(fx(v), bottom, fx(v), bottom + 4)
            cv.text(fx(v), bottom + 16, f"{v:.2f}", size=10, anchor="middle")
    cv.text((left + right) / 2, cv.height - 10, xlabel, size=12, anchor="middle")
    cv.text(16, (top + bottom) / 2, ylabel, size=12, anchor="middle", rotate=-90)
    return fx, fy


def _legend(cv, entries):
    x = cv.width - M_RIGHT + 15
    for i, (name, color) in enumerate(entries):
        y = M_TOP + 10 + 18 * i
        cv.rect(x, y - 9, 12, 12, color)
        cv.text(x + 18, y + 1, name)


def _colors(labels):
    """Family colour, lightened per extra strength so variants stay distinguishable."""
    fam = defaultdict(list)
    for lab in labels:
        fam[lab.split("(")[0]].append(lab)
    out, spare = {}, iter(EXTRA * 4)
    for name, members in fam.items():
        base = PALETTE.get(name) or next(spare)
        rgb = np.array([int(base[i:i + 2], 16) for i in (1, 3, 5)], float)
        for j, lab in enumerate(members):
            mix = 0.45 * j / max(len(members) - 1, 1) if len(members) > 1 else 0.0
            c = rgb + (255 - rgb) * mix
            out[lab] = "#" + "".join(f"{int(round(v)):02x}" for v in c)
    return out


def _final_rows(rows):
    """Rows measured after each run's last stage (scratch: each task right after its own training)."""
    by_run = defaultdict(list)
    for r in rows:
        by_run[r["run_id"]].append(r)
    out = []
    for run in by_run.values():
        if run[0]["method"] == "scratch":
            out.extend(r for r in run if r["stage"] == f"after-{r['task_id']}")
        else:
            last = run[-1]["stage"]
            out.extend(r for r in run if r["stage"] == last)
    return out


def bar_data(rows):
    """{label: {task_id: mean accuracy}} plus the ordered task and label lists."""
    final = _final_rows(rows)
    if not final:
        raise ConfigError("no sequence rows to plot")
    acc = defaultdict(list)
    tasks, labels = [], []
    for r in final:
        lab = _label(r)
        if r["task_id"] not in tasks:
            tasks.append(r["task_id"])
        if lab not in labels:
            labels.append(lab)
        acc[lab, r["task_id"]].append(float(r["accuracy"]))
    labels.sort(key=lambda s: (s != "scratch", s != "none", s))
    data = {lab: {t: float(np.mean(acc[lab, t])) for t in tasks if acc.get((lab, t))} for lab in labels}
    return data, tasks, labels


def bars_svg(rows, title="Per-task accuracy after the final task"):
    data, tasks, labels = bar_data(rows)
    colors = _colors(labels)
    cv = Canvas(title=title)
    fx, fy = _axes(cv, 0, len(tasks), 0.0, 1.0, "task", "validation accuracy", xticks=False)
    group = 0.8 / len(labels)
    for ti, task in enumerate(tasks):
        cv.text(fx(ti + 0.5), cv.height - M_BOTTOM + 16, task, size=10, anchor="middle")
        for li, lab in enumerate(labels):
            if task not in data[lab]:
                continue
            v = data[lab][task]
            x = fx(ti + 0.1 + li * group)
            cv.rect(x, fy(v), fx(group) - fx(0) - 1, fy(0) - fy(v), colors[lab], f"{lab} {task}: {v:.3f}")
    _legend(cv, [(lab, colors[lab]) for lab in labels])
    return cv.svg()


def scatter_data(rows):
    """{group: ({label: (x, y)}, references)} from LOCO rows."""
    groups = defaultdict(lambda: defaultdict(lambda: {"probe": [], "finetune_end": [], "pretrain_end": []}))
    for r in rows:
        if r["stage"] not in ("probe", "finetune_end", "pretrain_end"):
            continue
        group = r["run_id"].split("/h")[0] if "/h" in r["run_id"] else "loco"
        groups[group][_label(r)][r["stage"]].append(float(r["accuracy"]))
    if not groups:
        raise ConfigError("no LOCO rows (stages probe / finetune_end) to plot")
    out = {}
    for g, by_label in groups.items():
        points = {lab: (float(np.mean(v["probe"])), float(np.mean(v["finetune_end"])))
                  for lab, v in by_label.items() if v["probe"] and v["finetune_end"]}
        pre = [x for v in by_label.values() for x in v["pretrain_end"]]
        refs = {"pretrain_end": float(np.mean(pre)) if pre else None}
        if "none" in points:
            refs["degraded"], refs["finetune_target"] = points["none"]
        out[g] = (points, refs)
    return out


def scatter_svg(points, refs, title="Retention vs adaptation"):
    labels = sorted(points, key=lambda s: (s.split("(")[0] != "none", s))
    colors = _colors(labels)
    xs = [p[0] for p in points.values()] + [v for k, v in refs.items() if v is not None and k != "finetune_target"]
    ys = [p[1] for p in points.values()] + [refs.get("finetune_target") or points[labels[0]][1]]
    pad = 0.02
    x0, x1 = max(0.0, min(xs) - pad), min(1.0, max(xs) + pad)
    y0, y1 = max(0.0, min(ys) - pad), min(1.0, max(ys) + pad)
    if x1 - x0 < 1e-6:
        x0, x1 = max(0.0, x0 - 0.05), min(1.0, x1 + 0.05)
    if y1 - y0 < 1e-6:
        y0, y1 = max(0.0, y0 - 0.05), min(1.0, y1 + 0.05)
    cv = Canvas(title=title)
    fx, fy = _axes(cv, x0, x1, y0, y1, "probed pretraining accuracy (X)", "finetuning accuracy (Y)")
    top, bottom, left, right = M_TOP, cv.height - M_BOTTOM, M_LEFT, cv.width - M_RIGHT
    if refs.get("pretrain_end") is not None:
        cv.line(fx(refs["pretrain_end"]), top, fx(refs["pretrain_end"]), bottom, "#2c7fb8", "6,4", 1.5)
    if refs.get("degraded") is not None:
        cv.line(fx(refs["degraded"]), top, fx(refs["degraded"]), bottom, "#d7301f", "6,4", 1.5)
    if refs.get("finetune_target") is not None:
        cv.line(left, fy(refs["finetune_target"]), right, fy(refs["finetune_target"]), "#2c7fb8", "6,4", 1.5)
    for lab in labels:
        x, y = points[lab]
        cv.circle(fx(x), fy(y), 5, colors[lab], f"{lab}: X={x:.3f} Y={y:.3f}")
    entries = [(lab, colors[lab]) for lab in labels]
    _legend(cv, entries + [("-- references", "#2c7fb8")])
    return cv.svg()


def frontier_scores(rows):
    """Best mean euclidean score per method family, for each (group, seed).

    For every method/strength the finetune-row euclidean scores are averaged
    over hold-outs; each family keeps its best strength.
    Returns ``{(group, seed): {family: (best score, best label)}}``.
    """
    per = defaultdict(list)
    for r in rows:
        if r["stage"] != "finetune_end" or r["euclidean_score"] == "":
            continue
        group = r["run_id"].split("/h")[0] if "/h" in r["run_id"] else "loco"
        per[group, int(r["seed"]), r["method"], _label(r)].append(float(r["euclidean_score"]))
    if not per:
        raise ConfigError("no LOCO finetune rows with euclidean scores")
    out = defaultdict(dict)
    for (group, seed, fam, lab), v in sorted(per.items()):
        score = float(np.mean(v))
        best = out[group, seed].get(fam)
        if best is None or score > best[0]:
            out[group, seed][fam] = (score, lab)
    return dict(out)


def render(rows, style):
    """{file name: svg text} for the given rows and chart style."""
    if style == "bars":
        return {"bars.svg": bars_svg(rows)}
    if style == "scatter":
        out = {}
        for g, (points, refs) in sorted(scatter_data(rows).items()):
            if not points:
                continue
            name = "scatter.svg" if g == "loco" else f"scatter-{g.split('/')[-1]}.svg"
            out[name] = scatter_svg(points, refs, f"Retention vs adaptation ({g})")
        if not out:
            raise ConfigError("no complete LOCO points to plot")
        return out
    raise ConfigError(f"unknown report style {style!r}; use bars or scatter", "style")
