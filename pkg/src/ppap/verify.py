"""Headless invariant and oracle suites.

Each suite returns a :class:`SuiteResult`; details are formatted
deterministically (no timings), so two runs print identical reports. The
acceptance tests call the same functions at full size.
"""

from __future__ import annotations

import csv
import io
import math
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import nn, plateau
from .data import Batch, gen_synthetic_tasks
from .harness import MethodSpec, RunConfig, run_sequence
from .models import Head, Layer, ModelSpec, build_cnn_multihead, build_mlp, init_params
from .optim import SGD


@dataclass
class SuiteResult:
    name: str
    passed: bool
    checks: int
    detail: str


# welford ---------------------------------------------------------------------------

def welford_suite(n_seq=200, max_len=2000, seed=0, rtol=1e-9):
    """Online std vs two-pass population std on random sequences of random length.

    All sequences run side by side as one accumulator (one weight per
    sequence); sequence j is read out right after its own length is reached,
    which is exact because the recurrence only depends on the prefix.
    """
    rng = np.random.default_rng(seed)
    lengths = rng.integers(2, max_len + 1, n_seq)
    values = rng.uniform(-10.0, 10.0, (int(lengths.max()), n_seq))
    acc = plateau.ActivityAccumulator.zeros({"w": (n_seq,)})
    online = np.zeros(n_seq)
    by_len = {}
    for j, n in enumerate(lengths):
        by_len.setdefault(int(n), []).append(j)
    for t in range(int(lengths.max())):
        plateau.accumulate(acc, {"w": values[t]})
        idx = by_len.get(t + 1)
        if idx:
            online[idx] = acc.std()["w"][idx]
    worst = 0.0
    for j, n in enumerate(lengths):
        ref = values[:n, j].std()  # two-pass, population (ddof=0)
        worst = max(worst, abs(online[j] - ref) / ref)
    return SuiteResult("welford", bool(worst < rtol), n_seq, f"max rel err {worst:.3e} (tol {rtol:g})")


# gradient check ----------------------------------------------------------------------

def _instance(rng, kind):
    """Small random model exercising one layer type (plus a dense head and the CE loss)."""
    if kind == "dense":
        d = int(rng.integers(2, 6))
        model = build_mlp([d, int(rng.integers(2, 6)), int(rng.integers(2, 5))])
        shape = (d,)
    elif kind == "relu":
        d = int(rng.integers(2, 5))
        model = build_mlp([d, int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(2, 5))])
        shape = (d,)
    elif kind == "conv2d":
        c, h = int(rng.integers(1, 3)), int(rng.integers(3, 6))
        layers = (Layer("conv2d", "conv1", c, int(rng.integers(1, 4)), kernel=3, padding=int(rng.integers(0, 2))),
                  Layer("flatten", "flatten"))
        ho = h if layers[0].padding else h - 2
        model = ModelSpec((c, h, h), layers, (Head("out", layers[0].n_out * ho * ho, 3),), "out")
        shape = (c, h, h)
    elif kind == "maxpool2":
        c, h = int(rng.integers(1, 3)), 2 * int(rng.integers(1, 4))
        layers = (Layer("maxpool2", "pool1"), Layer("flatten", "flatten"))
        model = ModelSpec((c, h, h), layers, (Head("out", c * (h // 2) ** 2, 3),), "out")
        shape = (c, h, h)
    elif kind == "dropout":
        d = int(rng.integers(2, 6))
        layers = (Layer("dense", "fc1", d, 6), Layer("dropout", "drop1", rate=0.5))
        model = ModelSpec((d,), layers, (Head("out", 6, 3),), "out")
        shape = (d,)
    elif kind == "cnn":
        model = build_cnn_multihead((2, 4, 4), [3], channels=(2, 2, 2, 2), dense=4)
        shape = (2, 4, 4)
    else:
        raise ValueError(kind)
    params = init_params(model, int(rng.integers(1 << 30)))
    for n in params.names():  # random biases so ReLU/max kinks are not degenerate
        if n.endswith(".bias"):
            params[n] = rng.normal(0, 0.1, params[n].shape).astype(np.float32)
    n = int(rng.integers(1, 5))
    batch = Batch(rng.standard_normal((n, *shape)).astype(np.float32), rng.integers(0, model.head_spec().n_out, n))
    return model, params, batch


GRAD_KINDS = ("dense", "relu", "conv2d", "maxpool2", "dropout", "cnn")


def gradcheck_suite(n_instances=24, seed=0, tol=1e-3, h=1e-3):
    """Finite-difference checks on random small instances, cycling through layer types."""
    rng = np.random.default_rng(seed)
    worst, failures, kinds = 0.0, [], set()
    for i in range(n_instances):
        kind = GRAD_KINDS[i % len(GRAD_KINDS)]
        model, params, batch = _instance(rng, kind)
        masks = None
        if model.has_dropout:
            _, graph = nn.forward(model, params, batch, train=True, rng=rng)
            masks = graph.masks
        rep = nn.finite_diff_check(model, params, batch, h=h, tol=tol, masks=masks, max_coords=40,
                                   seed=int(rng.integers(1 << 30)))
        err = max(rep.max_rel_error.values(), default=0.0)
        worst = max(worst, err)
        kinds.add(kind)
        if not rep.passed:
            failures.append(f"{kind}#{i}")
    detail = f"{n_instances} instances over {len(kinds)} layer types, max rel err {worst:.3e}"
    if failures:
        detail += "; failed " + ",".join(failures)
    return SuiteResult("gradient-check", not failures, n_instances, detail)


# hook identity ------------------------------------------------------------------------

def _tiny_tasks(seed):
    return gen_synthetic_tasks("cluster-split", 2, seed, classes_per_task=2, n_per_class=20, epochs=1,
                               batch_size=8)


def trajectory(method, seed=0, steps=20):
    """Final parameters and record of a 2-task MLP run with about ``steps`` steps on task 2."""
    tasks = _tiny_tasks(seed)
    per_epoch = math.ceil(len(tasks[1].train) / tasks[1].batch_size)
    tasks = [tasks[0], replace(tasks[1], epochs=max(1, math.ceil(steps / per_epoch)))]
    model = build_mlp([2, 8, 8, 0], head_dims=[2, 2], head_names=[t.head for t in tasks])
    rec = run_sequence(tasks, method, RunConfig(model=model, seed=seed), seed)
    return rec.params, rec


def hook_identity_suite(seed=0):
    """r=1 PPAP and zero-strength SI/EWC reproduce plain training bit for bit."""
    ref, ref_rec = trajectory(MethodSpec("none"), seed)
    bad = []
    variants = [MethodSpec("ppap", r=1.0), MethodSpec("si", c=0.0), MethodSpec("ewc", lam=0.0)]
    for m in variants:
        got, rec = trajectory(m, seed)
        same = list(got.names()) == list(ref.names()) and all(
            got[n].tobytes() == ref[n].tobytes() for n in ref.names()
        )
        if not same or rec.rows != ref_rec.rows:
            bad.append(m.label)
    detail = "bit-identical: " + ", ".join(m.label for m in variants if m.label not in bad)
    if bad:
        detail = "diverged: " + ", ".join(bad)
    return SuiteResult("hook-identity", not bad, len(variants), detail)


# profile range ------------------------------------------------------------------------

def _random_profile(rng, degenerate=False):
    shapes = {"a": (int(rng.integers(1, 5)), int(rng.integers(1, 5))), "b": (int(rng.integers(1, 6)),)}
    acc = plateau.ActivityAccumulator.zeros(shapes, k=25.0)
    for _ in range(int(rng.integers(2, 30))):
        if degenerate:
            acts = {n: np.full(s, 0.5) for n, s in shapes.items()}
        else:
            acts = {n: rng.standard_normal(s) * rng.uniform(0.01, 2.0) for n, s in shapes.items()}
        plateau.accumulate(acc, acts)
    return plateau.finalize_profile(acc, "t")


def profile_range_suite(n=50, seed=0):
    rng = np.random.default_rng(seed)
    problems = []
    with tempfile.TemporaryDirectory() as tmp:
        for i in range(n):
            p = _random_profile(rng, degenerate=(i % 10 == 9))
            flat = p.flat()
            if i % 10 == 9:
                if not np.all(flat == 1.0):
                    problems.append(f"#{i} degenerate not all ones")
            elif not (flat.min() == 0.0 and flat.max() == 1.0):
                problems.append(f"#{i} range [{flat.min()}, {flat.max()}]")
            path = Path(tmp) / f"p{i}.ppap"
            plateau.save_profile(p, path)
            if plateau.load_profile(path) != p:
                problems.append(f"#{i} round-trip")
    detail = f"{n} profiles in [0,1], exact extremes, bit-exact save/load"
    return SuiteResult("profile-range", not problems, n, "; ".join(problems[:5]) if problems else detail)


# blend endpoints ------------------------------------------------------------------------

def blend_endpoint_suite(n=50, seed=0):
    rng = np.random.default_rng(seed)
    problems = []
    for i in range(n):
        shape = (int(rng.integers(1, 6)), int(rng.integers(1, 6)))
        prof = plateau.PlateauProfile({"w": rng.uniform(0, 1, shape)})
        u = (rng.standard_normal(shape) * 10.0 ** rng.uniform(-6, 0)).astype(np.float32)
        one = plateau.make_ppap_hook(prof, plateau.BlendConfig(1.0))("w", u)
        zero = plateau.make_ppap_hook(prof, plateau.BlendConfig(0.0))("w", u)
        r = float(rng.uniform(0, 1))
        mid = plateau.make_ppap_hook(prof, plateau.BlendConfig(r))("w", u)
        p = prof["w"].astype(np.float64)
        want = r * u + (1 - r) * u * p
        if one.tobytes() != u.tobytes():
            problems.append(f"#{i} r=1")
        if zero.tobytes() != (u * prof["w"]).tobytes():
            problems.append(f"#{i} r=0")
        if not np.allclose(mid, want, rtol=1e-6, atol=1e-12):
            problems.append(f"#{i} r={r:.3f}")
    detail = f"{n} cases: r=1 identity, r=0 equals u*P, interior matches the blend"
    return SuiteResult("blend-endpoint", not problems, n, "; ".join(problems[:5]) if problems else detail)


# spike reduction ------------------------------------------------------------------------

def reduction_suite():
    """One scripted spike (dL=0.5, k=25) against the hand-computed scaling."""
    acc = plateau.ActivityAccumulator.zeros({"w": (3,)}, k=25.0)
    acts = [np.array([0.1, -0.2, 0.3]), np.array([0.2, 0.1, -0.1]), np.array([-0.3, 0.4, 0.2])]
    for a in acts:
        plateau.accumulate(acc, {"w": a})
    s0, ssd0, n0 = acc.S["w"].copy(), acc.ssd["w"].copy(), acc.n
    fired = plateau.reduce_on_spike(acc, 0.5)
    ok = (
        fired
        and np.array_equal(acc.S["w"], s0 * math.exp(-6.25))
        and np.array_equal(acc.ssd["w"], ssd0 * math.exp(-6.25) ** 2)
        and acc.n == math.ceil(n0 * math.exp(-6.25))
        and not plateau.reduce_on_spike(acc, plateau.spike_threshold(25.0))
    )
    return SuiteResult("spike-reduction", bool(ok), 1, f"S x e^-6.25, SSD x e^-12.5, N {n0} -> {acc.n}")


# flat-direction selectivity ------------------------------------------------------------

def valley_trial(seed, a=0.01, b=1.0, noise=0.05, lr=0.1, momentum=0.9, init=(30.0, 1.0), k=25.0,
                 tol=1e-2, post=2000, max_steps=100_000):
    """Profile of (theta1, theta2) on ``L = a*theta1^2 + b*theta2^2`` under noisy SGD-momentum.

    Training runs until the loss first drops below ``tol`` and then ``post``
    more steps; the profiler sees every step. Returns (profile, convergence step).
    """
    rng = np.random.default_rng(seed)
    h = np.array([a, b])
    theta = np.array(init, np.float64)
    opt = SGD(lr, momentum)
    prof = plateau.PlateauProfiler({"theta": (2,)}, k)
    conv, step = None, 0
    while conv is None or step < conv + post:
        if step >= max_steps:
            raise RuntimeError(f"valley did not converge within {max_steps} steps")
        g = 2.0 * h * theta + noise * rng.standard_normal(2)
        before = float(h @ (theta * theta))
        new = theta + opt.compute_raw_update({"theta": g})["theta"]
        after = float(h @ (new * new))
        prof.observe(after - before, {"theta": new - theta}, {"theta": g})
        theta, step = new, step + 1
        if conv is None and after < tol:
            conv = step
    return prof.finalize("valley"), conv


def valley_suite(n_seeds=20, need=18, **kw):
    """The flat coordinate should score above the steep one in at least ``need`` seeds."""
    wins = 0
    for s in range(n_seeds):
        p, _ = valley_trial(s, **kw)
        wins += int(p["theta"][0] > p["theta"][1])
    return SuiteResult("flat-direction", wins >= need, n_seeds, f"P(flat) > P(steep) in {wins}/{n_seeds} seeds")


SUITES = {
    "welford": welford_suite,
    "gradient-check": gradcheck_suite,
    "hook-identity": hook_identity_suite,
    "profile-range": profile_range_suite,
    "blend-endpoint": blend_endpoint_suite,
    "spike-reduction": reduction_suite,
    "flat-direction": valley_suite,
}


def run_all(names=None):
    out = []
    for name in names or SUITES:
        try:
            out.append(SUITES[name]())
        except Exception as e:  # a crashing suite is a failing suite
            out.append(SuiteResult(name, False, 0, f"error: {type(e).__name__}: {e}"))
    return out


def format_table(results):
    width = max(len(r.name) for r in results)
    lines = [f"{'suite':<{width}}  result  checks  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.checks:>6}  {r.detail}")
    return "\n".join(lines) + "\n"


def format_csv(results):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["suite", "result", "checks", "detail"])
    for r in results:
        w.writerow([r.name, "pass" if r.passed else "fail", r.checks, r.detail])
    return buf.getvalue()
