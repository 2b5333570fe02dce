import numpy as np
import pytest

from ppap.baselines import (
    ImportanceMap,
    SITracker,
    add_gradients,
    ewc_fisher,
    merge_importance,
    penalty_gradient,
    si_consolidate,
    si_track,
)
from ppap.data import Batch
from ppap.errors import ConfigError


def one(v):
    return {"w": np.array([v], np.float64)}


# Synaptic Intelligence -----------------------------------------------------------------

def test_si_path_integral():
    omega = one(0.0)
    si_track(omega, one(-2.0), one(0.1))
    assert omega["w"][0] == pytest.approx(0.2)


def test_si_oscillation_cancels():
    omega = one(0.0)
    si_track(omega, one(1.0), one(0.5))
    si_track(omega, one(-1.0), one(0.5))
    assert omega["w"][0] == 0.0


def test_si_consolidate_hand_value():
    imap = si_consolidate(one(0.2), one(0.0), one(0.1), xi=0.01)
    assert imap.omega["w"][0] == pytest.approx(10.0)
    assert imap.anchors["w"][0] == 0.1


def test_si_negative_path_clamped():
    imap = si_consolidate(one(-0.5), one(0.0), one(0.3), xi=0.01)
    assert imap.omega["w"][0] == 0.0


@pytest.mark.parametrize("xi", [0.0, -1e-3])
def test_si_rejects_nonpositive_damping(xi):
    with pytest.raises(ConfigError):
        si_consolidate(one(0.1), one(0.0), one(0.1), xi=xi)


def test_si_tracker_matches_functional():
    params = {"w": np.array([0.0, 1.0], np.float32)}
    tr = SITracker(params, ["w"])
    tr.track({"w": np.array([-1.0, 2.0])}, {"w": np.array([0.1, -0.2])})
    imap = tr.consolidate({"w": np.array([0.1, 0.8], np.float32)}, xi=0.01, strength=0.5)
    np.testing.assert_allclose(imap.omega["w"], [0.1 / (0.01 + 0.01), 0.4 / (0.04 + 0.01)], rtol=1e-6)
    assert imap.strength == 0.5


# EWC ---------------------------------------------------------------------------------

def test_ewc_zero_gradient_gives_zero_fisher(small_mlp):
    model, params = small_mlp
    params = params.copy()
    for n in list(params):
        params[n] = np.zeros_like(params[n])
    # all-zero weights: logits are uniform and every weight gradient except the output bias is zero
    sample = Batch(np.zeros((4, 4), np.float32), np.zeros(4, int))
    imap = ewc_fisher(model, params, sample)
    for n, f in imap.omega.items():
        if n.endswith("weight"):
            assert np.all(f == 0.0), n
        assert np.all(f >= 0.0)


def test_ewc_duplicating_sample_is_invariant(small_mlp, rng):
    model, params = small_mlp
    x = rng.standard_normal((5, 4)).astype(np.float32)
    y = np.array([0, 1, 2, 1, 0])
    a = ewc_fisher(model, params, Batch(x, y))
    b = ewc_fisher(model, params, Batch(np.concatenate([x, x]), np.concatenate([y, y])))
    for n in a.omega:
        np.testing.assert_allclose(a.omega[n], b.omega[n], rtol=1e-12)


def test_ewc_empty_sample(small_mlp):
    model, params = small_mlp
    with pytest.raises(ConfigError):
        ewc_fisher(model, params, Batch(np.zeros((0, 4), np.float32), np.zeros(0, int)))


# penalty -----------------------------------------------------------------------------

def test_si_penalty_gradient_hand_value():
    imap = ImportanceMap("si", one(10.0), one(0.0), strength=0.05)
    g = penalty_gradient(imap, {"w": np.array([0.1], np.float32)})
    assert g["w"][0] == pytest.approx(0.1, rel=1e-6)


def test_ewc_penalty_gradient():
    imap = ImportanceMap("ewc", one(2.0), one(1.0), strength=3.0)
    g = penalty_gradient(imap, {"w": np.array([1.5], np.float32)})
    assert g["w"][0] == pytest.approx(3.0)


def test_penalty_zero_at_anchor():
    imap = ImportanceMap("si", one(7.0), one(0.25), strength=1.0)
    assert penalty_gradient(imap, {"w": np.array([0.25], np.float32)})["w"][0] == 0.0


def test_importance_map_validation():
    with pytest.raises(ConfigError):
        ImportanceMap("si", one(-1.0), one(0.0), 1.0)
    with pytest.raises(ConfigError):
        ImportanceMap("si", one(1.0), {}, 1.0)
    with pytest.raises(ConfigError):
        ImportanceMap("l2", one(1.0), one(0.0), 1.0)


def test_merge_sums_and_takes_latest_anchor():
    a = ImportanceMap("si", {"w": np.array([1.0]), "h1": np.array([2.0])}, {"w": np.array([0.0]), "h1": np.array([5.0])}, 1.0)
    b = ImportanceMap("si", one(3.0), one(9.0), 1.0)
    m = merge_importance(a, b)
    assert m.omega["w"][0] == 4.0 and m.anchors["w"][0] == 9.0
    assert m.omega["h1"][0] == 2.0 and m.anchors["h1"][0] == 5.0
    assert merge_importance(None, b) is b


def test_add_gradients_only_shared_names():
    g = add_gradients({"w": np.array([1.0]), "b": np.array([2.0])}, {"w": np.array([0.5]), "x": np.array([9.0])})
    assert g["w"][0] == 1.5 and g["b"][0] == 2.0 and "x" not in g
