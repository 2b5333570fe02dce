import numpy as np
import pytest

from ppap.errors import ConfigError, ContractError
from ppap.nn import ParamStore
from ppap.optim import SGD, Adam, apply_update, make_optimizer
from ppap.plateau import BlendConfig, PlateauProfile, make_ppap_hook


def store(**kw):
    return ParamStore({k: np.asarray(v, np.float32) for k, v in kw.items()})


def test_plain_sgd_step():
    u = SGD(lr=0.1, momentum=0.0).compute_raw_update({"w": np.array([2.0])})
    assert u["w"][0] == pytest.approx(-0.2)


def test_sgd_momentum_accumulates():
    opt = SGD(lr=0.1, momentum=0.9)
    opt.compute_raw_update({"w": np.array([1.0])})
    u = opt.compute_raw_update({"w": np.array([1.0])})
    assert u["w"][0] == pytest.approx(-0.1 * 1.9)


def test_adam_first_step_is_lr():
    u = Adam(lr=1e-3).compute_raw_update({"w": np.array([1.0])})
    assert u["w"][0] == pytest.approx(-1e-3, rel=1e-6)


@pytest.mark.parametrize("g", [1e-6, 0.3, -7.0, 1e4])
def test_adam_first_step_bounded(g):
    u = Adam(lr=1e-3).compute_raw_update({"w": np.array([g])})
    assert abs(u["w"][0]) <= 1e-3 * (1 + 1e-6)


def test_zero_gradient_zero_update():
    for opt in (SGD(0.1, 0.9), Adam()):
        assert opt.compute_raw_update({"w": np.zeros(3)})["w"].tolist() == [0.0, 0.0, 0.0]


def test_missing_gradient_names_parameter():
    with pytest.raises(ConfigError) as err:
        Adam().compute_raw_update({"a": np.zeros(2)}, names=["a", "b"])
    assert err.value.path == "b"


def test_identity_hook_bit_identical(rng):
    p1 = store(w=rng.standard_normal((3, 4)))
    p2 = p1.copy()
    o1, o2 = Adam(), Adam()
    for _ in range(10):
        g = {"w": rng.standard_normal((3, 4)).astype(np.float32)}
        apply_update(p1, o1.compute_raw_update(g))
        apply_update(p2, o2.compute_raw_update(g), hook=lambda n, u, g: u, grads=g)
    assert p1["w"].tobytes() == p2["w"].tobytes()


def test_zero_hook_freezes():
    p = store(w=[1.0, 2.0])
    apply_update(p, {"w": np.array([0.5, 0.5], np.float32)}, hook=lambda n, u, g: u * 0)
    assert p["w"].tolist() == [1.0, 2.0]


def test_shape_changing_hook_is_contract_error():
    p = store(w=[1.0, 2.0])
    with pytest.raises(ContractError):
        apply_update(p, {"w": np.ones(2, np.float32)}, hook=lambda n, u, g: u[:1])


def test_ppap_blend_hook_arithmetic():
    p = store(w=[0.0])
    hook = make_ppap_hook(PlateauProfile({"w": [0.5]}), BlendConfig(r=0.5))
    apply_update(p, {"w": np.array([0.1], np.float32)}, hook)
    assert p["w"][0] == pytest.approx(0.075, rel=1e-6)


def test_apply_then_negate_restores():
    p = store(w=[0.5, -1.25, 3.0])
    u = {"w": np.array([0.25, 0.5, -1.0], np.float32)}
    apply_update(p, u)
    apply_update(p, {"w": -u["w"]})
    assert p["w"].tolist() == [0.5, -1.25, 3.0]


def test_step_counter_increases():
    opt = Adam()
    for i in range(3):
        opt.compute_raw_update({"w": np.ones(1)})
        assert opt.step_count == i + 1


def test_adam_state_matches_shapes():
    opt = Adam()
    opt.compute_raw_update({"a": np.ones((2, 3)), "b": np.ones(4)})
    assert opt.m["a"].shape == (2, 3) and opt.v["b"].shape == (4,)


def test_bad_hyperparameters():
    with pytest.raises(ConfigError):
        SGD(lr=-1)
    with pytest.raises(ConfigError):
        Adam(beta1=1.0)
    with pytest.raises(ConfigError):
        make_optimizer("rmsprop")
