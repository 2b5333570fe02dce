import numpy as np
import pytest

from ppap.data import (
    CIFAR100_STATS,
    Batch,
    LabeledSet,
    SplitPlan,
    augment,
    cifar_sequence_tasks,
    denormalize,
    dump_dataset,
    gen_synthetic_loco,
    gen_synthetic_tasks,
    hflip,
    load_cifar,
    make_loco_tasks,
    make_task_splits,
    normalize,
    parse_cifar,
    parse_dataset,
    save_dataset,
    load_dataset,
    shift_crop,
)
from ppap.errors import ConfigError, FormatError


def cifar_bytes(rng, n, variant):
    n_label = 1 if variant == "cifar10" else 2
    rec = np.zeros((n, n_label + 3072), np.uint8)
    if variant == "cifar10":
        rec[:, 0] = rng.integers(0, 10, n)
    else:
        rec[:, 0] = rng.integers(0, 20, n)
        rec[:, 1] = rng.integers(0, 100, n)
    rec[:, n_label:] = rng.integers(0, 256, (n, 3072))
    return rec.tobytes()


# CIFAR ------------------------------------------------------------------------------

def test_parse_cifar100_records(rng):
    buf = cifar_bytes(rng, 7, "cifar100")
    assert len(buf) == 7 * 3074
    px, fine, coarse = parse_cifar(buf, "cifar100")
    assert px.shape == (7, 3, 32, 32) and fine.max() < 100 and coarse.max() < 20
    assert coarse[0] == buf[0] and fine[0] == buf[1]


def test_parse_cifar10_records(rng):
    buf = cifar_bytes(rng, 3, "cifar10")
    px, labels, coarse = parse_cifar(buf, "cifar10")
    assert len(buf) == 3 * 3073 and px.shape == (3, 3, 32, 32) and coarse is None
    assert px[1, 0, 0, 0] == buf[3073 + 1]


def test_truncated_cifar_reports_offset(rng):
    buf = cifar_bytes(rng, 3, "cifar100")[:-10]
    with pytest.raises(FormatError) as e:
        parse_cifar(buf, "cifar100")
    assert e.value.offset == 2 * 3074


def test_empty_and_unknown_variant():
    with pytest.raises(FormatError):
        parse_cifar(b"", "cifar10")
    with pytest.raises(ConfigError):
        parse_cifar(b"\0" * 3073, "svhn")


def test_white_pixel_normalisation(tmp_path):
    rec = np.full(3074, 255, np.uint8)
    rec[:2] = (3, 14)
    (tmp_path / "train.bin").write_bytes(rec.tobytes())
    ds = load_cifar(tmp_path / "train.bin", "cifar100")
    assert ds.inputs[0, 0, 0, 0] == pytest.approx((1.0 - 0.5071) / 0.2675, abs=1e-5)
    assert ds.inputs[0, 0, 0, 0] == pytest.approx(1.8426, abs=1e-4)
    assert ds.coarse[0] == 3 and ds.labels[0] == 14


def test_missing_cifar_directory(tmp_path):
    with pytest.raises(ConfigError):
        load_cifar(tmp_path, "cifar10")


def test_normalisation_invertible(rng):
    x = rng.uniform(0, 1, (4, 3, 5, 5)).astype(np.float32)
    np.testing.assert_allclose(denormalize(normalize(x, CIFAR100_STATS), CIFAR100_STATS), x, atol=1e-6)


def test_cifar_sequence_shape(rng):
    c10 = LabeledSet(rng.standard_normal((200, 3, 4, 4)).astype(np.float32), np.repeat(np.arange(10), 20))
    c100 = LabeledSet(rng.standard_normal((1000, 3, 4, 4)).astype(np.float32), np.repeat(np.arange(100), 10))
    tasks = cifar_sequence_tasks(c10, c100)
    assert [t.task_id for t in tasks] == [f"task{i}" for i in range(1, 7)]
    assert all(t.n_classes == 10 for t in tasks)
    assert set(tasks[3].train.labels) == set(range(10))


# splits -----------------------------------------------------------------------------

def test_split_80_20_exact():
    tr, va = make_task_splits(np.repeat(np.arange(5), 20), SplitPlan((0.8, 0.2), seed=3))
    assert (len(tr), len(va)) == (80, 20)
    assert not set(tr) & set(va)


def test_split_80_16_4():
    parts = make_task_splits(np.repeat(np.arange(10), 100), SplitPlan((0.8, 0.16, 0.04)))
    assert [len(p) for p in parts] == [800, 160, 40]


def test_split_deterministic_and_seed_sensitive():
    y = np.repeat(np.arange(4), 25)
    a = make_task_splits(y, SplitPlan(seed=1))
    b = make_task_splits(y, SplitPlan(seed=1))
    c = make_task_splits(y, SplitPlan(seed=2))
    assert all(np.array_equal(u, v) for u, v in zip(a, b))
    assert not np.array_equal(a[0], c[0])


def test_split_stratified_within_one(rng):
    y = rng.integers(0, 7, 503)
    parts = make_task_splits(y, SplitPlan((0.8, 0.16, 0.04), seed=5))
    for part, frac in zip(parts, (0.8, 0.16, 0.04)):
        for c in range(7):
            expect = frac * np.sum(y == c)
            assert abs(np.sum(y[part] == c) - expect) <= 1 + 1e-9


def test_split_errors():
    with pytest.raises(ConfigError):
        SplitPlan((0.5, 0.4))
    with pytest.raises(ConfigError):
        make_task_splits(np.array([0, 0, 0, 1]), SplitPlan((0.5, 0.3, 0.2)))


# LOCO -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def loco_data():
    return gen_synthetic_loco(seed=0, n_per_fine=20)


def test_loco_label_spaces(loco_data):
    pre, fin = make_loco_tasks(loco_data, 0)
    assert pre.n_classes == 19 and fin.n_classes == 5
    assert set(pre.train.labels) == set(range(19)) and set(fin.train.labels) == set(range(5))


def test_loco_disjoint_by_superclass(loco_data):
    for h in (0, 7, 19):
        pre, fin = make_loco_tasks(loco_data, h)
        pre_rows = {x.tobytes() for x in pre.train.inputs} | {x.tobytes() for x in pre.val.inputs}
        fin_rows = {x.tobytes() for x in fin.train.inputs} | {x.tobytes() for x in fin.val.inputs}
        assert not pre_rows & fin_rows


def test_loco_twenty_distinct_pairs(loco_data):
    firsts = {make_loco_tasks(loco_data, h)[1].train.inputs[0].tobytes() for h in range(20)}
    assert len(firsts) == 20


@pytest.mark.parametrize("h", [-1, 20])
def test_loco_index_out_of_range(loco_data, h):
    with pytest.raises(ConfigError):
        make_loco_tasks(loco_data, h)


# synthetic -------------------------------------------------------------------------

def test_cluster_split_deterministic():
    a = gen_synthetic_tasks("cluster-split", 2, seed=4)
    b = gen_synthetic_tasks("cluster-split", 2, seed=4)
    assert a[1].train.inputs.tobytes() == b[1].train.inputs.tobytes()
    assert [t.task_id for t in a] == ["task1", "task2"]


def test_cluster_split_tasks_differ():
    a, b = gen_synthetic_tasks("cluster-split", 2, seed=0)
    assert abs(a.train.inputs.mean(0) - b.train.inputs.mean(0)).max() > 0.1


def test_moons_zero_rotation_same_distribution():
    a, b = gen_synthetic_tasks("moons-rotation", 2, seed=0, rotation_deg=0.0, n_per_class=2000)
    np.testing.assert_allclose(a.train.inputs.mean(0), b.train.inputs.mean(0), atol=0.05)
    np.testing.assert_allclose(a.train.inputs.std(0), b.train.inputs.std(0), atol=0.05)


def test_synthetic_errors():
    with pytest.raises(ConfigError):
        gen_synthetic_tasks("cluster-split", 0)
    with pytest.raises(ConfigError):
        gen_synthetic_tasks("spirals", 1)


# augmentation ----------------------------------------------------------------------

def test_hflip_involution(rng):
    x = rng.standard_normal((4, 3, 6, 6)).astype(np.float32)
    m = np.array([True, False, True, True])
    np.testing.assert_array_equal(hflip(hflip(x, m), m), x)
    np.testing.assert_array_equal(hflip(x, m)[1], x[1])


def test_zero_shift_crop_identity(rng):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(shift_crop(x, [(0, 0), (0, 0)]), x)
    moved = shift_crop(x, [(1, 0), (0, -2)])
    np.testing.assert_array_equal(moved[0, :, :-1], x[0, :, 1:])
    assert np.all(moved[0, :, -1] == 0)


def test_augment_seeded_and_copy(rng):
    b = Batch(rng.standard_normal((5, 3, 8, 8)).astype(np.float32), np.arange(5))
    orig = b.inputs.copy()
    a1 = augment(b, rng=np.random.default_rng(9))
    a2 = augment(b, rng=np.random.default_rng(9))
    np.testing.assert_array_equal(a1.inputs, a2.inputs)
    np.testing.assert_array_equal(b.inputs, orig)
    with pytest.raises(ConfigError):
        augment(Batch(np.zeros((2, 3), np.float32), [0, 1]))


# dataset cache ---------------------------------------------------------------------

def test_dataset_round_trip(tmp_path, loco_data):
    save_dataset(loco_data, tmp_path / "d.ppds")
    back = load_dataset(tmp_path / "d.ppds")
    assert back.inputs.tobytes() == loco_data.inputs.tobytes()
    np.testing.assert_array_equal(back.coarse, loco_data.coarse)
    assert (tmp_path / "d.ppds").read_bytes()[:4] == b"PPDS"


def test_dataset_corruption(loco_data):
    blob = bytearray(dump_dataset(loco_data))
    with pytest.raises(FormatError):
        parse_dataset(bytes(blob[:-20]))
    blob[40] ^= 1
    with pytest.raises(FormatError):
        parse_dataset(bytes(blob))
