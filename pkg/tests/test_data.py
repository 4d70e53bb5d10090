import hashlib
import struct

import numpy as np
import pytest

from sdcil.data import (
    DatasetFormatError,
    SynthSpec,
    TaskStream,
    Task,
    generate_samples,
    generate_synthetic_stream,
    load_dataset,
    save_dataset,
    split_tasks,
)


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(separation=0.0)
    with pytest.raises(ValueError):
        SynthSpec(spread=-1.0)


def test_indivisible_class_count():
    with pytest.raises(ValueError):
        generate_synthetic_stream(SynthSpec(classes=20), 3)
    x, y = generate_samples(SynthSpec(classes=6, per_class=5))
    with pytest.raises(ValueError):
        split_tasks(x, y, 4, seed=0)


def test_default_stream_shape_and_invariants():
    stream = generate_synthetic_stream(SynthSpec(), 10)
    assert stream.T == 10
    sets = stream.class_sets()
    assert all(len(s) == 2 for s in sets)
    union = set().union(*map(set, sets))
    assert union == set(range(20)) and sum(map(len, sets)) == 20
    for task in stream.tasks:
        assert task.x_train.shape[1] == 32
        for c in task.classes:
            assert np.sum(task.y_train == c) == 40 and np.sum(task.y_test == c) == 10
        rows_tr = {r.tobytes() for r in task.x_train}
        assert not any(r.tobytes() in rows_tr for r in task.x_test)


def test_single_task_holds_everything():
    x, y = generate_samples(SynthSpec(classes=4, per_class=10))
    stream = split_tasks(x, y, 1, seed=3)
    assert sorted(stream.tasks[0].classes) == [0, 1, 2, 3]


def test_seed_changes_order_not_multiset():
    x, y = generate_samples(SynthSpec())
    a = split_tasks(x, y, 10, seed=0).class_sets()
    b = split_tasks(x, y, 10, seed=1).class_sets()
    assert a != b
    assert sorted(sum(a, [])) == sorted(sum(b, []))


def test_same_seed_identical_bytes():
    a = generate_synthetic_stream(SynthSpec(seed=4), 5)
    b = generate_synthetic_stream(SynthSpec(seed=4), 5)
    for ta, tb in zip(a.tasks, b.tasks):
        assert ta.x_train.tobytes() == tb.x_train.tobytes()
        assert ta.y_test.tobytes() == tb.y_test.tobytes()


def test_validate_rejects_overlap():
    t = Task([0, 1], np.zeros((4, 2)), np.array([0, 0, 1, 1]), np.zeros((2, 2)), np.array([0, 1]))
    with pytest.raises(ValueError):
        TaskStream([t, t]).validate()


def _nearest_mean_accuracy(x_tr, y_tr, x_te, y_te):
    classes = np.unique(y_tr)
    means = np.stack([x_tr[y_tr == c].mean(axis=0) for c in classes])
    pred = classes[np.argmin(((x_te[:, None] - means[None]) ** 2).sum(-1), axis=1)]
    return np.mean(pred == y_te)


def test_point_classes_perfectly_separable():
    stream = generate_synthetic_stream(SynthSpec(spread=1e-9, separation=1.0), 1)
    t = stream.tasks[0]
    assert _nearest_mean_accuracy(t.x_train, t.y_train, t.x_test, t.y_test) == 1.0


def test_ratio_six_near_bayes():
    accs = []
    for seed in range(3):
        t = generate_synthetic_stream(SynthSpec(separation=6.0, spread=1.0, seed=seed), 1).tasks[0]
        accs.append(_nearest_mean_accuracy(t.x_train, t.y_train, t.x_test, t.y_test))
    assert np.mean(accs) > 0.99


def test_dataset_round_trip_and_layout(tmp_path):
    x, y = generate_samples(SynthSpec(classes=3, per_class=4, input_dim=5))
    path = tmp_path / "d.sdcd"
    save_dataset(path, x, y)
    raw = path.read_bytes()
    assert raw[:4] == b"SDCD"
    assert struct.unpack_from("<HQII", raw, 4) == (1, 12, 5, 3)
    assert len(raw) == 4 + 2 + 8 + 4 + 4 + 12 * (4 + 40)
    x2, y2 = load_dataset(path)
    assert x2.tobytes() == x.tobytes() and np.array_equal(y2, y)


def test_empty_payload(tmp_path):
    path = tmp_path / "e.sdcd"
    save_dataset(path, np.zeros((0, 3)), np.zeros(0, dtype=int))
    x, y = load_dataset(path)
    assert x.shape == (0, 3) and y.shape == (0,)


def test_hundred_sample_checksum(tmp_path):
    # exactly representable features, so the file bytes are platform independent
    x = (np.arange(100 * 4, dtype=np.float64).reshape(100, 4) - 150.0) / 8.0
    y = np.arange(100) % 7
    path = tmp_path / "h.sdcd"
    save_dataset(path, x, y)
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    assert digest == hashlib.sha256(
        struct.pack("<4sHQII", b"SDCD", 1, 100, 4, 7)
        + b"".join(struct.pack("<I", int(y[i])) + struct.pack("<4d", *x[i]) for i in range(100))
    ).hexdigest()
    x2, _ = load_dataset(path)
    assert x2.sum() == x.sum() == (np.arange(400).sum() - 150 * 400) / 8.0
    np.testing.assert_array_equal(x2.sum(axis=0), x.sum(axis=0))


@pytest.mark.parametrize("mutate,offset", [
    (lambda b: b"XXXX" + b[4:], "offset 0"),
    (lambda b: b[:10], "offset 10"),
    (lambda b: b[:-3], "offset"),
    (lambda b: b[:4] + struct.pack("<H", 9) + b[6:], "offset 4"),
])
def test_format_errors_name_offset(tmp_path, mutate, offset):
    x, y = generate_samples(SynthSpec(classes=2, per_class=3, input_dim=2))
    path = tmp_path / "bad.sdcd"
    save_dataset(path, x, y)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(DatasetFormatError, match=offset):
        load_dataset(path)
