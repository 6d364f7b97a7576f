import csv

import numpy as np
import pytest

from pcv import data, pointnet, training, verifier
from pcv.data import DatasetConfig, PointCloud
from pcv.errors import UsageError
from pcv.pointnet import ModelConfig
from pcv.verifier import SweepReport, SweepRow, below_threshold, tipping_point


def threshold_model():
    """Two classes split on the largest x coordinate: class 0 iff max x > 0.5."""
    cfg = ModelConfig(num_classes=2, point_mlp_widths=(1,), head_widths=(), num_points=5)
    params = pointnet.init(cfg, seed=0)
    params["mlp.0.weight"].data[...] = [[1.0], [0.0], [0.0]]
    params["mlp.0.bias"].data[...] = 0.0
    params["out.weight"].data[...] = [[1.0, -1.0]]
    params["out.bias"].data[...] = [-0.5, 0.5]
    return params


def toy_clouds():
    xs_a = [0.1, 0.15, 0.2, 0.25, 0.3]  # class 1, 0.2 below the boundary
    xs_b = [0.1, 0.2, 0.25, 0.3, 0.55]  # class 0, 0.05 above the boundary
    mk = lambda xs: np.array([[x, 0.5, 0.5] for x in xs], dtype=np.float32)
    return [PointCloud(mk(xs_a), 1, "a"), PointCloud(mk(xs_b), 0, "b")]


@pytest.fixture(scope="module")
def random_setup():
    cfg = ModelConfig(num_classes=5, point_mlp_widths=(16, 32), head_widths=(16,), num_points=32)
    m = data.build_dataset(DatasetConfig(per_class=6, num_points=32), seed=2)
    return pointnet.init(cfg, seed=3), data.split_clouds(m, "train")


def test_threshold_examples():
    assert below_threshold(0.914, 0.431)
    assert below_threshold(0.8, 0.4)
    assert not below_threshold(0.8, 0.41)
    assert below_threshold(0.3, 0.5, absolute=True)
    assert not below_threshold(0.3, 0.51, absolute=True)


def _report(i_acc, f_accs, eps):
    rows = [SweepRow(e, i_acc, f, 0, below_threshold(i_acc, f)) for e, f in zip(eps, f_accs)]
    return SweepReport(rows)


def test_tipping_point_examples():
    eps = [0.0, 0.1, 0.2, 0.3]
    assert tipping_point(_report(0.9, [0.9, 0.8, 0.6, 0.5], eps)) is None
    assert tipping_point(_report(0.9, [0.9, 0.44, 0.5, 0.3], eps)) == 0.1
    rep = _report(0.914, [0.914, 0.7, 0.431, 0.3], eps)
    assert rep.tipping_set == [0.2, 0.3]
    assert tipping_point(rep) == 0.2


def test_zero_epsilon_keeps_clean_accuracy(random_setup):
    params, clouds = random_setup
    rep = verifier.verify(params, clouds, [0.0], noise=True, noise_seed=9)
    row = rep.rows[0]
    assert row.f_acc == row.i_acc == training.evaluate(params, clouds)[0]
    assert row.adversarial_count == 0 and not rep.adversarial


def test_toy_model_flips_exactly_one_sample():
    params = threshold_model()
    clouds = toy_clouds()
    assert pointnet.predict(params, data.stack(clouds)) == [1, 0]
    rep = verifier.verify(params, clouds, [0.0, 0.1], noise=False)
    clean, attacked = rep.rows
    assert clean.i_acc == 1.0 and clean.f_acc == 1.0
    assert attacked.f_acc == attacked.i_acc - 0.5
    assert len(rep.adversarial) == 1
    hit = rep.adversarial[0]
    assert (hit.sample_id, hit.i_pred, hit.f_pred, hit.epsilon) == ("b", 0, 1, 0.1)
    # only the max-pool winner moved, and by exactly -epsilon in x
    moved = hit.cloud - clouds[1].points
    assert np.count_nonzero(moved) == 1
    assert moved[4, 0] == pytest.approx(-0.1)
    assert attacked.in_tipping_set


def test_adversarial_members_disagree_with_clean_prediction(random_setup):
    params, clouds = random_setup
    rep = verifier.verify(params, clouds, [0.0, 0.1, 0.3], noise_seed=1)
    assert all(o.i_pred != o.f_pred for o in rep.adversarial)
    assert [r.adversarial_count for r in rep.rows] == [
        sum(o.epsilon == r.epsilon for o in rep.adversarial) for r in rep.rows]


def test_sweep_is_reproducible(random_setup):
    params, clouds = random_setup
    a = verifier.verify(params, clouds, [0.1, 0.2], noise_seed=4)
    b = verifier.verify(params, clouds, [0.1, 0.2], noise_seed=4)
    assert a.rows == b.rows
    assert all(x.cloud.tobytes() == y.cloud.tobytes() for x, y in zip(a.adversarial, b.adversarial))


def test_bad_grids():
    params, clouds = threshold_model(), toy_clouds()
    for grid in ([], [0.2, 0.1], [-0.1]):
        with pytest.raises(UsageError):
            verifier.verify(params, clouds, grid)
    with pytest.raises(UsageError):
        verifier.verify(params, [], [0.1])


def test_export_empty_set(tmp_path):
    index = verifier.export_adversarial_set([], tmp_path / "adv")
    rows = list(csv.reader(index.open()))
    assert rows == [verifier.INDEX_HEADER]
    assert verifier.load_adversarial_set(tmp_path / "adv") == []


def test_export_and_reload(tmp_path):
    params = threshold_model()
    rep = verifier.verify(params, toy_clouds(), [0.1, 0.3], noise=False)
    index = verifier.export_adversarial_set(rep.adversarial, tmp_path)
    assert len(list(csv.reader(index.open()))) == 1 + len(rep.adversarial)
    back = verifier.load_adversarial_set(tmp_path)
    assert len(back) == len(rep.adversarial) == 3
    for orig, got in zip(rep.adversarial, back):
        assert got.cloud.tobytes() == orig.cloud.tobytes()
        assert pointnet.predict(params, got.cloud[None]) == [got.f_pred]
        assert got.f_pred != got.i_pred


def test_sweep_csv(tmp_path):
    rep = verifier.verify(threshold_model(), toy_clouds(), [0.0, 0.1], noise=False)
    path = tmp_path / "sweep.csv"
    rep.write_csv(path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == verifier.REPORT_HEADER
    assert rows[2] == ["0.1", "1.0", "0.5", "1", "1"]
