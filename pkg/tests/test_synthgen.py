import json

import numpy as np
import pytest

from cafo.synthgen import (
    CholeskyError,
    DatasetError,
    MtsDataset,
    SquidGameConfig,
    gen_pseudo_signal,
    gen_squidgame,
    inject_pseudo,
    pseudo_columns,
    read_csv_dataset,
    read_dataset,
    read_ground_truth,
    shape_mask,
    squidgame_ground_truth,
    write_dataset,
)


@pytest.fixture(scope="module")
def small():
    return gen_squidgame(SquidGameConfig(n_per_class=40))


def test_size_and_balance():
    cfg = SquidGameConfig(n_per_class=18000)
    assert 3 * cfg.n_per_class == 54000
    ds, _ = gen_squidgame(SquidGameConfig(n_per_class=5))
    assert ds.X.shape == (15, 32, 30)
    np.testing.assert_array_equal(np.bincount(ds.labels), [5, 5, 5])


def test_default_seed_is_42():
    assert SquidGameConfig().seed == 42


def test_class0_other_groups_are_noise(small):
    ds, _ = small
    cfg = SquidGameConfig()
    x = ds.X[ds.labels == 0][0][:, 10:]
    assert abs(x.mean()) <= 4 * cfg.noise_sigma / np.sqrt(640)


def test_noise_groups_look_gaussian(small):
    ds, _ = small
    sigma = SquidGameConfig().noise_sigma
    for c in range(3):
        other = [g for g in range(3) if g != c]
        cells = np.concatenate([ds.X[ds.labels == c][:, :, g * 10 : (g + 1) * 10].ravel() for g in other])
        assert abs(cells.mean()) < 4 * sigma / np.sqrt(cells.size)
        assert abs(cells.std() / sigma - 1) < 0.05


def test_every_instance_has_a_signal_in_its_group(small):
    ds, _ = small
    for x, c in zip(ds.X, ds.labels):
        block = x[:, c * 10 : (c + 1) * 10]
        # a filled cell is a sinusoid value shared across the row's masked cells;
        # a row with two equal non-noise values cannot come from continuous noise
        shared = any(len(np.unique(np.round(row, 12))) < row.size for row in block)
        assert shared, "no mask cells found"


def test_same_seed_is_bit_identical():
    a, _ = gen_squidgame(SquidGameConfig(n_per_class=3))
    b, _ = gen_squidgame(SquidGameConfig(n_per_class=3))
    assert a.X.tobytes() == b.X.tobytes()
    c, _ = gen_squidgame(SquidGameConfig(n_per_class=3, seed=7))
    assert a.X.tobytes() != c.X.tobytes()


def test_instances_do_not_depend_on_dataset_size():
    a, _ = gen_squidgame(SquidGameConfig(n_per_class=3))
    b, _ = gen_squidgame(SquidGameConfig(n_per_class=4))
    # index 0 is class 0 in both
    np.testing.assert_array_equal(a.X[0], b.X[0])


def test_splits_are_stratified(small):
    ds, _ = small
    test = ds.split == "test"
    assert np.all(ds.folds[test] == -1)
    assert set(np.unique(ds.folds[~test])) == set(range(5))
    np.testing.assert_array_equal(np.bincount(ds.labels[test]), [8, 8, 8])


def test_ground_truth_variants():
    gt = squidgame_ground_truth()
    assert gt.variant_a.shape == (3, 30)
    for c in range(3):
        assert gt.variant_a[c, c * 10 : (c + 1) * 10].all()
        assert gt.variant_a[c].sum() == 10
    np.testing.assert_array_equal(gt.variant_b, ~gt.variant_a)


@pytest.mark.parametrize("shape", ["circle", "triangle", "square"])
def test_masks_are_non_empty_and_inside(shape):
    m = shape_mask(shape, 32, 10, (10.0, 4.5), 2.0)
    assert m.any() and m.shape == (32, 10)


def test_shapes_differ():
    masks = [shape_mask(s, 32, 10, (15.0, 4.5), 4.0) for s in ("circle", "triangle", "square")]
    assert len({m.tobytes() for m in masks}) == 3


def test_bad_config_rejected():
    with pytest.raises(ValueError):
        SquidGameConfig(n_per_class=0)
    with pytest.raises(ValueError):
        SquidGameConfig(d=31)


def test_whitenoise_std():
    x = gen_pseudo_signal("wn", 10000, seed=0)
    assert 0.29 <= x.std() <= 0.31


def test_sinusoid_period_four():
    x = gen_pseudo_signal("sin", 8, seed=0)
    assert np.all(np.abs(x) <= 1)
    np.testing.assert_allclose(x[4:], x[:4], atol=1e-12)
    np.testing.assert_array_equal(x, gen_pseudo_signal("sin", 8, seed=0))


def test_gp_unit_variance():
    rng = np.random.default_rng(0)
    draws = np.array([gen_pseudo_signal("gp", 16, rng) for _ in range(4000)])
    assert abs(draws.var(axis=0).mean() - 1.0) < 0.05


def test_gp_cholesky_failure_is_reported(monkeypatch):
    import cafo.synthgen as S

    S._gp_factor.cache_clear()

    def fail(*a, **k):
        raise np.linalg.LinAlgError("not PD")

    monkeypatch.setattr(S.np.linalg, "cholesky", fail)
    with pytest.raises(CholeskyError):
        gen_pseudo_signal("gp", 9, seed=0, length_scale=1.5)
    S._gp_factor.cache_clear()


def test_unknown_kind():
    with pytest.raises(ValueError):
        gen_pseudo_signal("pink", 8)


def _toy(d=14, n=300):
    rng = np.random.default_rng(0)
    labels = np.arange(n) % 2
    return MtsDataset(X=rng.normal(size=(n, 16, d)), labels=labels, feature_names=[f"f{j}" for j in range(d)], folds=np.arange(n) % 5, split=np.array(["train"] * n))


def test_inject_three_kinds():
    aug = inject_pseudo(_toy(), ["wn", "sin", "gp"])
    assert aug.d == 17
    assert pseudo_columns(aug) == [14, 15, 16]
    assert aug.feature_names[14:] == ["pseudo_wn", "pseudo_sin", "pseudo_gp"]


def test_inject_nothing_is_identity():
    ds = _toy()
    assert inject_pseudo(ds, []) is ds


def test_pseudo_independent_of_labels():
    aug = inject_pseudo(_toy(n=2000), ["wn", "sin", "gp"])
    y = aug.labels.astype(float)
    for j in pseudo_columns(aug):
        m = aug.X[:, :, j].mean(axis=1)
        r = np.corrcoef(m, y)[0, 1]
        assert abs(r) < 4 / np.sqrt(aug.n)


def test_write_read_round_trip(tmp_path, small):
    ds, gt = small
    write_dataset(ds, tmp_path / "sg", gt)
    back = read_dataset(tmp_path / "sg")
    np.testing.assert_array_equal(back.X, ds.X.astype(np.float32).astype(np.float64))
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.folds, ds.folds)
    np.testing.assert_array_equal(back.split, ds.split)
    assert back.feature_names == ds.feature_names
    g = read_ground_truth(tmp_path / "sg")
    np.testing.assert_array_equal(g.variant_a, gt.variant_a)


def test_manifest_size_mismatch(tmp_path, small):
    ds, _ = small
    write_dataset(ds, tmp_path / "sg")
    m = json.loads((tmp_path / "sg" / "manifest.json").read_text())
    m["n"] += 1
    (tmp_path / "sg" / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(DatasetError):
        read_dataset(tmp_path / "sg")


def test_csv_missing_column_named(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("instance_id,t,label,f0,f2\n0,0,0,1.0,2.0\n")
    with pytest.raises(DatasetError, match="f1"):
        read_csv_dataset(p)


def test_csv_round_trip(tmp_path):
    rows = ["instance_id,t,label,f0,f1"]
    X = np.arange(2 * 3 * 2, dtype=float).reshape(2, 3, 2)
    for i in range(2):
        for t in range(3):
            rows.append(f"{i},{t},{i},{X[i, t, 0]},{X[i, t, 1]}")
    p = tmp_path / "d.csv"
    p.write_text("\n".join(rows) + "\n")
    ds = read_dataset(p)
    np.testing.assert_array_equal(ds.X, X)
    np.testing.assert_array_equal(ds.labels, [0, 1])


def test_missing_path_named(tmp_path):
    with pytest.raises(FileNotFoundError, match="nowhere"):
        read_dataset(tmp_path / "nowhere")
