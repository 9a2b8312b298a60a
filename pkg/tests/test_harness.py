import numpy as np
import pytest

from splicefx import harness as H
from splicefx import model as mdl
from splicefx.cli import write_history_csv, write_roc_csv
from splicefx.splicegen import gen_dataset


def _toy(n, rng, spatial=False):
    feats = rng.standard_normal((n, 16, 128)).astype(np.float32)
    labels = np.repeat([0, 1], n // 2)
    data = H.Dataset(feats, labels, [f"x{i}.jpg" for i in range(n)])
    if spatial:
        data.spatial = rng.standard_normal((n, 3, 64, 64)).astype(np.float32)
    return data


class TestSplit:
    def test_sizes(self):
        sp = H.split(np.repeat([0, 1], 50), seed=3)
        assert len(sp.test) == 10
        assert sorted(np.repeat([0, 1], 50)[sp.test]) == [0] * 5 + [1] * 5

    def test_deterministic(self):
        labels = np.repeat([0, 1], 60)
        a, b = H.split(labels, 11), H.split(labels, 11)
        np.testing.assert_array_equal(a.test, b.test)
        for fa, fb in zip(a.folds, b.folds):
            np.testing.assert_array_equal(fa, fb)
        assert not np.array_equal(H.split(labels, 12).test, a.test)

    def test_partition(self):
        labels = np.r_[np.zeros(83, int), np.ones(77, int)]
        sp = H.split(labels, 5)
        everything = np.concatenate([sp.test] + sp.folds)
        assert sorted(everything.tolist()) == list(range(160))
        ratio = labels.mean()
        for k in range(5):
            tr, va = sp.fold_split(k)
            assert not set(tr) & set(va) and not set(tr) & set(sp.test)
            assert abs(labels[va].mean() - ratio) <= 0.05
            np.testing.assert_array_equal(np.sort(np.r_[tr, va]), sp.pool())

    def test_too_small(self):
        with pytest.raises(H.TooSmall):
            H.split(np.repeat([0, 1], 8), 0)


class TestAugment:
    def test_disabled_identity(self, rng):
        img = rng.standard_normal((3, 16, 16)).astype(np.float32)
        assert H.augment(img, rng, enabled=False) is img

    def test_zero_rotation_identity(self, rng):
        img = rng.standard_normal((3, 16, 16)).astype(np.float32)
        np.testing.assert_array_equal(H.augment_with(img), img)

    def test_double_flip(self, rng):
        img = rng.standard_normal((3, 10, 12)).astype(np.float32)
        once = H.augment_with(img, hflip=True)
        np.testing.assert_array_equal(once, img[:, :, ::-1])
        np.testing.assert_array_equal(H.augment_with(once, hflip=True), img)
        np.testing.assert_array_equal(H.augment_with(img, vflip=True), img[:, ::-1])

    def test_rotation_90(self):
        img = np.zeros((1, 9, 9), np.float32)
        img[0, 4, 8] = 1  # right of centre
        out = H.augment_with(img, angle=90)
        assert out.shape == img.shape
        # a quarter turn moves it onto the vertical axis through the centre
        r, c = np.unravel_index(np.argmax(out[0]), (9, 9))
        assert c == 4 and r in (0, 8)

    def test_features_untouched(self, rng):
        data = _toy(40, rng, spatial=True)
        before = data.features.copy()
        cfg = H.TrainConfig(epochs=1, batch_size=8, spatial="tiny", folds=2)
        H.train_fold(cfg, data, np.arange(32), np.arange(32, 40))
        np.testing.assert_array_equal(data.features, before)


def test_table_rows():
    cfg = H.TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.initial_lr, cfg.lr_decay_factor,
            cfg.lr_step_epochs) == H.PRESETS["resnet-cnn"]
    inn = H.TrainConfig.from_preset("resnet-inn", branch="inn")
    assert inn.initial_lr == 0.01 and inn.lr_decay_factor == 0.9
    scaled = H.TrainConfig.from_preset("resnet-cnn", batch_size=16)
    assert scaled.batch_size == 16 and scaled.lr_step_epochs == 2


@pytest.mark.parametrize("kw", [{"epochs": 0}, {"folds": 1}, {"batch_size": 1}])
def test_bad_config(kw):
    with pytest.raises(ValueError):
        H.TrainConfig(**kw)


def test_overfit_small_set(rng):
    data = _toy(64, rng)
    cfg = H.TrainConfig(epochs=200, batch_size=16, initial_lr=0.003, lr_decay_factor=1.0,
                        lr_step_epochs=1, augment=False)
    idx = np.arange(64)
    fr = H.train_fold(cfg, data, idx, idx)
    assert fr.best_val_acc == 1.0
    assert H.evaluate(fr.model, data).acc == 1.0


def test_history_and_lr(rng):
    data = _toy(40, rng)
    cfg = H.TrainConfig(epochs=5, batch_size=8, initial_lr=0.001, lr_decay_factor=0.5,
                        lr_step_epochs=2)
    fr = H.train_fold(cfg, data, np.arange(30), np.arange(30, 40))
    assert [h["epoch"] for h in fr.history] == list(range(5))
    assert [h["lr"] for h in fr.history] == pytest.approx([1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4])
    assert fr.best_val_acc == max(h["val_acc"] for h in fr.history)
    assert fr.history[fr.best_epoch]["val_acc"] == fr.best_val_acc


def test_best_checkpoint_restored(rng):
    data = _toy(40, rng)
    cfg = H.TrainConfig(epochs=6, batch_size=8)
    val = np.arange(30, 40)
    fr = H.train_fold(cfg, data, np.arange(30), val)
    p = H.predict_proba(fr.model, data, val)
    assert np.mean((p > 0.5) == (data.labels[val] == 1)) == fr.best_val_acc


def test_training_deterministic(tmp_path, rng):
    data = _toy(60, rng)
    cfg = H.TrainConfig(epochs=3, batch_size=8, seed=4)
    paths = []
    for name in ("a", "b"):
        res = H.train(cfg, data, max_folds=2)
        path = tmp_path / f"{name}.splc"
        mdl.save(res.best.model, path, res.metadata())
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_non_finite(rng):
    data = _toy(20, rng)
    data.features[3] = np.nan
    with pytest.raises(H.NonFinite):
        H.train_fold(H.TrainConfig(epochs=1, batch_size=20), data, np.arange(20), np.arange(4))


def test_train_result(rng):
    data = _toy(80, rng)
    res = H.train(H.TrainConfig(epochs=2, batch_size=16, folds=3), data)
    assert len(res.folds) == 3
    assert all(f.test_report is not None for f in res.folds)
    meta = res.metadata()
    assert meta["selected_fold"] == res.best.fold and meta["folds"] == 3
    np.testing.assert_array_equal(H.test_indices(data, meta), res.split.test)
    assert res.mean_test("acc") == pytest.approx(np.mean([f.test_report.acc for f in res.folds]))


def test_evaluate_repeatable(rng):
    data = _toy(30, rng)
    m = mdl.build(mdl.ModelConfig())
    a, b = H.evaluate(m, data), H.evaluate(m, data)
    assert a == b


def test_load_dataset_matches_single_worker(tmp_path):
    gen_dataset(4, 2, tmp_path, size=64, workers=1)
    a = H.load_dataset(tmp_path / "manifest.csv", spatial="tiny", workers=1)
    b = H.load_dataset(tmp_path / "manifest.csv", spatial="tiny", workers=2)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.spatial, b.spatial)
    assert sorted(a.labels.tolist()) == [0] * 4 + [1] * 4
    assert a.spatial.shape == (8, 3, 64, 64)


def test_history_and_roc_csv(tmp_path):
    hist = [{"epoch": 0, "train_loss": 0.7, "val_loss": 0.69, "val_acc": 0.5, "lr": 0.001}]
    write_history_csv(hist, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,val_acc,lr"
    assert lines[1] == "0,0.7,0.69,0.5,0.001"
    write_roc_csv([(float("inf"), 0.0, 0.0), (0.5, 0.25, 1.0)], tmp_path / "r.csv")
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[1].startswith("inf,") and rows[2] == "0.5,0.25,1.0"
