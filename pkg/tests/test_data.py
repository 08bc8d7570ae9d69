import json

import numpy as np
import pytest

from idarts.data import (FAMILIES, MODULATIONS, augment_image, generate_rf_dataset, hflip,
                         load_image_dataset, matched_filter_symbols, read_dataset, rrc_taps, split_tasks,
                         stratified_splits, write_dataset)
from idarts.errors import ConfigurationError, IngestionError


def test_shapes_and_balance():
    ds = generate_rf_dataset(MODULATIONS, n_per_class=5, L=128, snr_db=10, seed=0)
    assert ds.x.shape == (40, 2, 128) and ds.x.dtype == np.float32
    assert np.bincount(ds.y).tolist() == [5] * 8
    assert ds.classes == list(MODULATIONS)
    assert np.all(np.isfinite(ds.x))


def test_same_seed_bitwise_identical():
    a = generate_rf_dataset(["QPSK", "FM"], 4, 64, 5.0, seed=7)
    b = generate_rf_dataset(["QPSK", "FM"], 4, 64, 5.0, seed=7)
    c = generate_rf_dataset(["QPSK", "FM"], 4, 64, 5.0, seed=8)
    assert a.x.tobytes() == b.x.tobytes()
    assert a.x.tobytes() != c.x.tobytes()


def test_per_example_streams_do_not_depend_on_class_count():
    a = generate_rf_dataset(["BPSK", "QPSK"], 3, 64, 10, seed=1)
    b = generate_rf_dataset(["BPSK", "QPSK"], 6, 64, 10, seed=1)
    assert np.array_equal(a.x[:3], b.x[:3])


def test_unsupported_modulation():
    with pytest.raises(ValueError, match="OOK"):
        generate_rf_dataset(["BPSK", "OOK"], 2, 64, 10)
    with pytest.raises(ValueError):
        generate_rf_dataset(["BPSK"], 0, 64, 10)
    with pytest.raises(ValueError):
        generate_rf_dataset(["BPSK"], 1, 64, float("inf"))


def test_bpsk_constellation_at_high_snr():
    ds = generate_rf_dataset(["BPSK"], 3, 512, 40.0, seed=0, random_phase=False, dtype=np.float64)
    for iq in ds.x:
        sym = matched_filter_symbols(iq)
        assert np.all(np.abs(np.abs(sym.real) - 1.0) < 0.05)
        assert np.all(np.abs(sym.imag) < 0.05)


def test_rrc_unit_energy():
    h = rrc_taps(8, 0.35, 8)
    assert len(h) == 65
    assert np.sum(h ** 2) == pytest.approx(1.0)
    assert np.allclose(h, h[::-1])


@pytest.mark.parametrize("mod", MODULATIONS)
@pytest.mark.parametrize("snr", [0.0, 10.0])
def test_measured_snr_matches_request(mod, snr):
    ds = generate_rf_dataset([mod], 100, 1024, snr, seed=3, dtype=np.float64, return_clean=True)
    signal = np.mean(ds.clean ** 2) * 2
    noise = np.mean((ds.x - ds.clean) ** 2) * 2
    assert 10 * np.log10(signal / noise) == pytest.approx(snr, abs=0.5)


# -- splits ------------------------------------------------------------------------

def test_stratified_splits_partition():
    y = np.repeat(np.arange(4), 10)
    s = stratified_splits(y, {"train": 0.8, "test": 0.2}, seed=0)
    assert not set(s["train"]) & set(s["test"])
    assert sorted(np.concatenate([s["train"], s["test"]]).tolist()) == list(range(40))
    assert np.bincount(y[s["test"]]).tolist() == [2] * 4
    with pytest.raises(ConfigurationError):
        stratified_splits(y, {"a": 0.5, "b": 0.6})


def test_contiguous_tasks():
    s = split_tasks(range(8), 4)
    assert s.tasks == ((0, 1), (2, 3), (4, 5), (6, 7))
    with pytest.raises(ConfigurationError):
        split_tasks(range(8), 3)


def test_family_tasks():
    s = split_tasks(range(8), 4, "family", class_names=list(MODULATIONS))
    names = [[MODULATIONS[c] for c in t] for t in s.tasks]
    assert names == [["BPSK", "QPSK", "8PSK"], ["16QAM", "64QAM"], ["GFSK"], ["AM-DSB", "FM"]]
    for t in names:
        assert len({FAMILIES[m] for m in t}) == 1


def test_explicit_tasks_and_errors():
    s = split_tasks(range(4), None, "explicit", explicit=[[3, 0], [1, 2]])
    assert s.tasks == ((3, 0), (1, 2))
    assert split_tasks(range(4), None, "explicit", explicit=s.to_dict()["tasks"]) == s
    with pytest.raises(ConfigurationError):
        split_tasks(range(4), None, "explicit", explicit=[[0, 1], [1, 2, 3]])
    with pytest.raises(ConfigurationError):
        split_tasks(range(4), None, "explicit", explicit=[[0, 1], [2]])
    with pytest.raises(ConfigurationError):
        split_tasks(range(4), 2, "striped")


# -- augmentation -------------------------------------------------------------------

def test_augment_deterministic_and_shape():
    x = np.random.default_rng(0).normal(size=(3, 8, 8))
    a = augment_image(x, seed=5)
    assert a.shape == x.shape
    assert np.array_equal(a, augment_image(x, seed=5))


def test_forced_flip_is_involution():
    x = np.random.default_rng(0).normal(size=(3, 6, 6))
    once = augment_image(x, flip=True, crop=False)
    assert np.array_equal(once, x[..., ::-1])
    assert np.array_equal(augment_image(once, flip=True, crop=False), x)
    assert np.array_equal(hflip(hflip(x)), x)


def test_crop_pads_with_zeros():
    x = np.ones((1, 4, 4))
    seen_zero = any((augment_image(x, seed=s, flip=False) == 0).any() for s in range(20))
    assert seen_zero


# -- storage --------------------------------------------------------------------------

def _images(tmp_path, dtype="float32"):
    rng = np.random.default_rng(0)
    splits = {"train": (rng.normal(3.0, 2.0, size=(20, 3, 4, 4)), np.arange(20) % 2),
              "test": (rng.normal(size=(6, 3, 4, 4)), np.arange(6) % 2)}
    return write_dataset(tmp_path, "img", "image2d", ["a", "b"], splits, seed=0, dtype=dtype), splits


def test_write_read_round_trip(tmp_path):
    path, splits = _images(tmp_path, "float64")
    doc = json.loads(path.read_text())
    assert {"name", "modality", "classes", "splits", "seed", "dtype", "shape"} <= set(doc)
    assert doc["splits"]["train"]["count"] == 20
    manifest, out = read_dataset(path)
    assert manifest.shape == [3, 4, 4]
    for k in splits:
        assert np.array_equal(out[k][0], splits[k][0]) and np.array_equal(out[k][1], splits[k][1])


def test_write_is_byte_stable(tmp_path):
    a, _ = _images(tmp_path / "a")
    b, _ = _images(tmp_path / "b")
    for name in ("train_x.bin", "train_y.bin", "manifest.json"):
        assert (a.parent / name).read_bytes() == (b.parent / name).read_bytes()


def test_image_normalization(tmp_path):
    path, _ = _images(tmp_path, "float64")
    _, out = load_image_dataset(path)
    x = out["train"][0]
    assert np.allclose(x.mean(axis=(0, 2, 3)), 0, atol=1e-6)
    assert np.allclose(x.std(axis=(0, 2, 3)), 1, atol=1e-3)
    _, again = load_image_dataset(path)
    assert np.array_equal(again["test"][0], out["test"][0])


def test_truncated_record_is_named(tmp_path):
    path, _ = _images(tmp_path)
    raw = (tmp_path / "train_x.bin").read_bytes()
    record = 3 * 4 * 4 * 4
    (tmp_path / "train_x.bin").write_bytes(raw[:7 * record + 10])
    with pytest.raises(IngestionError, match="record index 7") as info:
        read_dataset(path)
    assert info.value.record == 7


def test_bad_label_is_named(tmp_path):
    path, _ = _images(tmp_path)
    y = np.frombuffer((tmp_path / "test_y.bin").read_bytes(), dtype="<i8").copy()
    y[4] = 9
    (tmp_path / "test_y.bin").write_bytes(y.tobytes())
    with pytest.raises(IngestionError, match="record 4"):
        read_dataset(path)


def test_signal_manifest_is_not_an_image_dataset(tmp_path):
    ds = generate_rf_dataset(["BPSK"], 2, 32, 10)
    path = write_dataset(tmp_path, "rf", "signal1d", ds.classes, {"train": (ds.x, ds.y)}, seed=0)
    with pytest.raises(IngestionError):
        load_image_dataset(path)
