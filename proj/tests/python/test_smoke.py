import json

import numpy as np
import pytest

import tlfault


@pytest.fixture(scope="module")
def grid_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("grid") / "grid.json"
    path.write_text(json.dumps({
        "preset": "reduced", "distance_ref": [10, 60], "inception_angles": [20, 100],
        "resistances": [1], "phase_diffs": [0], "voltage_flucts": [0], "no_fault_replicates": 4,
    }))
    return str(path)


@pytest.fixture(scope="module")
def source(grid_file):
    return tlfault.extract_features(tlfault.simulate(100, grid=grid_file, seed=1), seed=1)


def test_simulate_shapes(grid_file, tmp_path):
    w = tlfault.simulate(50, grid=grid_file, seed=3)
    assert len(w) == 44
    x = w.samples(len(w) - 1)
    assert x.shape == (6, 60)
    assert w.fault_type(0) == "NONE"
    w.save(tmp_path / "w.bin")
    back = tlfault.load_waveforms(tmp_path / "w.bin")
    np.testing.assert_array_equal(back.samples(5), w.samples(5))


def test_features_are_normalized(source, tmp_path):
    frames = source.train_frames
    assert frames.shape[1:] == (7, 7)
    assert frames.min() >= 0.0 and frames.max() <= 1.0
    assert len(source.train_labels) == frames.shape[0]
    assert set(source.train_labels) == set(range(11))
    source.save(tmp_path / "f.csv")
    np.testing.assert_array_equal(tlfault.load_dataset(tmp_path / "f.csv").test_frames, source.test_frames)


def test_train_evaluate_and_persist(source, tmp_path):
    net = tlfault.Network("classify", seed=2)
    out = tlfault.train(net, source, epochs=2, batch_size=4, seed=2)
    assert len(out["history"]["train"]) == 2
    probs = net.predict(source.test_frames)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=1e-12)
    net.save(tmp_path / "n.tlxd")
    loaded = tlfault.Network.load(tmp_path / "n.tlxd", "classify")
    np.testing.assert_array_equal(loaded.predict(source.test_frames), probs)
    assert tlfault.evaluate(loaded, source)["accuracy"] == out["metrics"]["accuracy"]
    with pytest.raises(tlfault.ArchiveError):
        tlfault.Network.load(tmp_path / "n.tlxd", "locate")


def test_transfer_modes(source, grid_file):
    net = tlfault.Network("classify", seed=1)
    tlfault.train(net, source, epochs=1, batch_size=4)
    target = tlfault.extract_features(tlfault.simulate(12.5, grid=grid_file, seed=1), seed=1)
    rows = tlfault.transfer(net, {12.5: target}, task="locate", epochs=1, batch_size=4)
    assert [r["mode"] for r in rows] == ["finetune", "frozen", "dedicated"]
    assert all(r["metrics"]["mse"] >= 0.0 for r in rows)


def test_kmeans_and_latency(source):
    km = tlfault.kmeans(source, k=11, seed=0)
    assert 0.0 <= km["fraction_correct"] <= 1.0
    assert len(km["cluster_labels"]) == 11
    lat = tlfault.latency(tlfault.Network("classify"), source, inferences=200)
    assert lat["inferences"] == 200 and lat["mean_us"] > 0.0


def test_validation_errors_are_value_errors(grid_file):
    with pytest.raises(ValueError):
        tlfault.simulate(75, grid=grid_file)
    with pytest.raises(tlfault.ValidationError):
        tlfault.Network("sideways")
    with pytest.raises(ValueError):
        tlfault.Network().predict(np.zeros((2, 6, 7)))
