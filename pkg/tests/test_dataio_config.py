import json

import numpy as np
import pytest

from ambient_lab import dataio
from ambient_lab.config import ExperimentConfig
from ambient_lab.corruption import Mask
from ambient_lab.errors import ConfigurationError, DataFormatError


def cfg_with(**sections):
    return ExperimentConfig(sections)


def test_p_zero_measurements_are_clean_samples():
    cfg = cfg_with(corruption={"p": 0.0, "delta": 0.0}, data={"num_train": 500})
    ds, x0 = dataio.generate_dataset(cfg)
    assert np.all(ds.operators.diag == 1)
    assert np.array_equal(ds.y, x0.astype(np.float32).astype(np.float64))


def test_same_seed_bit_identical_files(tmp_path):
    cfg = cfg_with(data={"num_train": 300})
    for name in ("a", "b"):
        ds, x0 = dataio.generate_dataset(cfg)
        dataio.write_dataset(tmp_path / f"{name}.ambd", ds)
        dataio.write_reference(tmp_path / f"{name}.ambr", x0, ds.digest)
    assert (tmp_path / "a.ambd").read_bytes() == (tmp_path / "b.ambd").read_bytes()
    assert (tmp_path / "a.ambr").read_bytes() == (tmp_path / "b.ambr").read_bytes()


def test_observation_frequency_binomial():
    p, N = 0.3, 100_000
    cfg = cfg_with(corruption={"p": p}, data={"num_train": N})
    ds, _ = dataio.generate_dataset(cfg)
    se = np.sqrt(p * (1 - p) / N)
    assert np.all(np.abs(ds.operators.diag.mean(axis=0) - (1 - p)) < 3 * se)


def test_trainer_refuses_reference(tmp_path):
    cfg = cfg_with(data={"num_train": 100})
    ds, x0 = dataio.generate_dataset(cfg)
    dataio.write_reference(tmp_path / "ref.ambr", x0, ds.digest)
    with pytest.raises(DataFormatError, match="evaluation reference"):
        dataio.read_dataset(tmp_path / "ref.ambr")
    back, digest = dataio.read_reference(tmp_path / "ref.ambr")
    assert digest == ds.digest and np.allclose(back, x0, atol=1e-6)


def test_reference_file_holds_no_training_magic(tmp_path):
    ds, x0 = dataio.generate_dataset(cfg_with(data={"num_train": 50}))
    dataio.write_dataset(tmp_path / "t.ambd", ds)
    dataio.write_reference(tmp_path / "r.ambr", x0, ds.digest)
    assert (tmp_path / "t.ambd").read_bytes()[:4] == b"AMBD"
    assert (tmp_path / "r.ambr").read_bytes()[:4] == b"AMBR"


@pytest.mark.parametrize("corruption,data", [
    ({"kind": "random_inpainting", "p": 0.4}, {"num_train": 40}),
    ({"kind": "gaussian", "m": 3, "delta": 1}, {"num_train": 40}),
    ({"kind": "block_inpainting", "block_size": 1, "image_shape": [2, 1]}, {"num_train": 40}),
])
def test_dataset_round_trip(tmp_path, corruption, data):
    cfg = cfg_with(corruption=corruption, data=data)
    ds, _ = dataio.generate_dataset(cfg)
    dataio.write_dataset(tmp_path / "d.ambd", ds)
    back = dataio.read_dataset(tmp_path / "d.ambd")
    assert back.kind == ds.kind and back.digest == cfg.digest() and back.count == 40
    assert np.array_equal(back.y, ds.y)
    if isinstance(ds.operators, Mask):
        assert np.array_equal(back.operators.diag, ds.operators.diag)
    else:
        assert np.array_equal(back.operators.rows, ds.operators.rows)
    if corruption["kind"] == "block_inpainting":
        assert back.image_shape == (2, 1)


def test_path_collision(tmp_path):
    ds, _ = dataio.generate_dataset(cfg_with(data={"num_train": 10}))
    dataio.write_dataset(tmp_path / "d.ambd", ds)
    with pytest.raises(FileExistsError):
        dataio.write_dataset(tmp_path / "d.ambd", ds)
    dataio.write_dataset(tmp_path / "d.ambd", ds, overwrite=True)


def test_truncated_dataset(tmp_path):
    ds, _ = dataio.generate_dataset(cfg_with(data={"num_train": 10}))
    dataio.write_dataset(tmp_path / "d.ambd", ds)
    blob = (tmp_path / "d.ambd").read_bytes()
    (tmp_path / "d.ambd").write_bytes(blob[:-3])
    with pytest.raises(DataFormatError):
        dataio.read_dataset(tmp_path / "d.ambd")
    (tmp_path / "d.ambd").write_bytes(blob[:10])
    with pytest.raises(DataFormatError):
        dataio.read_dataset(tmp_path / "d.ambd")


def test_samples_file(tmp_path):
    x = np.random.default_rng(0).standard_normal((20, 2))
    dataio.write_samples(tmp_path / "s.ambs", x, "dig")
    back, d = dataio.read_samples(tmp_path / "s.ambs")
    assert d == "dig" and np.allclose(back, x, atol=1e-6)
    with pytest.raises(DataFormatError):
        dataio.read_reference(tmp_path / "s.ambs")


# -- config --------------------------------------------------------------------

def test_config_text_round_trip():
    cfg = cfg_with(corruption={"p": 0.3}, sampler={"kind": "reconstruction_guidance"})
    assert ExperimentConfig.from_text(cfg.to_text()) == cfg


def test_digest_stable_under_reordering():
    a = ExperimentConfig.from_text(json.dumps({"corruption": {"p": 0.2, "delta": 0.5},
                                               "schedule": {"num_steps": 32, "sigma_min": 0.02}}))
    b = ExperimentConfig.from_text(json.dumps({"schedule": {"sigma_min": 0.02, "num_steps": 32},
                                               "corruption": {"delta": 0.5, "p": 0.2}}))
    assert a.digest() == b.digest()
    assert a.digest() != ExperimentConfig().digest()


def test_digest_ignores_run_sections():
    assert cfg_with(optimizer={"steps": 5}).digest() == ExperimentConfig().digest()


@pytest.mark.parametrize("text", [
    '{"corruption": {"pp": 0.1}}', '{"bogus": {}}', '{"corruption": {"p": 1.5}}',
    '{"training": {"objective": "other"}}', "not json", "[1, 2]",
    '{"schedule": {"sigma_min": 9.0}}',
])
def test_config_rejects_bad_input(text):
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_text(text)


def test_env_overrides_only_output(tmp_path, monkeypatch):
    path = tmp_path / "c.json"
    ExperimentConfig().save(path)
    monkeypatch.setenv("AMBIENT_LAB_OUT", str(tmp_path / "elsewhere"))
    monkeypatch.setenv("AMBIENT_LAB_SEED", "99")
    cfg = ExperimentConfig.load(path)
    assert cfg["output"]["dir"] == str(tmp_path / "elsewhere")
    assert cfg["seeds"] == ExperimentConfig()["seeds"]


def test_override():
    cfg = ExperimentConfig().override("corruption.p", 0.2)
    assert cfg["corruption"]["p"] == 0.2
    with pytest.raises(ConfigurationError):
        ExperimentConfig().override("corruption.nope", 1)
