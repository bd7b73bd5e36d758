import numpy as np
import pytest
import torch

from affordmotion.adm import ADMConfig, ADMTrainConfig, sample_affordance, train_adm
from affordmotion.amdm import AMDMConfig, AMDMTrainConfig, sample_motion, train_amdm
from affordmotion.checkpoint import FORMAT_VERSION, Checkpoint, CheckpointError, load_checkpoint


@pytest.fixture(scope="module")
def adm_ckpt(walk_samples):
    return train_adm(walk_samples, ADMTrainConfig(steps=2, batch_size=2, T=10),
                     ADMConfig(backbone="perceiver", d_model=16, heads=2, process_layers=1, step_dim=16, k=8))


@pytest.fixture(scope="module")
def amdm_ckpt(walk_samples):
    return train_amdm(walk_samples, AMDMTrainConfig(steps=2, batch_size=2, T=10),
                      model_config=AMDMConfig(d_model=16, heads=2, layers=1, step_dim=16, feat_dim=16,
                                              unet_dims=(8, 8, 8, 8), k=8, max_frames=16))


def test_adm_round_trip_bit_exact(adm_ckpt, walk_samples, tmp_path):
    s = walk_samples[0]
    path = adm_ckpt.save(tmp_path / "adm.pt")
    loaded = load_checkpoint(path, kind="adm")
    assert ADMConfig(**loaded.model_config) == ADMConfig(**adm_ckpt.model_config)
    np.testing.assert_array_equal(loaded.schedule.betas, adm_ckpt.schedule.betas)
    assert loaded.extra["losses"] == adm_ckpt.extra["losses"]
    for k, v in adm_ckpt.state_dict.items():
        assert torch.equal(v, loaded.state_dict[k])
    a = sample_affordance(adm_ckpt, s.scene, s.prompt, seed=1)
    b = sample_affordance(loaded, s.scene, s.prompt, seed=1)
    np.testing.assert_array_equal(a.values, b.values)


def test_amdm_round_trip_bit_exact(amdm_ckpt, walk_samples, tmp_path):
    s = walk_samples[0]
    loaded = load_checkpoint(amdm_ckpt.save(tmp_path / "amdm.pt"), kind="amdm")
    a = sample_motion(amdm_ckpt, [s.scene], [s.prompt], [s.affordance], seed=2)
    b = sample_motion(loaded, [s.scene], [s.prompt], [s.affordance], seed=2)
    np.testing.assert_array_equal(a, b)
    torch.testing.assert_close(loaded.state_dict["mean"], amdm_ckpt.state_dict["mean"], rtol=0, atol=0)


def test_kind_mismatch(adm_ckpt, tmp_path):
    path = adm_ckpt.save(tmp_path / "adm.pt")
    with pytest.raises(CheckpointError, match="expected a amdm"):
        load_checkpoint(path, kind="amdm")


def test_version_and_format_errors(adm_ckpt, tmp_path):
    path = adm_ckpt.save(tmp_path / "adm.pt")
    blob = torch.load(path, weights_only=True)
    blob["format_version"] = FORMAT_VERSION + 1
    torch.save(blob, tmp_path / "future.pt")
    with pytest.raises(CheckpointError, match="unsupported checkpoint version"):
        load_checkpoint(tmp_path / "future.pt")
    torch.save({"weights": torch.zeros(2)}, tmp_path / "other.pt")
    with pytest.raises(CheckpointError, match="not a model checkpoint"):
        load_checkpoint(tmp_path / "other.pt")
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError, match="unreadable"):
        load_checkpoint(tmp_path / "junk.pt")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.pt")


def test_empty_checkpoint_has_no_parameters(adm_ckpt):
    with pytest.raises(CheckpointError):
        Checkpoint("adm", {}, adm_ckpt.schedule).state_dict
