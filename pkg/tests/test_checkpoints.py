import json

import pandas as pd
import pytest
import torch

from utils import ndcompute as nd
from utils.checkpoints import CheckpointManager, encoder_hash
from utils.errors import LineageError, MissingFileError


@pytest.fixture
def saved(tmp_path, trained):
    params, low_log, high_log, metrics = trained
    manager = CheckpointManager(str(tmp_path / "models"))
    lineage = manager.save_low(params, "cfg", ["train-0", "train-1"], "digest", 16, low_log, metrics)
    manager.save_high(params, "cfg", "digest", high_log)
    return manager, params, lineage


def test_round_trip_restores_every_module(saved):
    manager, params, lineage = saved
    loaded = manager.load(require_high=True)
    assert encoder_hash(loaded) == lineage
    assert loaded.latent_action_std == params.latent_action_std
    sections = ("encoder", "low", "proprio_head", "prober", "action_encoder", "high")
    original = params.named_parameters(sections)
    for name, value in loaded.named_parameters(sections).items():
        assert torch.equal(value, original[name]), name


def test_sidecars_and_logs(saved):
    manager, _, lineage = saved
    low = manager.read_low_sidecar()
    high = manager.read_high_sidecar()
    assert low["encoder_hash"] == high["encoder_hash"] == lineage
    assert low["train_layout_ids"] == ["train-0", "train-1"]
    assert low["dataset_digest"] == "digest"
    assert "median_error_cells" in low["prober"]
    assert manager.train_layout_ids() == {"train-0", "train-1"}
    log = pd.read_csv(manager.path("low_log.csv"))
    assert (log["config_hash"] == "cfg").all()


def test_high_trained_on_other_encoder_is_refused(saved):
    manager, _, _ = saved
    with open(manager.path("high.json")) as f:
        meta = json.load(f)
    meta["encoder_hash"] = "0" * 64
    with open(manager.path("high.json"), "w") as f:
        json.dump(meta, f)
    with pytest.raises(LineageError) as info:
        manager.load()
    assert info.value.code == "lineage_mismatch"
    # the low level alone still loads
    assert not manager.load(include_high=False).has_high


def test_tampered_encoder_weights_are_refused(saved):
    manager, _, _ = saved
    tensors = nd.load_parameters(manager.path("low.hwmp"))
    first = next(name for name in tensors if name.startswith("encoder."))
    tensors[first] = tensors[first] + 1.0
    nd.save_parameters(manager.path("low.hwmp"), tensors)
    with pytest.raises(LineageError):
        manager.load(include_high=False)


def test_missing_checkpoints(tmp_path, saved):
    with pytest.raises(MissingFileError):
        CheckpointManager(str(tmp_path / "nowhere")).load()
    manager, _, _ = saved
    for name in ("high.hwmp", "high.json"):
        (tmp_path / "models" / name).unlink()
    assert not manager.load().has_high
    with pytest.raises(MissingFileError):
        manager.load(require_high=True)


def test_encoder_hash_tracks_weights(trained):
    params = trained[0]
    before = encoder_hash(params)
    assert before == encoder_hash(params)
    weight = params.encoder.project.weight
    original = weight.detach().clone()
    with torch.no_grad():
        weight[0, 0] += 1.0
    try:
        assert encoder_hash(params) != before
    finally:
        with torch.no_grad():
            weight.copy_(original)
    assert encoder_hash(params) == before
