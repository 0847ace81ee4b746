import os

import numpy as np
import pytest

from utils.dataset import DatasetManager, Trajectory, collect_dataset, collect_episode, make_layouts, replay
from utils.errors import DatasetError, MissingFileError
from utils.maze_env import EnvParams


def test_episode_shapes_and_action_range(rooms):
    traj = collect_episode(rooms, steps=40, action_repeat=4, seed=1)
    assert traj.states.shape == (41, 4)
    assert traj.actions.shape == (40, 2)
    assert np.all(np.abs(traj.actions) <= 1.0)
    assert traj.layout_id == "rooms"


def test_actions_are_held_for_action_repeat_steps(rooms):
    traj = collect_episode(rooms, steps=12, action_repeat=4, seed=2)
    for block in range(3):
        chunk = traj.actions[4 * block:4 * block + 4]
        assert np.all(chunk == chunk[0])


def test_replay_reproduces_states_exactly(rooms):
    traj = collect_episode(rooms, steps=60, action_repeat=3, seed=5)
    assert np.array_equal(replay(traj, rooms), traj.states)


def test_collect_dataset_matches_across_worker_counts(rooms):
    serial = collect_dataset([rooms], episodes_per_layout=3, steps=10, seed=9, workers=1)
    parallel = collect_dataset([rooms], episodes_per_layout=3, steps=10, seed=9, workers=2)
    for a, b in zip(serial, parallel):
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.actions, b.actions)


def test_collect_dataset_rejects_short_episodes(rooms):
    with pytest.raises(ValueError):
        collect_dataset([rooms], episodes_per_layout=1, steps=1)


def test_trajectory_length_mismatch():
    with pytest.raises(DatasetError):
        Trajectory(states=np.zeros((3, 4)), actions=np.zeros((3, 2)), layout_id="x")


def test_observations_are_rendered_on_demand(rooms):
    traj = collect_episode(rooms, steps=5, action_repeat=1, seed=0)
    observations = traj.observations(rooms, EnvParams(resolution=16))
    assert len(observations) == len(traj.states)
    assert observations[0].image.shape == (3, 16, 16)


def test_dataset_file_round_trip(tmp_path, rooms):
    manager = DatasetManager(str(tmp_path))
    trajectories = collect_dataset([rooms], episodes_per_layout=2, steps=8, seed=4)
    manager.save_dataset("d.hwmd", trajectories, [rooms], resolution=64)
    bundle = manager.load_dataset("d.hwmd")
    assert bundle.G == 6 and bundle.resolution == 64
    assert bundle.layouts["rooms"].same_grid(rooms)
    assert len(bundle.trajectories) == 2
    for original, loaded in zip(trajectories, bundle.trajectories):
        assert np.array_equal(original.states, loaded.states)
        assert np.array_equal(original.actions, loaded.actions)


def test_same_seed_same_digest(tmp_path, config):
    digests = []
    for run in range(2):
        manager = DatasetManager(str(tmp_path / f"run{run}"))
        layouts = make_layouts("train", 2, config.env, root_seed=7)
        trajectories = collect_dataset(layouts, 2, 10, seed=7)
        manager.save_dataset("train.hwmd", trajectories, layouts, resolution=16)
        digests.append(manager.dataset_digest("train.hwmd"))
    assert digests[0] == digests[1]


def test_make_layouts_ids_and_disjoint_splits(config):
    train = make_layouts("train", 3, config.env, root_seed=0)
    test = make_layouts("test", 3, config.env, root_seed=0)
    assert [l.layout_id for l in train] == ["train-0", "train-1", "train-2"]
    assert not {l.digest() for l in train} & {l.digest() for l in test}


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.hwmd"
    path.write_bytes(b"NOPE" + bytes(64))
    with pytest.raises(DatasetError):
        DatasetManager(str(tmp_path)).load_dataset(str(path))


def test_truncated_file_rejected(tmp_path, rooms):
    manager = DatasetManager(str(tmp_path))
    path = manager.save_dataset("d.hwmd", collect_dataset([rooms], 1, 8, seed=0), [rooms], resolution=64)
    raw = open(path, "rb").read()
    with open(path, "wb") as f:
        f.write(raw[:-10])
    with pytest.raises(DatasetError):
        manager.load_dataset("d.hwmd")


def test_missing_dataset(tmp_path):
    with pytest.raises(MissingFileError):
        DatasetManager(str(tmp_path)).load_dataset("absent.hwmd")


def test_orphan_trajectories_rejected(tmp_path, rooms):
    traj = collect_episode(rooms, steps=4, action_repeat=1, seed=0)
    traj.layout_id = "elsewhere"
    with pytest.raises(DatasetError):
        DatasetManager(str(tmp_path)).save_dataset("d.hwmd", [traj], [rooms], resolution=64)


def test_layout_file_round_trip(tmp_path, rooms):
    manager = DatasetManager(str(tmp_path))
    path = manager.save_layout(rooms, os.path.join(str(tmp_path), "layouts", "rooms.txt"))
    loaded = manager.load_layout(path)
    assert loaded.layout_id == "rooms"
    assert loaded.same_grid(rooms)
