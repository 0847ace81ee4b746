import numpy as np
import pytest
import torch

from utils import ndcompute as nd
from utils.config import ModelConfig
from utils.dataset import collect_episode
from utils.errors import ChunkTooLongError, ShapeError, TrajectoryTooShortError
from utils.maze_env import EnvParams, EnvState, render
from utils.models import (
    attach_high_level,
    build_world_model,
    encode,
    encode_action_chunk,
    encode_action_chunks,
    encode_states,
    encode_waypoints,
    pad_action_chunks,
    predict_high,
    predict_low,
    probe,
    rollout_high,
    rollout_low,
    sample_waypoints,
)

SMALL = ModelConfig(d_z=8, latent_shape=[2, 2, 2], d_l=3, max_chunk=5, encoder_channels=[4, 4, 4],
                    encoder_hidden=16, low_hidden=16, high_hidden=16, action_hidden=8, prober_channels=[4, 4])


@pytest.fixture
def params():
    p = build_world_model(SMALL, seed=1, resolution=16)
    return attach_high_level(p, seed=2)


def test_build_is_deterministic():
    a = build_world_model(SMALL, seed=5, resolution=16)
    b = build_world_model(SMALL, seed=5, resolution=16)
    for (name, x), y in zip(a.low_parameters().items(), b.low_parameters().values()):
        assert torch.equal(x, y), name


def test_encode_single_and_batch(params, rooms):
    env = EnvParams(resolution=16)
    obs = render(EnvState(position=[0.5, 0.5]), rooms, env)
    z = encode(obs, params)
    assert z.shape == (8,)
    states = np.array([[0.5, 0.5, 0.0, 0.0], [2.5, 2.5, 0.1, 0.0]], dtype=np.float32)
    batch = encode_states(states, rooms, params, env)
    assert batch.shape == (2, 8)
    torch.testing.assert_close(batch[0], z.detach())


def test_encode_rejects_wrong_resolution(params, rooms):
    obs = render(EnvState(position=[0.5, 0.5]), rooms, EnvParams(resolution=32))
    with pytest.raises(ShapeError) as info:
        encode(obs, params)
    assert info.value.op == "encode"
    with pytest.raises(ShapeError):
        encode_states(np.zeros((1, 4)), rooms, params, EnvParams(resolution=32))


def test_low_predictor_shapes_and_errors(params):
    z = torch.zeros(4, 8)
    assert predict_low(z, torch.zeros(4, 2), params).shape == (4, 8)
    with pytest.raises(ShapeError):
        predict_low(z, torch.zeros(4, 3), params)


def test_zeroed_predictor_copies_input(params):
    params.low.mlp.zero_output()
    z = torch.randn(3, 8)
    assert torch.equal(predict_low(z, torch.randn(3, 2), params), z)


def test_rollout_low_matches_stepwise(params):
    z = torch.randn(8)
    actions = torch.randn(5, 2)
    rolled = rollout_low(z, actions, params)
    assert rolled.shape == (5, 8)
    step = z
    for t in range(5):
        step = predict_low(step, actions[t], params)
    torch.testing.assert_close(rolled[-1], step)
    assert rollout_low(z, torch.zeros(0, 2), params).shape == (0, 8)


def test_pad_action_chunks_layout():
    padded = pad_action_chunks([np.ones((2, 2)), np.full((5, 2), 0.5)], max_chunk=5)
    assert padded.shape == (2, 11)
    assert padded[0, :4].tolist() == [1.0] * 4
    assert padded[0, 4:10].tolist() == [0.0] * 6
    assert padded[0, -1] == pytest.approx(0.4)
    assert padded[1, -1] == pytest.approx(1.0)


@pytest.mark.parametrize("length", [0, 6])
def test_chunk_length_out_of_range(params, length):
    with pytest.raises(ChunkTooLongError):
        encode_action_chunk(np.zeros((length, 2)), params)


def test_variable_and_fixed_chunk_encoders_agree(params):
    chunk = torch.randn(4, 2)
    torch.testing.assert_close(encode_action_chunk(chunk.numpy(), params), encode_action_chunks(chunk, params))
    batch = encode_action_chunks(torch.randn(2, 3, 5, 2), params)
    assert batch.shape == (2, 3, 3)


def test_rollout_high_shapes(params):
    z = torch.randn(8)
    latent_actions = torch.randn(4, 3)
    assert rollout_high(z, latent_actions, params).shape == (4, 8)
    with pytest.raises(ShapeError):
        predict_high(z, torch.randn(2), params)


def test_probe_shapes(params):
    assert probe(torch.randn(8), params).shape == (2,)
    assert probe(torch.randn(5, 8), params).shape == (5, 2)


def test_sample_waypoints(rooms):
    traj = collect_episode(rooms, steps=50, action_repeat=1, seed=0)
    batch = sample_waypoints(traj, N=6, stride=10)
    assert batch.indices.tolist() == [0, 10, 20, 30, 40, 50]
    assert batch.action_chunks.shape == (5, 10, 2)
    assert np.array_equal(batch.action_chunks[2], traj.actions[20:30])
    with pytest.raises(TrajectoryTooShortError):
        sample_waypoints(traj, N=6, stride=10, start=1)


def test_encode_waypoints(params, rooms):
    traj = collect_episode(rooms, steps=20, action_repeat=1, seed=3)
    batch = encode_waypoints(sample_waypoints(traj, N=5, stride=5), rooms, params, EnvParams(resolution=16))
    assert batch.latents.shape == (5, 8)
    assert batch.latent_actions.shape == (4, 3)
    assert not batch.latents.requires_grad
    assert batch.latent_actions.requires_grad


def test_model_forward_gradients(params):
    z = torch.randn(3, 8, dtype=torch.float64)
    a = torch.randn(3, 2, dtype=torch.float64)
    low = params.low.double()
    assert nd.gradcheck(lambda z, a: low(z, a), (z, a))
    params.low.float()
