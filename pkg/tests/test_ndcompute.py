import numpy as np
import pytest
import torch

from utils import ndcompute as nd
from utils.errors import DatasetError, MissingFileError, NotScalarError, ShapeError


def _rand(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64)


def test_matmul_shape_mismatch_names_op():
    with pytest.raises(ShapeError) as info:
        nd.matmul(torch.zeros(2, 3), torch.zeros(4, 5))
    assert info.value.op == "matmul"
    assert info.value.shapes == [(2, 3), (4, 5)]
    assert isinstance(info.value, ValueError)


def test_add_broadcasts_only_bias():
    assert nd.add(torch.zeros(3, 4), torch.ones(4)).shape == (3, 4)
    with pytest.raises(ShapeError):
        nd.add(torch.zeros(3, 4), torch.ones(3, 1))


def test_concat_and_reshape_checks():
    assert nd.concat([torch.zeros(2, 3), torch.zeros(2, 1)]).shape == (2, 4)
    with pytest.raises(ShapeError):
        nd.concat([torch.zeros(2, 3), torch.zeros(3, 1)])
    with pytest.raises(ShapeError):
        nd.reshape(torch.zeros(6), (4, 2))
    with pytest.raises(ShapeError):
        nd.concat([torch.tensor(1.0), torch.tensor(2.0)])
    with pytest.raises(ShapeError):
        nd.concat([torch.zeros(2, 3), torch.zeros(2, 3)], dim=2)


def test_losses_reject_mismatched_shapes():
    with pytest.raises(ShapeError):
        nd.l1_loss(torch.zeros(2, 3), torch.zeros(2, 4))
    with pytest.raises(ShapeError):
        nd.mse_loss(torch.zeros(3), torch.zeros(2))


def test_l1_norm_and_loss_values():
    x = torch.tensor([[1.0, -2.0], [0.5, 0.5]])
    assert torch.equal(nd.l1_norm(x), torch.tensor([3.0, 1.0]))
    assert float(nd.l1_loss(x, torch.zeros_like(x))) == pytest.approx(2.0)
    assert float(nd.l1_norm(torch.tensor(-3.0))) == 3.0


def test_off_diagonal():
    m = torch.arange(9.0).reshape(3, 3)
    assert nd.off_diagonal(m).tolist() == [1.0, 2.0, 3.0, 5.0, 6.0, 7.0]
    for bad in (torch.zeros(3), torch.zeros(2, 3), torch.zeros(0, 0), torch.tensor(1.0)):
        with pytest.raises(ShapeError):
            nd.off_diagonal(bad)


def test_feature_std_uses_unbiased_estimate():
    x = torch.tensor([[0.0], [2.0]])
    assert float(nd.feature_std(x, eps=0.0)) == pytest.approx(np.sqrt(2.0))


@pytest.mark.parametrize("seed", range(10))
def test_primitive_gradients(seed):
    w = _rand(3, 4, seed=seed)
    b = _rand(3, seed=seed + 100)
    x = _rand(5, 4, seed=seed + 200)
    # keep inputs away from the kinks of relu and abs
    x = x + 0.1 * torch.sign(x)
    assert nd.gradcheck(lambda x, w, b: nd.linear(x, w, b), (x, w, b))
    assert nd.gradcheck(lambda x: nd.tanh(nd.mul(x, 0.5)), (x,))
    assert nd.gradcheck(lambda x: nd.l1_norm(x), (x,))
    assert nd.gradcheck(lambda a, t: nd.mse_loss(a, t), (x, _rand(5, 4, seed=seed + 300)))
    assert nd.gradcheck(lambda x: nd.feature_std(x), (x,))
    assert nd.gradcheck(lambda x: nd.off_diagonal(nd.feature_cov(x)).pow(2).sum(), (x,))
    assert nd.gradcheck(lambda x: nd.relu(x), (x,))


@pytest.mark.parametrize("seed", range(10))
def test_conv2d_gradients(seed):
    x = _rand(2, 2, 5, 5, seed=seed)
    w = _rand(3, 2, 3, 3, seed=seed + 1)
    b = _rand(3, seed=seed + 2)
    assert nd.gradcheck(lambda x, w, b: nd.conv2d(x, w, b, stride=2, padding=1), (x, w, b))


def test_tape_records_ops_in_order():
    w = torch.randn(3, 4, requires_grad=True)
    with nd.Tape() as tape:
        out = nd.relu(nd.linear(torch.randn(2, 4), w))
        nd.mean(out)
    assert tape.ops() == ["matmul", "relu", "mean"]
    assert tape.entries[0].input_shapes == ((2, 4), (4, 3))
    assert tape.entries[0].output_shape == (2, 3)


def test_tape_ignores_no_grad_work():
    w = torch.randn(3, 4, requires_grad=True)
    with nd.Tape() as tape, torch.no_grad():
        nd.linear(torch.randn(2, 4), w)
    assert len(tape) == 0


def test_backward_requires_scalar():
    w = torch.randn(3, requires_grad=True)
    with nd.Tape() as tape:
        with pytest.raises(NotScalarError):
            tape.backward(nd.mul(w, 2.0), {"w": w})


def test_backward_is_repeatable_and_fills_unused():
    w = torch.randn(3, requires_grad=True)
    unused = torch.randn(2, requires_grad=True)
    with nd.Tape() as tape:
        loss = nd.mean(nd.mul(w, w))
        first = tape.backward(loss, {"w": w, "unused": unused})
        second = tape.backward(loss, {"w": w, "unused": unused})
    assert torch.equal(first["w"], second["w"])
    torch.testing.assert_close(first["w"], 2.0 * w.detach() / 3.0)
    assert torch.equal(first["unused"], torch.zeros(2))


def _manual_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p


def test_adam_step_matches_reference_update():
    p = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64, requires_grad=True)
    start = p.detach().numpy().copy()
    state = nd.OptimizerState([p], lr=0.018)
    grads = [np.array([0.1, -0.2, 0.3]), np.array([1.0, 0.0, -1.0]), np.array([0.05, 0.4, 0.0])]
    for g in grads:
        nd.adam_step([p], [torch.tensor(g)], state)
    assert state.step_count == 3
    np.testing.assert_allclose(p.detach().numpy(), _manual_adam(start, grads, 0.018), rtol=1e-10, atol=1e-12)


def test_adam_step_rejects_foreign_parameters():
    p = torch.zeros(2, requires_grad=True)
    state = nd.OptimizerState([p])
    with pytest.raises(ValueError):
        nd.adam_step([torch.zeros(2, requires_grad=True)], [torch.ones(2)], state)
    with pytest.raises(ShapeError):
        nd.adam_step([p], [torch.ones(3)], state)


def test_parameter_file_round_trip(tmp_path):
    named = {"a.weight": torch.randn(3, 2), "a.bias": torch.randn(3), "scalar": torch.tensor(1.5)}
    path = str(tmp_path / "p.hwmp")
    nd.save_parameters(path, named)
    loaded = nd.load_parameters(path)
    assert list(loaded) == list(named)
    for name, tensor in named.items():
        assert torch.equal(loaded[name], tensor)


def test_parameter_file_errors(tmp_path):
    with pytest.raises(MissingFileError):
        nd.load_parameters(str(tmp_path / "absent.hwmp"))
    bad = tmp_path / "bad.hwmp"
    bad.write_bytes(b"XXXX" + bytes(6))
    with pytest.raises(DatasetError):
        nd.load_parameters(str(bad))


def test_truncated_parameter_file_is_rejected(tmp_path):
    path = tmp_path / "p.hwmp"
    nd.save_parameters(str(path), {"w": torch.randn(4, 4)})
    raw = path.read_bytes()
    for cut in (8, 4 * 16, len(raw) - 10):
        path.write_bytes(raw[:-cut])
        with pytest.raises(DatasetError):
            nd.load_parameters(str(path))


def test_parameter_file_rejects_trailing_bytes(tmp_path):
    path = tmp_path / "p.hwmp"
    nd.save_parameters(str(path), {"w": torch.randn(2, 2)})
    path.write_bytes(path.read_bytes() + b"\x00\x00")
    with pytest.raises(DatasetError, match="trailing"):
        nd.load_parameters(str(path))


def test_parameter_file_rejects_overlong_name(tmp_path):
    path = tmp_path / "p.hwmp"
    path.write_bytes(nd._PARAM_HEADER.pack(nd.PARAM_MAGIC, nd.PARAM_VERSION, 1) + b"\xff\x00abc")
    with pytest.raises(DatasetError):
        nd.load_parameters(str(path))
