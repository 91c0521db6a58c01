import numpy as np
import pytest
import torch

from tensor_core import (ContractError, Mlp, NonFiniteError, ShapeError, adam_step, backward,
                         gradient_check, load_checkpoint, lr_schedule, make_optimizer, restore_module,
                         restore_optimizer, save_checkpoint, shadow_f64)


@pytest.fixture
def mlp():
    torch.manual_seed(0)
    return Mlp(4, 3, hidden=8)


def test_mlp_checks_input_width(mlp):
    assert mlp(torch.zeros(5, 4)).shape == (5, 3)
    with pytest.raises(ShapeError):
        mlp(torch.zeros(5, 3))


def test_layer_norm_can_be_disabled():
    block = Mlp(2, 2, hidden=4, layer_norm=False)
    assert block.norm is None


def test_backward_requires_scalar_loss(mlp):
    with pytest.raises(ContractError):
        backward(mlp(torch.ones(2, 4)).sum(dim=0), mlp.named_parameters())


def test_backward_rejects_nan_loss(mlp):
    loss = mlp(torch.ones(1, 4)).sum() * torch.tensor(float("nan"))
    with pytest.raises(NonFiniteError):
        backward(loss, mlp.named_parameters())


def test_backward_fills_every_gradient(mlp):
    grads = backward((mlp(torch.ones(2, 4)) ** 2).sum(), mlp.named_parameters())
    assert set(grads) == {name for name, _ in mlp.named_parameters()}
    assert all(p.grad is not None for p in mlp.parameters())


def test_adam_step_rejects_non_finite_gradient(mlp):
    optimizer = make_optimizer(mlp)
    backward((mlp(torch.ones(2, 4)) ** 2).sum(), mlp.named_parameters())
    mlp.hidden.weight.grad[0, 0] = float("inf")
    with pytest.raises(NonFiniteError):
        adam_step(optimizer, mlp, 1e-3)


def test_lr_schedule_endpoints():
    assert lr_schedule(0, 100) == pytest.approx(1e-3)
    assert lr_schedule(100, 100) == pytest.approx(1e-4)
    assert lr_schedule(50, 100) == pytest.approx(np.sqrt(1e-3 * 1e-4))
    assert lr_schedule(0, 0) == pytest.approx(1e-3)
    with pytest.raises(ContractError):
        lr_schedule(101, 100)
    with pytest.raises(ContractError):
        lr_schedule(-1, 100)


def test_gradient_check_on_double_mlp(mlp):
    shadow = shadow_f64(mlp)
    generator = torch.Generator().manual_seed(3)
    x = torch.randn(6, 4, dtype=torch.float64, generator=generator)
    weights = torch.randn(6, 3, dtype=torch.float64, generator=generator)

    def loss_fn():
        return (shadow(x) * weights).sum()

    worst = gradient_check(loss_fn, list(shadow.parameters()), samples=30, step=1e-6, floor=1e-3)
    assert worst < 1e-4


def test_checkpoint_round_trip(tmp_path, mlp):
    optimizer = make_optimizer(mlp)
    for _ in range(2):
        backward((mlp(torch.ones(2, 4)) ** 2).sum(), mlp.named_parameters())
        adam_step(optimizer, mlp, 1e-3)
    path = save_checkpoint(tmp_path / "ckpt" / "model.bin", mlp, {"note": "x"}, optimizer)
    header, blocks = load_checkpoint(path)
    assert header["note"] == "x"
    assert header["adam_step"] == 2
    assert "adam/hidden.weight/m" in blocks

    fresh = Mlp(4, 3, hidden=8)
    restore_module(fresh, blocks)
    x = torch.randn(3, 4)
    torch.testing.assert_close(fresh(x), mlp(x))

    fresh_optimizer = make_optimizer(fresh)
    restore_optimizer(fresh_optimizer, fresh, blocks, header["adam_step"])
    state = fresh_optimizer.state[fresh.hidden.weight]
    np.testing.assert_allclose(state["exp_avg"].numpy(), blocks["adam/hidden.weight/m"])
    assert float(state["step"]) == 2.0


def test_truncated_checkpoint_rejected(tmp_path, mlp):
    path = save_checkpoint(tmp_path / "model.bin", mlp)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ContractError):
        load_checkpoint(path)


def test_trailing_bytes_rejected(tmp_path, mlp):
    path = save_checkpoint(tmp_path / "model.bin", mlp)
    path.write_bytes(path.read_bytes() + b"\0\0\0\0")
    with pytest.raises(ContractError):
        load_checkpoint(path)


def test_checkpoint_version_checked(tmp_path, mlp):
    path = save_checkpoint(tmp_path / "model.bin", mlp)
    head, _, body = path.read_bytes().partition(b"\n")
    path.write_bytes(head.replace(b'"format_version": 1', b'"format_version": 99') + b"\n" + body)
    with pytest.raises(ContractError):
        load_checkpoint(path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.bin")


def test_restore_reports_missing_blocks(mlp):
    with pytest.raises(ContractError):
        restore_module(mlp, {})
