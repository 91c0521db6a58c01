import pytest
import torch

from checkpoint_manager import CheckpointManager
from tensor_core import Mlp, load_checkpoint


@pytest.fixture
def network():
    torch.manual_seed(0)
    return Mlp(3, 2, hidden=4)


def test_save_writes_log_and_header(tmp_path, network):
    manager = CheckpointManager(tmp_path / "run")
    path = manager.save(network, 10, {"dt": 0.002}, metrics={"train_loss": 0.5})
    assert path.name == "ckpt_00000010.ckpt"
    header, _ = load_checkpoint(path)
    assert header["step"] == 10
    assert header["dt"] == 0.002
    log = manager.get_log()
    assert log[-1]["file"] == path.name
    assert log[-1]["metrics"] == {"train_loss": 0.5}
    assert manager.verify(path) == (True, "Checkpoint verified")


def test_tampered_checkpoint_is_skipped(tmp_path, network):
    manager = CheckpointManager(tmp_path)
    first = manager.save(network, 1)
    second = manager.save(network, 2)
    data = bytearray(second.read_bytes())
    data[-1] ^= 0xFF
    second.write_bytes(bytes(data))
    valid, message = manager.verify(second)
    assert not valid
    assert "Checksum" in message
    assert manager.latest() == first


def test_unreadable_checkpoint_is_invalid(tmp_path, network):
    manager = CheckpointManager(tmp_path)
    stray = manager.path_for(5)
    stray.write_bytes(b'{"format_version": 1, "blocks": [{"name": "w", "shape": [4]}]}\n')
    valid, message = manager.verify(stray)
    assert not valid
    assert message.startswith("Unreadable")
    assert manager.latest() is None
    assert manager.verify(tmp_path / "absent.ckpt")[0] is False


def test_prune_keeps_newest(tmp_path, network):
    manager = CheckpointManager(tmp_path, max_checkpoints=2)
    for step in (1, 2, 3, 4):
        manager.save(network, step)
    assert [info["step"] for info in manager.list_checkpoints()] == [4, 3]
    assert manager.latest() == manager.path_for(4)


def test_resaving_a_step_replaces_its_log_entry(tmp_path, network):
    manager = CheckpointManager(tmp_path)
    manager.save(network, 3)
    manager.save(network, 3)
    assert [entry["file"] for entry in manager.get_log()] == ["ckpt_00000003.ckpt"]
