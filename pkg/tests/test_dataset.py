import json

import numpy as np
import pytest

from conftest import make_record
from dataset import (MAX_EXACT_ID, DatasetError, DatasetHeader, read_dataset, record_history, record_width,
                     split_by_episode, write_dataset)


def _header(h=3):
    return DatasetHeader(h=h, dt=0.002, scene_hash="abc123", scene_path="scenes/floor.json")


def _rewrite_header(path, **changes):
    head, _, body = path.read_bytes().partition(b"\n")
    data = json.loads(head)
    data.update(changes)
    path.write_bytes(json.dumps(data).encode("utf-8") + b"\n" + body)


def test_record_width():
    assert record_width(3) == 57


def test_write_read_round_trip(tmp_path):
    records = [make_record(episode=e, step=s) for e in range(2) for s in range(3, 6)]
    path = write_dataset(tmp_path / "data" / "train.bin", _header(), records)
    header, loaded, contacts = read_dataset(path)
    assert header.record_count == 6
    assert header.contact_count == 4
    assert header.scene_path == "scenes/floor.json"
    assert [(r.episode, r.step) for r in loaded] == [(r.episode, r.step) for r in records]
    for original, copy in zip(records, loaded):
        np.testing.assert_allclose(copy.poses, original.poses, atol=1e-7)
        np.testing.assert_allclose(copy.action.as_array(), original.action.as_array(), rtol=1e-6)
        assert copy.contact == original.contact
        assert copy.contacts == original.contacts
    assert contacts[1] == ((0, 12), (1, 13))
    assert contacts[0] == ()


def test_empty_dataset(tmp_path):
    path = write_dataset(tmp_path / "empty.bin", _header(), [])
    header, records, _ = read_dataset(path)
    assert header.record_count == 0
    assert records == []


def test_trailing_bytes_rejected(tmp_path):
    path = write_dataset(tmp_path / "d.bin", _header(), [make_record()])
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(DatasetError):
        read_dataset(path)


def test_unknown_header_field_rejected(tmp_path):
    path = write_dataset(tmp_path / "d.bin", _header(), [make_record()])
    _rewrite_header(path, colour="blue")
    with pytest.raises(DatasetError):
        read_dataset(path)


def test_version_mismatch_rejected(tmp_path):
    path = write_dataset(tmp_path / "d.bin", _header(), [make_record()])
    _rewrite_header(path, format_version=2)
    with pytest.raises(DatasetError):
        read_dataset(path)


def test_history_length_mismatch_on_write(tmp_path):
    with pytest.raises(DatasetError):
        write_dataset(tmp_path / "d.bin", _header(h=2), [make_record(h=3)])


def test_contact_lists_must_align(tmp_path):
    with pytest.raises(DatasetError):
        write_dataset(tmp_path / "d.bin", _header(), [make_record()], contacts=[])


def test_missing_dataset(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_dataset(tmp_path / "none.bin")


def test_split_keeps_episodes_whole():
    records = [make_record(episode=e, step=s) for e in range(20) for s in range(3, 8)]
    train, val = split_by_episode(records, fraction=0.2, seed=3)
    train_episodes = {r.episode for r in train}
    val_episodes = {r.episode for r in val}
    assert len(val_episodes) == 4
    assert not train_episodes & val_episodes
    assert len(train) + len(val) == len(records)
    assert split_by_episode(records, fraction=0.2, seed=3)[1][0].episode == val[0].episode


def test_split_of_single_episode_keeps_everything():
    records = [make_record(step=s) for s in range(3, 8)]
    train, val = split_by_episode(records, fraction=0.5)
    assert len(train) == 5 and val == []


def test_record_history_keeps_recorded_twist():
    record = make_record(step=4, velocity=(0.02, 0.0, -0.01))
    history = record_history(record, dt=0.002)
    assert history.h == 3
    np.testing.assert_array_equal(history.current.twist.as_array(), record.twist)
    for frame in history.frames[1:]:
        np.testing.assert_allclose(frame.twist.linear, [0.02, 0.0, -0.01], atol=1e-9)
    np.testing.assert_allclose(history.preceding.position, record.poses[3, :3])


@pytest.mark.parametrize("kwargs", [{"episode": 2 ** 24 + 1}, {"step": 2 ** 24 + 3}, {"episode": -1}])
def test_ids_beyond_f32_precision_rejected(tmp_path, kwargs):
    with pytest.raises(DatasetError):
        write_dataset(tmp_path / "d.bin", _header(), [make_record(**kwargs)])


def test_largest_exact_ids_round_trip(tmp_path):
    path = write_dataset(tmp_path / "d.bin", _header(), [make_record(episode=MAX_EXACT_ID, step=MAX_EXACT_ID - 1)])
    _, (record,), _ = read_dataset(path)
    assert (record.episode, record.step) == (MAX_EXACT_ID, MAX_EXACT_ID - 1)
