import struct

import numpy as np
import pytest

from advldm import checkpoint as ckpt
from advldm import ldm
from advldm.rng import Rng


@pytest.fixture
def model():
    return ldm.init_params(Rng(5)), ldm.make_schedule()


def test_round_trip_is_bit_exact(tmp_path, model):
    params, schedule = model
    path = tmp_path / "m.mstf"
    ckpt.save_checkpoint(params, schedule, path)
    loaded, sched2 = ckpt.load_checkpoint(path)
    assert loaded.equal(params)
    assert np.array_equal(sched2.beta, schedule.beta)
    assert np.array_equal(sched2.alpha_bar, schedule.alpha_bar)
    # and saving again reproduces the same bytes
    ckpt.save_checkpoint(loaded, sched2, tmp_path / "again.mstf")
    assert path.read_bytes() == (tmp_path / "again.mstf").read_bytes()


def test_header_layout(tmp_path):
    path = tmp_path / "t.mstf"
    ckpt.write_tensors(path, {"ab": np.array([[1.0, 2.0, 3.0]])})
    raw = path.read_bytes()
    expected = (
        b"MSTF" + struct.pack("<II", 1, 1) + struct.pack("<I", 2) + b"ab"
        + struct.pack("<I", 2) + struct.pack("<QQ", 1, 3) + struct.pack("<3d", 1.0, 2.0, 3.0)
    )
    assert raw == expected


def test_truncated_file_rejected(tmp_path, model):
    path = tmp_path / "m.mstf"
    ckpt.save_checkpoint(*model, path)
    data = path.read_bytes()
    for cut in (3, 20, len(data) - 1):
        (tmp_path / "cut.mstf").write_bytes(data[:cut])
        with pytest.raises(ckpt.CheckpointError, match="truncated|magic"):
            ckpt.load_checkpoint(tmp_path / "cut.mstf")


def test_bad_magic_and_version(tmp_path, model):
    path = tmp_path / "m.mstf"
    ckpt.save_checkpoint(*model, path)
    data = bytearray(path.read_bytes())
    bad = tmp_path / "bad.mstf"
    bad.write_bytes(b"XXXX" + bytes(data[4:]))
    with pytest.raises(ckpt.CheckpointError, match="magic"):
        ckpt.load_checkpoint(bad)
    data[4:8] = struct.pack("<I", 9)
    bad.write_bytes(bytes(data))
    with pytest.raises(ckpt.CheckpointError, match="version"):
        ckpt.load_checkpoint(bad)


def test_mismatched_architecture_names_tensor(tmp_path, model):
    params, schedule = model
    tensors = {name: params[name] for name, _ in ldm.ARCHITECTURE}
    tensors["dec.conv1.w"] = np.zeros((8, 32, 3, 3))
    tensors["beta"], tensors["alpha_bar"] = schedule.beta, schedule.alpha_bar
    path = tmp_path / "corrupt.mstf"
    ckpt.write_tensors(path, tensors)
    with pytest.raises(ckpt.CheckpointError, match="dec.conv1.w"):
        ckpt.load_checkpoint(path)

    tensors["dec.conv1.w"] = params["dec.conv1.w"]
    del tensors["den.temb.b"]
    ckpt.write_tensors(path, tensors)
    with pytest.raises(ckpt.CheckpointError, match="den.temb.b|den.conv2.w"):
        ckpt.load_checkpoint(path)


def test_no_partial_file_left_on_success(tmp_path, model):
    ckpt.save_checkpoint(*model, tmp_path / "m.mstf")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["m.mstf"]


def test_wrong_params_shape_rejected(model):
    params, _ = model
    with pytest.raises(ValueError, match="enc.conv1.w"):
        params.replace(**{"enc.conv1.w": np.zeros((3, 3))})
