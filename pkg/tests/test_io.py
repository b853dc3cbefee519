from dataclasses import replace

import numpy as np
import pytest

from motionmae import checkpoint as CK
from motionmae import lgi_former as E
from motionmae import pretrain as PT
from motionmae import tensorio as TIO
from motionmae.errors import BadFormat, ShapeMismatch, TruncatedFile, VersionMismatch

CFG = E.EncoderConfig(depth=1, dim=16, heads=2, grid=(2, 2, 2), region=(1, 2, 2), cube=(2, 4, 4))
DEC = PT.DecoderConfig(depth=1, dim=8, heads=2)


def _save_pretrain(path, cfg=CFG):
    params = PT.init_pretrain_params(cfg, DEC, 0)
    CK.save_checkpoint(path, params, {"kind": "pretrain", "encoder": cfg.to_dict(), "decoder": DEC.to_dict()})
    return params


def test_checkpoint_round_trip(tmp_path):
    path = tmp_path / "a.mmck"
    tensors = {"x": np.arange(6, dtype=np.float32).reshape(2, 3), "y": np.array([1, 2], np.int64),
               "z": np.zeros((0, 4)), "flag": np.array([True, False])}
    CK.save_checkpoint(path, tensors, {"epoch": 3})
    back, meta = CK.load_checkpoint(path)
    assert meta == {"epoch": 3}
    assert set(back) == set(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype and np.array_equal(back[k], tensors[k])


def test_checkpoint_bytes_are_deterministic(tmp_path):
    t = {"b": np.ones(3), "a": np.zeros(2)}
    CK.save_checkpoint(tmp_path / "1", t, {"k": 1, "j": 2})
    CK.save_checkpoint(tmp_path / "2", dict(reversed(list(t.items()))), {"j": 2, "k": 1})
    assert (tmp_path / "1").read_bytes() == (tmp_path / "2").read_bytes()


@pytest.mark.parametrize("cut", [3, 10, 30, -1])
def test_truncated_checkpoint(tmp_path, cut):
    path = tmp_path / "a.mmck"
    _save_pretrain(path)
    data = path.read_bytes()
    path.write_bytes(data[:cut])
    with pytest.raises(TruncatedFile):
        CK.load_checkpoint(path)


def test_not_a_checkpoint(tmp_path):
    path = tmp_path / "junk"
    path.write_bytes(b"hello world")
    with pytest.raises(BadFormat):
        CK.load_checkpoint(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "a.mmck"
    _save_pretrain(path)
    data = bytearray(path.read_bytes())
    data[4] = 99
    path.write_bytes(bytes(data))
    with pytest.raises(VersionMismatch):
        CK.load_checkpoint(path)


def test_load_pretrain_encoder_for_finetune(tmp_path):
    path = tmp_path / "a.mmck"
    params = _save_pretrain(path)
    enc, cfg, meta = CK.load_encoder(path)
    assert cfg == CFG and meta["kind"] == "pretrain"
    assert set(enc) == set(E.encoder_shapes(CFG))
    assert all(np.array_equal(enc[k], params["encoder." + k]) for k in enc)
    # a different pooling is fine, a different architecture is not
    CK.load_encoder(path, replace(CFG, pool="local_mean"))
    with pytest.raises(VersionMismatch, match="depth"):
        CK.load_encoder(path, replace(CFG, depth=2))


def test_load_encoder_missing_tensor(tmp_path):
    path = tmp_path / "a.mmck"
    params = PT.init_pretrain_params(CFG, DEC, 0)
    del params["encoder.reps"]
    CK.save_checkpoint(path, params, {"encoder": CFG.to_dict()})
    with pytest.raises(ShapeMismatch, match="reps"):
        CK.load_encoder(path)


def test_load_encoder_wrong_shape(tmp_path):
    path = tmp_path / "a.mmck"
    params = PT.init_pretrain_params(CFG, DEC, 0)
    params["encoder.embed.b"] = np.zeros(3, np.float32)
    CK.save_checkpoint(path, params, {"encoder": CFG.to_dict()})
    with pytest.raises(ShapeMismatch):
        CK.load_encoder(path)


def test_config_required():
    with pytest.raises(VersionMismatch):
        CK.check_config({}, CFG)


def test_tensor_file_round_trip(tmp_path):
    arr = np.random.default_rng(0).random((2, 3, 4)).astype(np.float32)
    TIO.save_tensor(tmp_path / "t.bin", arr)
    assert np.array_equal(TIO.load_tensor(tmp_path / "t.bin"), arr)
    assert TIO.tensor_bytes(arr) == (tmp_path / "t.bin").read_bytes()
    with pytest.raises(TypeError):
        TIO.save_tensor(tmp_path / "c.bin", np.zeros(2, np.complex64))


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, (5, 7, 3)).astype(np.uint8)
    TIO.write_ppm(tmp_path / "a.ppm", img)
    back = TIO.read_ppm(tmp_path / "a.ppm")
    assert np.array_equal(np.rint(back * 255).astype(np.uint8), img)
    (tmp_path / "b.ppm").write_bytes((tmp_path / "a.ppm").read_bytes()[:-5])
    with pytest.raises(TruncatedFile):
        TIO.read_ppm(tmp_path / "b.ppm")


def test_frame_dir_and_load_video(tmp_path):
    frames = np.random.default_rng(2).integers(0, 256, (3, 4, 4, 3)).astype(np.uint8)
    TIO.write_frame_dir(tmp_path / "v", frames)
    v = TIO.load_video(tmp_path / "v")
    assert v.shape == (3, 4, 4, 3)
    TIO.save_tensor(tmp_path / "bad.bin", np.zeros((3, 4)))
    with pytest.raises(ShapeMismatch):
        TIO.load_video(tmp_path / "bad.bin")
    (tmp_path / "empty").mkdir()
    with pytest.raises(FileNotFoundError):
        TIO.read_frame_dir(tmp_path / "empty")
