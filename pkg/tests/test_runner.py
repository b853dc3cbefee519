import copy

import numpy as np
import pytest

from motionmae import lgi_former as E
from motionmae import pretrain as PT
from motionmae import runner as R
from motionmae import training as TR
from motionmae.acceptance import tiny_run_config
from motionmae.config import parse_config
from motionmae.errors import ConfigError
from motionmae.synthetic import SyntheticSpec, generate_synthetic
from motionmae.tensorio import save_tensor, write_frame_dir

CFG = E.preset("desk", depth=1, dim=16, heads=2)
DEC = PT.DecoderConfig(depth=1, dim=8, heads=2)


class _Stop(Exception):
    pass


def test_resume_reproduces_uninterrupted_run():
    clips, _ = generate_synthetic(SyntheticSpec(), 0, 16)
    kw = dict(rho=0.75, lam=0.5, seed=3, epochs=3, batch_size=8, base_lr=1e-2)
    full, _, means = TR.pretrain_run(CFG, DEC, clips, **kw)
    snap = {}

    def stop(epoch, params, opt, m):
        snap["params"], snap["opt"] = copy.deepcopy(params), copy.deepcopy(opt)
        raise _Stop

    with pytest.raises(_Stop):
        TR.pretrain_run(CFG, DEC, clips, **kw, on_epoch=stop)
    resumed, _, tail = TR.pretrain_run(CFG, DEC, clips, **kw, params=snap["params"], opt=snap["opt"], start_epoch=1)
    assert tail == means[1:]
    assert all(np.array_equal(full[k], resumed[k]) for k in full)


def test_runner_resume_gives_identical_checkpoint(tmp_path, monkeypatch):
    a = parse_config(tiny_run_config(str(tmp_path / "a")))
    R.run(a)
    real = R.save_checkpoint

    def once(*args, **kw):
        real(*args, **kw)
        raise _Stop

    monkeypatch.setattr(R, "save_checkpoint", once)
    with pytest.raises(_Stop):
        R.run(parse_config(tiny_run_config(str(tmp_path / "b"))))
    monkeypatch.setattr(R, "save_checkpoint", real)
    cfg = tiny_run_config(str(tmp_path / "c"))
    cfg["paths"]["init"] = str(tmp_path / "b" / R.PRETRAIN_CKPT)
    summary = R.run(parse_config(cfg))
    assert summary["start_epoch"] == 1
    assert (tmp_path / "a" / R.PRETRAIN_CKPT).read_bytes() == (tmp_path / "c" / R.PRETRAIN_CKPT).read_bytes()


def test_resume_rejects_other_architecture(tmp_path):
    R.run(parse_config(tiny_run_config(str(tmp_path / "a"))))
    cfg = tiny_run_config(str(tmp_path / "b"))
    cfg["model"]["dim"] = 32
    cfg["paths"]["init"] = str(tmp_path / "a" / R.PRETRAIN_CKPT)
    with pytest.raises(Exception, match="dim"):
        R.run(parse_config(cfg))


def test_repeat_runs_are_byte_identical(tmp_path):
    for name in ("a", "b"):
        R.run(parse_config(tiny_run_config(str(tmp_path / name))))
    for f in (R.PRETRAIN_CKPT, "pretrain_log.jsonl"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def _base(mode="finetune", **kw):
    d = {"mode": mode, "seed": 0, "model": {"preset": "desk", "region": [2, 2, 2]}}
    d.update(kw)
    return d


def test_load_data_from_tensor_files(tmp_path):
    clips, labels = generate_synthetic(SyntheticSpec(), 0, 6)
    save_tensor(tmp_path / "c.bin", clips)
    save_tensor(tmp_path / "l.bin", labels)
    rc = parse_config(_base(data={"clips": str(tmp_path / "c.bin"), "labels": str(tmp_path / "l.bin"),
                                  "classes": [1, 3]}))
    c, lab, ids = R.load_data(rc)
    assert len(c) == 3 and lab.tolist() == [0, 1, 0] and len(ids) == 3
    save_tensor(tmp_path / "bad.bin", np.zeros((2, 3)))
    with pytest.raises(ConfigError):
        R.load_data(parse_config(_base(data={"clips": str(tmp_path / "bad.bin")})))


def test_load_data_requires_a_source():
    with pytest.raises(ConfigError):
        R.load_data(parse_config(_base()))


def test_clip_shape_checked(tmp_path):
    rc = parse_config(_base(data={"synthetic": {"size": 16}, "n": 4}, paths={"out": str(tmp_path)}))
    with pytest.raises(ConfigError, match="expects"):
        R.run_finetune(rc)


def test_eval_on_frame_directories(tmp_path):
    ft = _base(model={"preset": "desk", "region": [2, 2, 2], "depth": 1, "dim": 16, "heads": 2},
               train={"epochs": 1, "batch_size": 4},
               data={"synthetic": {}, "n": 8, "classes": [0, 1]}, paths={"out": str(tmp_path / "ft")})
    ckpt = R.run(parse_config(ft))["checkpoint"]
    clips, labels = generate_synthetic(SyntheticSpec(), 5, 2, classes=(0, 1))
    rows = ["name,label"]
    for i, (c, lab) in enumerate(zip(clips, labels)):
        long = np.concatenate([c, c])  # 16 frames, so two clip offsets exist
        write_frame_dir(tmp_path / "vids" / f"v{i}", long)
        rows.append(f"v{i},{lab}")
    (tmp_path / "labels.csv").write_text("\n".join(rows) + "\n")
    ev = _base("eval", data={"videos": str(tmp_path / "vids"), "labels": str(tmp_path / "labels.csv")},
               paths={"out": str(tmp_path / "ev"), "checkpoint": ckpt})
    m = R.run(parse_config(ev))
    assert m["n"] == 2 and np.array(m["confusion"]).sum() == 2


def test_eval_needs_finetuned_checkpoint(tmp_path):
    R.run(parse_config(tiny_run_config(str(tmp_path / "a"))))
    ev = _base("eval", data={"synthetic": {}, "n": 2},
               paths={"out": str(tmp_path / "ev"), "checkpoint": str(tmp_path / "a" / R.PRETRAIN_CKPT)})
    with pytest.raises(ConfigError, match="fine-tuned"):
        R.run(parse_config(ev))


def test_image_grid_layout():
    rows = [np.zeros((2, 4, 4, 3)), np.ones((2, 4, 4, 3))]
    img = R.image_grid(rows, gap=1)
    assert img.shape == (9, 9, 3)
    assert img[5:, :4].min() == 1.0 and img[:4, :4].max() == 0.0
