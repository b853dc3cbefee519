"""JSON run configuration with strict schema validation.

A run file is one JSON object. ``seed`` and the model ``region`` are always
required; ``rho`` and ``lambda`` are required whenever the mode uses them. No
value of scientific consequence is ever filled in silently. Unknown keys are
rejected so that typos fail loudly.

Example::

    {
      "mode": "pretrain",
      "seed": 0,
      "rho": 0.75,
      "lambda": 0.5,
      "model": {"preset": "desk", "region": [2, 2, 2]},
      "decoder": {"depth": 1, "dim": 32, "heads": 2},
      "train": {"epochs": 5, "batch_size": 32, "lr": 0.0015},
      "data": {"synthetic": {"size": 32, "frames": 8}, "n": 2000},
      "paths": {"out": "runs/pt"}
    }
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import lgi_former as E
from .errors import ConfigError
from .pretrain import DESK_DECODER, DecoderConfig
from .synthetic import SyntheticSpec

MODES = ("pretrain", "finetune", "eval", "flops", "reconstruct")
NORMS = ("raw", "per_cube")

_TOP = {"mode", "seed", "rho", "lambda", "model", "decoder", "train", "data", "paths", "num_classes"}
_MODEL = {"preset", "region", "variant", "grid", "cube", "depth", "dim", "heads", "pool",
          "vit_global", "intra", "inter", "lgi", "mlp_ratio"}
_DECODER = {"depth", "dim", "heads", "mlp_ratio"}
_TRAIN = {"epochs", "batch_size", "lr", "warmup_epochs", "norm", "train_encoder", "num_clips", "stride"}
_DATA = {"synthetic", "n", "seed", "classes", "clips", "labels", "videos"}
_PATHS = {"out", "checkpoint", "init", "log"}

# modes that need each field
_NEEDS_RHO = {"pretrain", "reconstruct"}
_NEEDS_LAMBDA = {"pretrain"}


def _check_keys(section: str, d, allowed: set) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"{section}: expected an object, got {type(d).__name__}")
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"{section}: unknown key(s) {sorted(extra)}; allowed: {sorted(allowed)}")
    return d


def _num(section, name, v, lo=None, hi=None, integer=False, lo_open=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{section}.{name}: expected a number, got {v!r}")
    if integer and int(v) != v:
        raise ConfigError(f"{section}.{name}: expected an integer, got {v}")
    if lo is not None and (v <= lo if lo_open else v < lo):
        raise ConfigError(f"{section}.{name}={v} is below the allowed range ({'>' if lo_open else '>='} {lo})")
    if hi is not None and v > hi:
        raise ConfigError(f"{section}.{name}={v} is above the allowed range (<= {hi})")
    return int(v) if integer else float(v)


def _triple(section, name, v):
    if not (isinstance(v, (list, tuple)) and len(v) == 3):
        raise ConfigError(f"{section}.{name}: expected three integers, got {v!r}")
    return tuple(_num(section, name, x, lo=1, integer=True) for x in v)


@dataclass
class TrainSettings:
    epochs: int = 1
    batch_size: int = 32
    lr: float = 1.5e-3
    warmup_epochs: int = 1
    norm: str = "per_cube"
    train_encoder: bool = True
    num_clips: int = 2
    stride: int = 1


@dataclass
class DataSettings:
    synthetic: SyntheticSpec | None = None
    n: int = 0
    seed: int | None = None
    classes: tuple[int, ...] | None = None
    clips: str | None = None
    labels: str | None = None
    videos: str | None = None


@dataclass
class RunConfig:
    mode: str
    seed: int
    encoder: E.EncoderConfig
    decoder: DecoderConfig
    rho: float | None = None
    lam: float | None = None
    num_classes: int | None = None
    train: TrainSettings = field(default_factory=TrainSettings)
    data: DataSettings = field(default_factory=DataSettings)
    paths: dict[str, str] = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def data_seed(self) -> int:
        return self.seed if self.data.seed is None else self.data.seed

    def path(self, key: str) -> Path:
        if key not in self.paths:
            raise ConfigError(f"paths.{key} is required for mode {self.mode!r}")
        return Path(self.paths[key])

    def to_dict(self) -> dict:
        return self.raw


def _model(d: dict) -> E.EncoderConfig:
    d = _check_keys("model", d, _MODEL)
    if "preset" not in d:
        raise ConfigError(f"model.preset is required; choose from {sorted(E.PRESETS)}")
    if "region" not in d:
        raise ConfigError("model.region is required (region size in tokens, [t, h, w])")
    overrides: dict = {"region": _triple("model", "region", d["region"])}
    if "variant" in d:
        if d["variant"] not in E.VARIANTS:
            raise ConfigError(f"model.variant must be one of {sorted(E.VARIANTS)}")
        overrides.update(E.VARIANTS[d["variant"]])
    for k in ("grid", "cube"):
        if k in d:
            overrides[k] = _triple("model", k, d[k])
    for k in ("depth", "dim", "heads"):
        if k in d:
            overrides[k] = _num("model", k, d[k], lo=1 if k != "depth" else 0, integer=True)
    if "mlp_ratio" in d:
        overrides["mlp_ratio"] = _num("model", "mlp_ratio", d["mlp_ratio"], lo=1)
    for k in ("vit_global", "intra", "inter", "lgi"):
        if k in d:
            if not isinstance(d[k], bool):
                raise ConfigError(f"model.{k}: expected true/false")
            overrides[k] = d[k]
    if "pool" in d:
        overrides["pool"] = d["pool"]
    elif overrides.get("vit_global"):
        overrides["pool"] = "local_mean"
    try:
        return E.preset(d["preset"], **overrides)
    except ConfigError as e:
        raise ConfigError(f"model: {e}") from None


def _decoder(d: dict | None, preset_name: str) -> DecoderConfig:
    base = DESK_DECODER if preset_name == "desk" else DecoderConfig()
    if d is None:
        return base
    d = _check_keys("decoder", d, _DECODER)
    kw = {k: _num("decoder", k, v, lo=0 if k == "depth" else 1, integer=k != "mlp_ratio") for k, v in d.items()}
    dec = replace(base, **kw)
    if dec.dim % dec.heads:
        raise ConfigError(f"decoder.dim {dec.dim} is not divisible by {dec.heads} heads")
    return dec


def _train(d: dict | None) -> TrainSettings:
    t = TrainSettings()
    if d is None:
        return t
    d = _check_keys("train", d, _TRAIN)
    for k in ("epochs", "batch_size", "warmup_epochs", "num_clips", "stride"):
        if k in d:
            setattr(t, k, _num("train", k, d[k], lo=0 if k == "warmup_epochs" else 1, integer=True))
    if "lr" in d:
        t.lr = _num("train", "lr", d["lr"], lo=0, hi=1, lo_open=True)
    if "norm" in d:
        if d["norm"] not in NORMS:
            raise ConfigError(f"train.norm must be one of {NORMS}")
        t.norm = d["norm"]
    if "train_encoder" in d:
        if not isinstance(d["train_encoder"], bool):
            raise ConfigError("train.train_encoder: expected true/false")
        t.train_encoder = d["train_encoder"]
    return t


def _data(d: dict | None) -> DataSettings:
    s = DataSettings()
    if d is None:
        return s
    d = _check_keys("data", d, _DATA)
    if "synthetic" in d:
        try:
            s.synthetic = SyntheticSpec.from_dict(d["synthetic"])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"data.synthetic: {e}") from None
        if "n" not in d:
            raise ConfigError("data.n (number of synthetic clips) is required with data.synthetic")
    if "n" in d:
        s.n = _num("data", "n", d["n"], lo=0, integer=True)
    if "seed" in d:
        s.seed = _num("data", "seed", d["seed"], lo=0, integer=True)
    if "classes" in d:
        s.classes = tuple(_num("data", "classes", c, lo=0, integer=True) for c in d["classes"])
    for k in ("clips", "labels", "videos"):
        if k in d:
            s.__setattr__(k, str(d[k]))
    if s.synthetic is not None and s.clips is not None:
        raise ConfigError("data: give either synthetic or clips, not both")
    return s


def parse_config(d: dict) -> RunConfig:
    d = _check_keys("config", d, _TOP)
    mode = d.get("mode")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if "seed" not in d:
        raise ConfigError("seed is required")
    seed = _num("config", "seed", d["seed"], lo=0, integer=True)
    if "model" not in d:
        raise ConfigError("model is required (at least preset and region)")
    enc = _model(d["model"])
    dec = _decoder(d.get("decoder"), d["model"]["preset"])
    rho = lam = None
    if "rho" in d:
        rho = _num("config", "rho", d["rho"], lo=0, hi=1, lo_open=True)
        if rho >= 1:
            raise ConfigError("rho must be < 1 (some tokens must stay visible)")
    elif mode in _NEEDS_RHO:
        raise ConfigError(f"rho (masking ratio) is required for mode {mode!r}")
    if "lambda" in d:
        lam = _num("config", "lambda", d["lambda"], lo=0, hi=1)
    elif mode in _NEEDS_LAMBDA:
        raise ConfigError(f"lambda (appearance loss weight) is required for mode {mode!r}")
    num_classes = None
    if "num_classes" in d:
        num_classes = _num("config", "num_classes", d["num_classes"], lo=2, integer=True)
    paths = _check_keys("paths", d.get("paths", {}), _PATHS)
    return RunConfig(mode=mode, seed=seed, encoder=enc, decoder=dec, rho=rho, lam=lam,
                     num_classes=num_classes, train=_train(d.get("train")), data=_data(d.get("data")),
                     paths={k: str(v) for k, v in paths.items()}, raw=d)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    return parse_config(d)


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.raw, indent=2, sort_keys=True)


def synthetic_dict(spec: SyntheticSpec) -> dict:
    return asdict(spec)
