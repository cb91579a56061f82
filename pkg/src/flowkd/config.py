"""Run configuration: YAML file, defaults, dotted overrides, validation."""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Any

import yaml

from .data import AugmentSpec, DataError, Dataset, load_cifar10, make_blob_draw, make_blobs, make_pattern_images
from .distill import METHODS, DistillPlan, Supervision, make_plan
from .optim import OptimizerConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


# Training defaults:
# Adam, lr 1e-3, batch 128, alpha_init 100, gamma 0.7, contrastive margin 1
# weighted 0.1, soft-label temperature 2, flip + 4-pixel padded crops.
DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out": "runs/default",
    "threads": 1,
    "f32": False,
    "dataset": {
        "kind": "patterns",
        "seed": 0,
        "classes": 8,
        "n_per_class": 60,
        "test_per_class": 40,
        "size": 16,
        "channels": 3,
        "noise": 1.0,
        "dim": 2,
        "sigma": 0.5,
        "center_distance": 4.0,
        "dir": None,
        "subset_per_class": None,
    },
    "teacher": {"kind": "model", "arch": "cnn1-h", "checkpoint": None, "hog_bins": 9},
    "aux": {"arch": "cnn1-a", "checkpoint": None},
    "student": {"arch": "cnn1"},
    "distill": {
        "method": "proposed",
        "alpha_init": 100.0,
        "gamma": 0.7,
        "degree": 1,
        "temperature": 2.0,
        "supervision": "none",
        "margin": 1.0,
        "supervision_weight": None,
        "frozen_student": False,
    },
    "train": {
        "epochs": 50,
        "batch_size": 128,
        "optimizer": "adam",
        "lr": 0.001,
        "eval_every": 1,
        "top_k": 100,
        "checkpoint_every": 0,
        "record_wallclock": False,
    },
    "augment": {"enabled": True, "hflip_prob": 0.5, "crop_padding": 4, "rotation_deg": None},
    "eval": {"checkpoint": None},
    "flow": {"models": [], "batch_size": 128, "kernel": "tstudent"},
}


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in (update or {}).items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{where}' must be a mapping")
            out[key] = _merge(out[key], value, where + ".")
        else:
            out[key] = value
    return out


def set_dotted(cfg: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = cfg
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise ConfigError(f"unknown config key '{dotted}'")
        node = node[key]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key '{dotted}'")
    node[keys[-1]] = value


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> dict:
    """Defaults <- YAML file <- dotted-key overrides (later wins)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        cfg = _merge(cfg, loaded)
    for key, value in (overrides or {}).items():
        set_dotted(cfg, key, value)
    return cfg


def _need(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def validate(cfg: dict, command: str) -> None:
    """Range and path checks; raises ConfigError before anything is written."""
    d, t, dist = cfg["dataset"], cfg["train"], cfg["distill"]
    _need(isinstance(cfg["seed"], int) and cfg["seed"] >= 0, "seed must be a non-negative integer")
    _need(isinstance(cfg["threads"], int) and cfg["threads"] >= 1, "threads must be >= 1")
    _need(d["kind"] in ("patterns", "blobs", "cifar10"), f"unknown dataset kind '{d['kind']}'")
    if d["kind"] == "cifar10":
        _need(d["dir"] is not None and Path(d["dir"]).is_dir(), f"CIFAR-10 directory not found: {d['dir']}")
    else:
        _need(d["n_per_class"] >= 1 and d["classes"] >= 2, "need >= 2 classes and >= 1 sample per class")
        _need(d["noise"] >= 0 and d["sigma"] > 0, "noise must be >= 0 and sigma > 0")
    _need(isinstance(t["epochs"], int) and t["epochs"] >= 0, "train.epochs must be a non-negative integer")
    _need(t["batch_size"] >= 2, "train.batch_size must be >= 2")
    _need(t["lr"] > 0, "train.lr must be positive")
    _need(t["optimizer"] in ("adam", "sgd"), "train.optimizer must be adam or sgd")
    _need(t["top_k"] >= 1, "train.top_k must be >= 1")
    _need(0.0 < dist["gamma"] < 1.0, "distill.gamma must lie in (0, 1)")
    _need(dist["alpha_init"] > 0, "distill.alpha_init must be positive")
    _need(dist["degree"] >= 1, "distill.degree must be >= 1")
    _need(dist["method"] in METHODS, f"distill.method must be one of {METHODS}")
    _need(dist["supervision"] in ("none", "contrastive", "crossentropy"), "unknown distill.supervision")
    _need(0.0 <= cfg["augment"]["hflip_prob"] <= 1.0, "augment.hflip_prob must be in [0, 1]")
    _need(cfg["augment"]["crop_padding"] >= 0, "augment.crop_padding must be >= 0")
    _need(cfg["teacher"]["kind"] in ("model", "hog"), "teacher.kind must be model or hog")

    def exists(p, what):
        _need(p is not None and Path(p).is_file(), f"{what} checkpoint not found: {p}")

    if command == "train-aux" and cfg["teacher"]["kind"] == "model":
        exists(cfg["teacher"]["checkpoint"], "teacher")
    if command == "distill":
        if cfg["aux"]["checkpoint"] is not None:
            exists(cfg["aux"]["checkpoint"], "auxiliary")
        elif cfg["teacher"]["kind"] == "model":
            exists(cfg["teacher"]["checkpoint"], "teacher")
    if command == "eval":
        exists(cfg["eval"]["checkpoint"], "evaluation")
    if command == "flow-report":
        models = cfg["flow"]["models"]
        _need(1 <= len(models) <= 2, "flow.models must name one or two models")
        for m in models:
            if m != "hog":
                exists(m, "flow-report model")


def load_dataset(cfg: dict) -> tuple[Dataset, Dataset]:
    d = cfg["dataset"]
    if d["kind"] == "patterns":
        common = dict(classes=d["classes"], size=d["size"], channels=d["channels"], noise=d["noise"], seed=d["seed"])
        return (make_pattern_images(d["n_per_class"], draw=0, split="train", **common),
                make_pattern_images(d["test_per_class"], draw=1, split="test", **common))
    if d["kind"] == "blobs":
        train = make_blobs(d["n_per_class"], d["classes"], d["dim"], d["sigma"], d["seed"], d["center_distance"])
        test = make_blob_draw(d["test_per_class"], d["classes"], d["dim"], d["sigma"], d["seed"], 1,
                              d["center_distance"])
        return train, test
    try:
        return load_cifar10(d["dir"], d["subset_per_class"], d["seed"], d.get("test_per_class"))
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc


def train_config(cfg: dict, out_dir: Path | None = None) -> TrainConfig:
    t, a = cfg["train"], cfg["augment"]
    aug = None
    frozen = cfg["distill"]["frozen_student"]
    # the frozen diagnostic replays identical batches every epoch
    if a["enabled"] and not frozen:
        aug = AugmentSpec(a["hflip_prob"], a["crop_padding"], a["rotation_deg"], seed=cfg["seed"])
    return TrainConfig(
        epochs=t["epochs"], batch_size=t["batch_size"],
        optimizer=OptimizerConfig(kind=t["optimizer"], learning_rate=t["lr"], seed=cfg["seed"]),
        augment=aug, seed=cfg["seed"], top_k=t["top_k"], eval_every=t["eval_every"],
        frozen_student=frozen, shuffle=not frozen,
        record_wallclock=t["record_wallclock"], checkpoint_every=t["checkpoint_every"], out_dir=out_dir)


def distill_plan(cfg: dict, n_teacher: int, n_student: int) -> DistillPlan:
    d = cfg["distill"]
    sup = Supervision(d["supervision"], d["margin"], d["supervision_weight"])
    return make_plan(d["method"], n_teacher, n_student, alpha_init=d["alpha_init"], gamma=d["gamma"],
                     supervision=sup, degree=d["degree"], temperature=d["temperature"])


def dump(cfg: dict, path: Path) -> None:
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
