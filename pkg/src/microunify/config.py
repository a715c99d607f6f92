"""Line-oriented ``key = value`` experiment configs.

Example::

    seed = 0
    arch = fc(64,32) relu fc(64,64) relu fc(3,64)
    input = 32
    data = synthetic_classify
    train.epochs = 60
    constraint.method = unify
    constraint.block = 2x2
    constraint.ratio = 1.0
    layer.0.method = prune          # per-layer override
    layer.0.ratio = 0.5

``#`` starts a comment.  Relative paths resolve against the config file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .admm import AdmmConfig
from .blocking import BlockShape
from .data import Dataset, gen_synthetic, load_idx
from .nn import LOSSES, Model, TrainConfig
from .projection import METHODS, ConstraintError, ConstraintSpec, LayerConstraint

SEED_ENV = "MSU_SEED"


class ConfigError(ValueError):
    """A config line or field is invalid."""


def _none_or_int(v: str):
    return None if v.lower() in ("none", "full", "") else int(v)


_TRAIN_TYPES = {"epochs": int, "lr": float, "optimizer": str, "momentum": float,
                "weight_decay": float, "batch_size": _none_or_int}
_ADMM_TYPES = {"K": int, "inner_epochs": int, "rho_init": float, "rho_growth": float,
               "rho_max": float, "rescale_dual": lambda v: v.lower() in ("1", "true", "yes"),
               "optimizer": str, "lr": float, "momentum": float, "weight_decay": float,
               "batch_size": _none_or_int, "tol": float}
_DATA_TYPES = {"classes": int, "dim": int, "n": int, "size": int, "images": str, "labels": str,
               "test_fraction": float}
_LAYER_KEYS = ("method", "block", "ratio", "selection", "nm_keep")


@dataclass
class ConstraintDefaults:
    method: str = "none"
    block: BlockShape | None = None
    ratio: float = 1.0
    selection: str | None = None
    nm_keep: int | None = None
    exclude: str = "auto"


@dataclass
class ExperimentConfig:
    seed: int = 0
    arch: str = ""
    input_shape: tuple[int, ...] = ()
    loss: str = "softmax_cross_entropy"
    metric: str | None = None
    data: str = "synthetic_classify"
    data_args: dict = field(default_factory=dict)
    test_fraction: float = 0.25
    train: TrainConfig = field(default_factory=TrainConfig)
    admm: AdmmConfig = field(default_factory=AdmmConfig)
    admm_lr_set: bool = False
    constraint: ConstraintDefaults = field(default_factory=ConstraintDefaults)
    layer_overrides: dict[int, dict] = field(default_factory=dict)
    out: dict[str, str] = field(default_factory=dict)
    base_dir: Path = Path(".")

    def path(self, name: str, default: str | None = None) -> Path | None:
        value = self.out.get(name, default)
        return None if value is None else self.resolve(value)

    def resolve(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def build_model(self) -> Model:
        try:
            return Model.from_arch(self.arch, self.input_shape, self.loss, seed=self.seed)
        except ValueError as exc:
            raise ConfigError(f"arch: {exc}") from exc

    def dataset(self) -> tuple[Dataset, Dataset]:
        if self.data == "idx":
            if "images" not in self.data_args:
                raise ConfigError("data.images: required for data = idx")
            images = self.resolve(self.data_args["images"])
            labels = self.data_args.get("labels")
            for p in (images, labels and self.resolve(labels)):
                if p and not Path(p).exists():
                    raise FileNotFoundError(f"dataset file {p} does not exist")
            full = load_idx(images, labels and self.resolve(labels))
        else:
            kwargs = {k: v for k, v in self.data_args.items() if k in ("classes", "dim", "n", "size")}
            if self.data == "synthetic_images":
                kwargs.pop("classes", None)
                kwargs.pop("dim", None)
            else:
                kwargs.pop("size", None)
            full = gen_synthetic(self.seed, self.data, **kwargs)
        return full.split(self.test_fraction)

    def build_spec(self, model: Model) -> ConstraintSpec:
        """Per-layer constraints; first/last layers are excluded per `constraint.exclude`."""
        ids = sorted(model.trainable_layers())
        for lid in self.layer_overrides:
            if lid not in ids:
                raise ConfigError(f"layer.{lid}: no trainable layer with id {lid} (have {ids})")
        c = self.constraint
        exclude = c.exclude.strip().lower()
        if exclude == "auto":
            exclude = "first,last" if self.loss == "softmax_cross_entropy" else "none"
        excluded = set()
        for tok in (t.strip() for t in exclude.split(",")):
            if tok in ("", "none"):
                continue
            if tok == "first":
                excluded.add(ids[0])
            elif tok == "last":
                excluded.add(ids[-1])
            elif tok.isdigit() and int(tok) in ids:
                excluded.add(int(tok))
            else:
                raise ConfigError(f"constraint.exclude: bad entry {tok!r}")
        spec = ConstraintSpec()
        for lid in ids:
            vals = {"method": "none" if lid in excluded else c.method, "block": c.block,
                    "ratio": c.ratio, "selection": c.selection, "nm_keep": c.nm_keep}
            vals.update(self.layer_overrides.get(lid, {}))
            try:
                lc = LayerConstraint(vals["method"], vals["block"] if vals["method"] != "none" else None,
                                     vals["ratio"], vals["selection"] if vals["method"] != "none" else None,
                                     vals["nm_keep"] if vals["method"] == "nm_prune" else None)
                lc.check_layer(model.layer_shapes()[lid])
            except ConstraintError as exc:
                raise ConfigError(f"layer {lid}: {exc}") from exc
            spec.layers[lid] = lc
        return spec

    @property
    def metric_name(self) -> str:
        return self.metric or ("accuracy" if self.loss == "softmax_cross_entropy" else "psnr")


def _convert(lineno: int, key: str, conv, value: str):
    try:
        return conv(value)
    except ValueError as exc:
        raise ConfigError(f"line {lineno}: {key}: {exc}") from None


def parse_config(text: str, base_dir: Path | str = ".") -> ExperimentConfig:
    cfg = ExperimentConfig(base_dir=Path(base_dir))
    train, admm = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        head, _, rest = key.partition(".")
        if key == "seed":
            cfg.seed = _convert(lineno, key, int, value)
        elif key == "arch":
            cfg.arch = value
        elif key == "input":
            cfg.input_shape = _convert(lineno, key, lambda v: tuple(int(s) for s in v.replace(",", "x").split("x")), value)
        elif key == "loss":
            if value not in LOSSES:
                raise ConfigError(f"line {lineno}: loss: unknown loss {value!r}")
            cfg.loss = value
        elif key == "metric":
            if value not in ("accuracy", "psnr"):
                raise ConfigError(f"line {lineno}: metric: unknown metric {value!r}")
            cfg.metric = value
        elif key == "data":
            if value not in ("synthetic_classify", "synthetic_images", "idx"):
                raise ConfigError(f"line {lineno}: data: unknown source {value!r}")
            cfg.data = value
        elif head == "data" and rest in _DATA_TYPES:
            v = _convert(lineno, key, _DATA_TYPES[rest], value)
            if rest == "test_fraction":
                cfg.test_fraction = v
            else:
                cfg.data_args[rest] = v
        elif head == "train" and rest in _TRAIN_TYPES:
            train[rest] = _convert(lineno, key, _TRAIN_TYPES[rest], value)
        elif head == "admm" and rest in _ADMM_TYPES:
            admm[rest] = _convert(lineno, key, _ADMM_TYPES[rest], value)
        elif head == "constraint":
            _set_constraint(cfg.constraint, rest, value, lineno, key)
        elif head == "layer":
            lid, _, field_name = rest.partition(".")
            if not lid.isdigit() or field_name not in _LAYER_KEYS:
                raise ConfigError(f"line {lineno}: {key}: expected layer.<id>.<{'|'.join(_LAYER_KEYS)}>")
            tmp = ConstraintDefaults()
            _set_constraint(tmp, field_name, value, lineno, key)
            name = "block" if field_name == "block" else field_name
            cfg.layer_overrides.setdefault(int(lid), {})[name] = getattr(tmp, name)
        elif head == "out" and rest:
            cfg.out[rest] = value
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}: not an integer: {env_seed!r}") from None
    try:
        cfg.train = TrainConfig(**train, seed=cfg.seed)
        cfg.admm_lr_set = "lr" in admm
        admm.setdefault("lr", 0.1 * cfg.train.lr)
        admm.setdefault("optimizer", cfg.train.optimizer)
        admm.setdefault("batch_size", cfg.train.batch_size)
        cfg.admm = AdmmConfig(**admm, seed=cfg.seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train/admm: {exc}") from exc
    if not cfg.arch:
        raise ConfigError("arch: required")
    if not cfg.input_shape:
        raise ConfigError("input: required")
    return cfg


def _set_constraint(c: ConstraintDefaults, name: str, value: str, lineno: int, key: str) -> None:
    if name == "method":
        if value not in METHODS:
            raise ConfigError(f"line {lineno}: {key}: unknown method {value!r}")
        c.method = value
    elif name == "block":
        c.block = _convert(lineno, key, BlockShape.parse, value)
    elif name == "ratio":
        c.ratio = _convert(lineno, key, float, value)
        if not 0.0 <= c.ratio <= 1.0:
            raise ConfigError(f"line {lineno}: {key}: ratio {c.ratio} outside [0, 1]")
    elif name == "selection":
        c.selection = value
    elif name == "nm_keep":
        c.nm_keep = _convert(lineno, key, int, value)
    elif name == "exclude":
        c.exclude = value
    else:
        raise ConfigError(f"line {lineno}: unknown key {key!r}")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    return parse_config(text, path.parent)


def config_fields() -> list[str]:
    """All recognised top-level and dotted keys (for help output)."""
    keys = ["seed", "arch", "input", "loss", "metric", "data"]
    keys += [f"data.{k}" for k in _DATA_TYPES] + [f"train.{k}" for k in _TRAIN_TYPES]
    keys += [f"admm.{k}" for k in _ADMM_TYPES]
    keys += [f"constraint.{f.name}" for f in fields(ConstraintDefaults)]
    keys += [f"layer.<id>.{k}" for k in _LAYER_KEYS] + ["out.<name>"]
    return keys
