"""Run configuration: plain-text sectioned key=value files.

Every field of the experiment (data, views, model, train, eval) is
addressable as section.key.  Unknown sections or keys are rejected, defaults
are explicit in the schema below, and the fully resolved configuration is
written verbatim into the run directory so an experiment is reproducible from
its artifacts alone.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field

import numpy as np

from .augment import Recipe
from .data import Dataset, load_cifar_binary, make_synth_dataset
from .errors import ConfigError
from .model import METHODS, HeadConfig
from .train import TrainSettings

# schema: section -> key -> (default, parser)
_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in _BOOL_TRUE:
        return True
    if low in _BOOL_FALSE:
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(","))


def _parse_ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(","))


SCHEMA = {
    "data": {
        "dataset": ("synth", str),            # synth | cifar
        "cifar_train": ("", str),             # comma-separated binary batches
        "cifar_val": ("", str),
        "n_train": (2000, int),
        "n_val": (500, int),
        "image_size": (32, int),
        "noise_amplitude": (0.1, float),
    },
    "views": {
        "n_global": (2, int),
        "n_local": (0, int),
        "n_cutout": (0, int),
        "global_size": (32, int),
        "local_size": (16, int),
        "global_area": ((0.25, 1.0), _parse_floats),
        "local_area": ((0.08, 0.25), _parse_floats),
        "cutout_crop_area": ((0.25, 1.0), _parse_floats),
        "cutout_mask_area": ((0.20, 0.40), _parse_floats),
        "crop": (True, _parse_bool),
        "flip": (True, _parse_bool),
        "jitter": (True, _parse_bool),
        "grayscale": (True, _parse_bool),
        "blur": (True, _parse_bool),
        "solarize": (True, _parse_bool),
        "symmetric_cutout": (False, _parse_bool),
        "lambda_global": (1.0, float),
        "lambda_local": (1.0, float),
        "lambda_cutout": (1.0, float),
    },
    "model": {
        "method": ("byol", str),
        "backbone_channels": ((8, 16, 32, 64), _parse_ints),
        "proj_hidden": (512, int),
        "proj_out": (64, int),
        "pred_hidden": (0, int),              # 0 -> method default
        "shared_predictor": (False, _parse_bool),
        "bn_eps": (1e-5, float),
        "bn_momentum": (0.1, float),
    },
    "train": {
        "epochs": (30, int),
        "batch_size": (128, int),
        "base_lr": (0.0, float),              # 0 -> lr_scale * batch / 256
        "lr_scale": (0.4, float),
        "momentum": (0.9, float),
        "weight_decay": (-1.0, float),        # <0 -> method default
        "warmup_epochs": (2, int),
        "ema_base": (0.996, float),
        "temperature": (0.2, float),
        "collapse_scale": (0.2, float),
        "checkpoint_every": (0, int),
    },
    "eval": {
        "protocol": ("both", str),
        "knn_k": (20, int),
        "probe_epochs": (20, int),
        "probe_lr": (0.005, float),
        "probe_batch": (256, int),
    },
}

_METHOD_WEIGHT_DECAY = {"byol": 1.5e-6, "mocov3": 1.5e-6, "simsiam": 1e-4}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    seed: int = 0
    deterministic: bool = False

    # -- construction --------------------------------------------------------

    @classmethod
    def defaults(cls, seed: int = 0, deterministic: bool = False) -> "RunConfig":
        values = {s: {k: d for k, (d, _) in keys.items()} for s, keys in SCHEMA.items()}
        return cls(values, seed, deterministic)

    @classmethod
    def from_text(cls, text: str, seed: int = 0, deterministic: bool = False
                  ) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as err:
            raise ConfigError(f"cannot parse config: {err}") from err
        cfg = cls.defaults(seed, deterministic)
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key {section}.{key}")
                _, parse = SCHEMA[section][key]
                try:
                    cfg.values[section][key] = parse(raw)
                except ConfigError:
                    raise
                except (TypeError, ValueError) as err:
                    raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({err})")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, seed: int = 0, deterministic: bool = False) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read(), seed, deterministic)

    def updated(self, overrides: dict) -> "RunConfig":
        """New config with {(section, key): value} replaced; revalidates."""
        values = {s: dict(kv) for s, kv in self.values.items()}
        for (section, key), value in overrides.items():
            if section not in SCHEMA or key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            values[section][key] = value
        out = RunConfig(values, self.seed, self.deterministic)
        out.validate()
        return out

    # -- validation / resolution --------------------------------------------

    def validate(self) -> None:
        if self.values["model"]["method"] not in METHODS:
            raise ConfigError(f"model.method must be one of {METHODS}")
        if self.values["data"]["dataset"] not in ("synth", "cifar"):
            raise ConfigError("data.dataset must be 'synth' or 'cifar'")
        if self.values["eval"]["protocol"] not in ("knn", "linear", "both"):
            raise ConfigError("eval.protocol must be knn, linear, or both")
        self.recipe().validate()

    def get(self, section: str, key: str):
        return self.values[section][key]

    def recipe(self) -> Recipe:
        v = self.values["views"]
        return Recipe(
            n_global=v["n_global"], n_local=v["n_local"], n_cutout=v["n_cutout"],
            global_size=v["global_size"], local_size=v["local_size"],
            global_area=tuple(v["global_area"]), local_area=tuple(v["local_area"]),
            cutout_crop_area=tuple(v["cutout_crop_area"]),
            cutout_mask_area=tuple(v["cutout_mask_area"]),
            crop=v["crop"], flip=v["flip"], jitter=v["jitter"],
            grayscale=v["grayscale"], blur=v["blur"], solarize=v["solarize"],
            symmetric_cutout=v["symmetric_cutout"],
            lambda_global=v["lambda_global"], lambda_local=v["lambda_local"],
            lambda_cutout=v["lambda_cutout"],
        )

    def head_config(self) -> HeadConfig:
        m = self.values["model"]
        overrides = dict(
            backbone_channels=tuple(m["backbone_channels"]),
            proj_hidden=m["proj_hidden"], proj_out=m["proj_out"],
            shared_predictor=m["shared_predictor"],
            bn_eps=m["bn_eps"], bn_momentum=m["bn_momentum"],
        )
        if m["pred_hidden"] > 0:
            overrides["pred_hidden"] = m["pred_hidden"]
        return HeadConfig.for_method(m["method"], **overrides)

    def train_settings(self) -> TrainSettings:
        t = self.values["train"]
        wd = t["weight_decay"]
        if wd < 0:
            wd = _METHOD_WEIGHT_DECAY[self.values["model"]["method"]]
        return TrainSettings(
            epochs=t["epochs"], batch_size=t["batch_size"], base_lr=t["base_lr"],
            lr_scale=t["lr_scale"], momentum=t["momentum"], weight_decay=wd,
            warmup_epochs=t["warmup_epochs"], ema_base=t["ema_base"],
            temperature=t["temperature"], collapse_scale=t["collapse_scale"],
            checkpoint_every=t["checkpoint_every"],
            deterministic=self.deterministic,
        )

    def make_dataset(self) -> Dataset:
        d = self.values["data"]
        if d["dataset"] == "synth":
            return make_synth_dataset(self.seed, d["n_train"], d["n_val"],
                                      size=d["image_size"],
                                      noise_amplitude=d["noise_amplitude"])
        if not d["cifar_train"] or not d["cifar_val"]:
            raise ConfigError("cifar dataset needs data.cifar_train and data.cifar_val")
        paths = [p.strip() for p in d["cifar_train"].split(",")]
        return load_cifar_binary(paths, d["cifar_val"].strip())

    # -- serialization -------------------------------------------------------

    def resolved_text(self) -> str:
        """Full configuration with defaults applied, ready to re-load."""
        out = io.StringIO()
        out.write(f"# resolved configuration (seed={self.seed}, "
                  f"deterministic={self.deterministic})\n")
        for section, keys in SCHEMA.items():
            out.write(f"\n[{section}]\n")
            for key in keys:
                value = self.values[section][key]
                if isinstance(value, (tuple, list, np.ndarray)):
                    text = ",".join(repr(float(x)) if isinstance(x, float) else str(x)
                                    for x in value)
                elif isinstance(value, bool):
                    text = "true" if value else "false"
                elif isinstance(value, float):
                    text = repr(value)
                else:
                    text = str(value)
                out.write(f"{key} = {text}\n")
        return out.getvalue()
