"""Run configuration: one flat key-value file covering scenario, model,
training and loss settings. Keys are section-prefixed ("train.epochs");
every key has a default and unknown keys are rejected. The resolved
config is echoed into every command's output directory."""

import json
from dataclasses import dataclass, field, fields, asdict

from .data import ScenarioParams
from .losses import LossWeights
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scenario: ScenarioParams = field(default_factory=ScenarioParams)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def flat(self):
        out = {}
        for key, val in asdict(self.scenario).items():
            out[f"data.{key}"] = val
        for key, val in self.model.to_dict().items():
            out[f"model.{key}"] = val
        for key, val in self.train.to_dict().items():
            if key == "weights":
                for wk, wv in val.items():
                    out[f"loss.{wk}"] = wv
            else:
                out[f"train.{key}"] = val
        return out

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.flat(), fh, indent=1, sort_keys=True)

    def with_seed(self, seed):
        sc = {**asdict(self.scenario), "rng_seed": seed}
        sc["image_size"] = tuple(sc["image_size"])
        tr = self.train.to_dict()
        tr["seed"] = seed
        return RunConfig(scenario=ScenarioParams(**sc),
                         model=self.model,
                         train=TrainConfig.from_dict(tr))


_SECTIONS = {
    "data": {f.name for f in fields(ScenarioParams)},
    "model": {f.name for f in fields(ModelConfig)},
    "train": {f.name for f in fields(TrainConfig)} - {"weights"},
    "loss": {f.name for f in fields(LossWeights)},
}


def load_config(path=None, overrides=None) -> RunConfig:
    """Build a RunConfig from defaults, an optional flat JSON file, and an
    optional dict of flat-key overrides. Unknown keys raise ConfigError."""
    flat = {}
    if path:
        try:
            with open(path) as fh:
                flat.update(json.load(fh))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})")
    flat.update(overrides or {})

    parts = {"data": {}, "model": {}, "train": {}, "loss": {}}
    for key, val in flat.items():
        if "." not in key:
            raise ConfigError(f"key {key!r} is missing a section prefix")
        sec, name = key.split(".", 1)
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown config section {sec!r} in key {key!r}")
        if name not in _SECTIONS[sec]:
            raise ConfigError(f"unknown config key {key!r}")
        parts[sec][name] = val

    if "image_size" in parts["data"]:
        parts["data"]["image_size"] = tuple(parts["data"]["image_size"])
    if "f2f_dilations" in parts["model"]:
        parts["model"]["f2f_dilations"] = tuple(parts["model"]["f2f_dilations"])
    try:
        scenario = ScenarioParams(**parts["data"])
        model = ModelConfig.from_dict({**ModelConfig().to_dict(), **parts["model"]})
        weights = LossWeights(**parts["loss"])
        train_d = TrainConfig().to_dict()
        train_d.update(parts["train"])
        train_d["weights"] = asdict(weights)
        train = TrainConfig.from_dict(train_d)
    except (ValueError, TypeError, NotImplementedError) as e:
        raise ConfigError(str(e))
    return RunConfig(scenario=scenario, model=model, train=train)
