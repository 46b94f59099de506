"""Run configuration (JSON, versioned schema).

Example::

    {
      "schema_version": 1,
      "seed": 7,
      "network": {"preset": "deepmedic", "width": 0.5, "input_channels": 2, "class_count": 2},
      "training": {"epochs": 20, "batches_per_epoch": 10, "sampler": {"fg_prob": 0.5}},
      "crf": {"w1": 0.02, "sigma_gamma": [1.0, 1.0]},
      "data": {"train": [{"name": "a", "channels": ["a/channel_0.nii"], "label": "a/label.nii",
                          "mask": "a/mask.nii"}],
               "val": []},
      "output_dir": "runs/a"
    }

Relative paths are resolved against the directory of the config file.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .crf import CrfConfig
from .network import NetworkSpec, preset, scale_width
from .training import TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class CaseEntry:
    name: str
    channels: list
    label: str | None = None
    mask: str | None = None

    def to_dict(self):
        return {"name": self.name, "channels": list(self.channels), "label": self.label, "mask": self.mask}


@dataclass
class RunConfig:
    seed: int | None = None
    network: dict = field(default_factory=lambda: {"preset": "deepmedic"})
    training: TrainConfig = field(default_factory=TrainConfig)
    crf: CrfConfig = field(default_factory=CrfConfig)
    data: dict = field(default_factory=lambda: {"train": [], "val": []})
    output_dir: str = "run"
    base_dir: str = field(default=".", compare=False)

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.normpath(os.path.join(self.base_dir, path))

    def network_spec(self) -> NetworkSpec:
        net = self.network
        if "spec" in net:
            return NetworkSpec.from_dict(net["spec"])
        spec = preset(net.get("preset", "deepmedic"), net.get("input_channels", 1), net.get("class_count", 2),
                      net.get("conv_dropout"))
        if net.get("width", 1.0) != 1.0:
            spec = scale_width(spec, net["width"])
        return spec

    def to_dict(self) -> dict:
        training = self.training.to_dict()
        training["tile"] = list(training["tile"])
        training["sampler"]["out_dims"] = list(training["sampler"]["out_dims"])
        if training["sampler"]["fg_classes"] is not None:
            training["sampler"]["fg_classes"] = list(training["sampler"]["fg_classes"])
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "network": self.network,
            "training": training,
            "crf": self.crf.to_dict(),
            "data": {k: [c.to_dict() for c in v] for k, v in self.data.items()},
            "output_dir": self.output_dir,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def parse_run_config(d: dict, base_dir: str = ".") -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("run config must be a JSON object")
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}; expected {SCHEMA_VERSION}")
    known = {"schema_version", "seed", "network", "training", "crf", "data", "output_dir"}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(extra))}")
    try:
        seed = d.get("seed")
        if seed is not None and not isinstance(seed, int):
            raise ConfigError("seed must be an integer")
        network = dict(d.get("network", {"preset": "deepmedic"}))
        training = TrainConfig.from_dict(d.get("training", {}))
        if seed is not None:
            training.seed = seed
        crf = CrfConfig.from_dict(d.get("crf", {}))
        data = {}
        for split, entries in d.get("data", {}).items():
            data[split] = [CaseEntry(**e) for e in entries]
        data.setdefault("train", [])
        data.setdefault("val", [])
        cfg = RunConfig(seed, network, training, crf, data, d.get("output_dir", "run"), base_dir)
        cfg.network_spec()
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"invalid run config: {e}") from None
    return cfg


def load_run_config(path, check_files: bool = True, require_seed: bool = False) -> RunConfig:
    try:
        with open(path) as f:
            d = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None
    cfg = parse_run_config(d, os.path.dirname(os.path.abspath(path)))
    if require_seed and cfg.seed is None:
        raise ConfigError(f"{path}: a seed is required for training runs")
    if check_files:
        missing = []
        for entries in cfg.data.values():
            for c in entries:
                for p in list(c.channels) + [c.label, c.mask]:
                    if p is not None and not os.path.exists(cfg.resolve(p)):
                        missing.append(p)
        if missing:
            raise ConfigError(f"{path}: referenced files do not exist: {', '.join(missing)}")
    return cfg
