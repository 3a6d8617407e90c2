"""Run configuration: versioned JSON, strict keys, canonical serialization."""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path

from .accountant import PrivacyBudget
from .data import DATASET_INFO
from .errors import ConfigError, ValidationError
from .eval_analysis import EvalConfig
from .fixtures import fixture_architecture
from .search_engine import SearchConfig
from .search_space import Architecture, load_architecture

SCHEMA_VERSION = 1

_SEARCH_FIELD_NAMES = {f.name for f in dataclasses.fields(SearchConfig)} - {"seed"}
SEARCH_KEYS = _SEARCH_FIELD_NAMES | {"strategy", "train_subset"}
EVAL_KEYS = {"epsilon", "delta", "epochs", "repeats", "batch_size",
             "learning_rate", "clip_norm", "momentum", "weight_decay",
             "noise_multiplier", "stage_channels", "train_subset", "arch"}
ABLATE_KEYS = (EVAL_KEYS - {"arch"}) | {"base", "components"}
TRANSFER_KEYS = (EVAL_KEYS - {"arch"}) | {"search_dataset", "store_dir"}
SANITY_KEYS = {"repeats", "stage_channels", "arch"}
ANALYZE_KEYS = {"controller", "n_samples"}

TOP_KEYS = {"schema_version", "dataset", "seed", "data_root", "search",
            "eval", "ablate", "transfer", "sanity", "analyze"}

_SECTION_KEYS = {"search": SEARCH_KEYS, "eval": EVAL_KEYS,
                 "ablate": ABLATE_KEYS, "transfer": TRANSFER_KEYS,
                 "sanity": SANITY_KEYS, "analyze": ANALYZE_KEYS}


@dataclasses.dataclass
class RunConfig:
    dataset: str
    seed: int
    data_root: str | None
    sections: dict

    def to_json(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION, "dataset": self.dataset,
               "seed": self.seed}
        if self.data_root is not None:
            out["data_root"] = self.data_root
        out.update(self.sections)
        return out


def _reject_unknown(obj: dict, allowed: set, where: str):
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def parse_run_config(source) -> RunConfig:
    """Parse and fully validate a config dict or JSON file before any compute."""
    if isinstance(source, (str, Path)):
        try:
            obj = json.loads(Path(source).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {source}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: invalid JSON: {exc}") from exc
    else:
        obj = dict(source)
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    _reject_unknown(obj, TOP_KEYS, "config root")
    version = obj.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}; "
                          f"this build reads {SCHEMA_VERSION}")
    dataset = obj.get("dataset")
    if dataset not in DATASET_INFO:
        raise ConfigError(f"dataset must be one of {sorted(DATASET_INFO)}, "
                          f"got {dataset!r}")
    seed = obj.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    sections = {}
    for name, keys in _SECTION_KEYS.items():
        if name in obj:
            section = obj[name]
            if not isinstance(section, dict):
                raise ConfigError(f"section {name!r} must be an object")
            _reject_unknown(section, keys, f"section {name!r}")
            sections[name] = section
    cfg = RunConfig(dataset=dataset, seed=seed,
                    data_root=obj.get("data_root"), sections=sections)
    # eagerly validate every section so errors surface before compute
    if "search" in sections:
        make_search_config(cfg)
    for name in ("eval", "ablate", "transfer"):
        if name in sections:
            make_eval_config(cfg, name)
    return cfg


def canonical_json(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_json(), sort_keys=True, indent=2) + "\n"


def apply_overrides(cfg: RunConfig, section: str, overrides: dict) -> RunConfig:
    """Flag overrides win over file values; unknown keys still rejected."""
    overrides = {k: v for k, v in overrides.items() if v is not None}
    top = {k: overrides.pop(k) for k in ("dataset", "seed", "data_root")
           if k in overrides}
    sections = {k: dict(v) for k, v in cfg.sections.items()}
    if overrides:
        _reject_unknown(overrides, _SECTION_KEYS[section],
                        f"flag overrides for {section!r}")
        sections.setdefault(section, {})
        sections[section].update(overrides)
    merged = RunConfig(dataset=top.get("dataset", cfg.dataset),
                       seed=top.get("seed", cfg.seed),
                       data_root=top.get("data_root", cfg.data_root),
                       sections=sections)
    return parse_run_config(merged.to_json())


def resolve_data_root(cfg: RunConfig) -> Path:
    root = cfg.data_root or os.environ.get("DPNAS_DATA_ROOT")
    if not root:
        raise ConfigError(
            "no dataset root: set data_root in the config, pass --data-root, "
            "or export DPNAS_DATA_ROOT (use `dpnas synth-data` to create a "
            "synthetic stand-in root)")
    return Path(root)


def make_search_config(cfg: RunConfig):
    """(SearchConfig, strategy, train_subset) from the search section."""
    section = dict(cfg.sections.get("search", {}))
    strategy = section.pop("strategy", "rl")
    if strategy not in ("rl", "random"):
        raise ConfigError(f"search.strategy must be rl|random, got {strategy!r}")
    subset = section.pop("train_subset", None)
    if "stage_channels" in section:
        section["stage_channels"] = tuple(section["stage_channels"])
    try:
        search_cfg = SearchConfig(seed=cfg.seed, **section)
    except (TypeError, ValidationError) as exc:
        raise ConfigError(f"invalid search section: {exc}") from exc
    return search_cfg, strategy, subset


def make_eval_config(cfg: RunConfig, section_name: str):
    """(EvalConfig, extras) from an eval-like section."""
    section = dict(cfg.sections.get(section_name, {}))
    extras = {}
    for key in ("arch", "base", "components", "search_dataset", "store_dir"):
        if key in section:
            extras[key] = section.pop(key)
    epsilon = section.pop("epsilon", None)
    delta = section.pop("delta", None)
    if (epsilon is None) != (delta is None):
        raise ConfigError("epsilon and delta must be given together")
    budget = None if epsilon is None else PrivacyBudget(epsilon, delta)
    if "stage_channels" in section and section["stage_channels"] is not None:
        section["stage_channels"] = tuple(section["stage_channels"])
    if "epochs" not in section:
        raise ConfigError(f"section {section_name!r} needs 'epochs'")
    try:
        eval_cfg = EvalConfig(dataset=cfg.dataset, budget=budget,
                              seed=cfg.seed, **section)
    except (TypeError, ValidationError) as exc:
        raise ConfigError(f"invalid {section_name} section: {exc}") from exc
    return eval_cfg, extras


def resolve_architecture(spec: str, dataset: str) -> Architecture:
    """'fixture', 'fixture:<dataset>', or a path to an architecture JSON."""
    if spec == "fixture":
        return fixture_architecture(dataset)
    if spec.startswith("fixture:"):
        return fixture_architecture(spec.split(":", 1)[1])
    return load_architecture(spec)
