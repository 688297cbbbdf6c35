"""JSON run configuration: defaults, strict validation and seed derivation."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .model import ModelConfig
from .nn import config_hash
from .training import TrainConfig

STATS_DEFAULTS = {"alpha": 0.05, "n_folds": 10, "alternative": "greater", "lr_search": True, "fold_seed": None}
DATA_DEFAULTS = {"corpus": None, "valid_corpus": None, "max_smiles_len": 157, "checkpoint": None, "datasets": []}
DATASET_KEYS = {"path", "name", "task_type", "metric"}
SECTIONS = ("seed", "model", "pretrain", "finetune", "stats", "data")


class ConfigError(ValueError):
    pass


def derive_seed(root: int, component: str) -> int:
    digest = hashlib.sha256(f"{root}:{component}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


@dataclass
class RunConfig:
    seed: int
    model: ModelConfig
    pretrain: TrainConfig
    finetune: TrainConfig
    stats: dict
    data: dict

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "model": self.model.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "finetune": self.finetune.to_dict(),
            "stats": dict(self.stats),
            "data": copy.deepcopy(self.data),
        }

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


def _strict(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")


def resolve(raw: dict | None = None, seed: int | None = None) -> RunConfig:
    """Fill every default and derive per-component seeds from the root seed."""
    raw = copy.deepcopy(raw or {})
    _strict("<root>", raw, SECTIONS)
    root = int(seed if seed is not None else raw.get("seed", 0))
    try:
        model = ModelConfig.from_dict(raw.get("model", {}))
        pre = dict(raw.get("pretrain", {}))
        pre.setdefault("seed", derive_seed(root, "pretrain"))
        fin = dict(raw.get("finetune", {}))
        fin.setdefault("seed", derive_seed(root, "finetune"))
        pretrain_cfg = TrainConfig.from_dict(pre)
        finetune_cfg = TrainConfig.from_dict(fin, finetune=True)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    stats = dict(STATS_DEFAULTS)
    _strict("stats", raw.get("stats", {}), STATS_DEFAULTS)
    stats.update(raw.get("stats", {}))
    if stats["fold_seed"] is None:
        stats["fold_seed"] = derive_seed(root, "folds")
    if stats["alternative"] not in ("greater", "two-sided"):
        raise ConfigError("stats.alternative must be 'greater' or 'two-sided'")
    data = copy.deepcopy(DATA_DEFAULTS)
    _strict("data", raw.get("data", {}), DATA_DEFAULTS)
    data.update(raw.get("data", {}))
    datasets = []
    for i, d in enumerate(data["datasets"]):
        if isinstance(d, str):
            d = {"path": d}
        _strict(f"data.datasets[{i}]", d, DATASET_KEYS)
        if "path" not in d:
            raise ConfigError(f"data.datasets[{i}] needs a path")
        full = {"path": d["path"], "name": d.get("name") or Path(d["path"]).stem,
                "task_type": d.get("task_type"), "metric": d.get("metric")}
        datasets.append(full)
    data["datasets"] = datasets
    return RunConfig(root, model, pretrain_cfg, finetune_cfg, stats, data)


def load(path, seed: int | None = None) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return resolve(raw, seed)
