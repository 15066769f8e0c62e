"""Run configuration and the flat ``key=value`` config file format.

Every key is unique across sections, so a config file is just::

    # comment
    steps = 200
    lr = 0.001
    contrast_gain = 0.5
    lora_plan = qformer.attn:8:16, qformer.mlp:8:16, llm_proj:4:8
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .decoder import DecoderConfig
from .encoder import VitConfig
from .enhance import EnhanceConfig
from .lora import LoraTarget
from .model import Ablation, ModelConfig
from .objectives import LossWeights
from .qformer import QFormerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    batch_size: int = 16
    steps: int = 200
    learning_rate: float = 1e-3
    optimizer: str = "adam"  # adam | sgd
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    enhance: EnhanceConfig = field(default_factory=EnhanceConfig)
    ablation: Ablation = field(default_factory=Ablation)
    fallback_regions: int = 3
    shuffle: bool = True  # False: batches walk the records in manifest order

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")

    def model_config(self) -> ModelConfig:
        return replace(self.model, ablation=self.ablation, seed=self.seed)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, default=str).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        m = d["model"]
        model = ModelConfig(
            vit=VitConfig(**m["vit"]),
            qformer=QFormerConfig(**m["qformer"]),
            decoder=DecoderConfig(**m["decoder"]),
            fusion_dim=m["fusion_dim"],
            region_pooling=m["region_pooling"],
            lora_plan=tuple(LoraTarget(**e) for e in m["lora_plan"]),
            lora_dropout=m["lora_dropout"],
            seed=m["seed"],
            train_encoder=m["train_encoder"],
            train_qformer_base=m["train_qformer_base"],
            ablation=Ablation(**m["ablation"]),
        )
        enh = dict(d["enhance"])
        enh["exposure_gammas"] = tuple(enh["exposure_gammas"])
        return cls(
            seed=d["seed"], batch_size=d["batch_size"], steps=d["steps"], learning_rate=d["learning_rate"],
            optimizer=d["optimizer"], weights=LossWeights(**d["weights"]), model=model,
            enhance=EnhanceConfig(**enh), ablation=Ablation(**d["ablation"]),
            fallback_regions=d["fallback_regions"], shuffle=d.get("shuffle", True),
        )


# ---------------------------------------------------------------- key=value files

# key -> (section, field); section None means TrainConfig itself
_SECTIONS = {
    "weights": LossWeights,
    "enhance": EnhanceConfig,
    "ablation": Ablation,
    "vit": VitConfig,
    "qformer": QFormerConfig,
    "decoder": DecoderConfig,
}
_ALIASES = {
    "lr": "learning_rate",
    "lambda_itc": "weights.itc",
    "lambda_itm": "weights.itm",
    "lambda_itg": "weights.itg",
    "tau": "weights.tau",
    "wb_graworld_power": "enhance.wb_grayworld_power",
    "d_l": "decoder.dim",
    "num_queries": "qformer.num_queries",
}


def _key_table() -> dict[str, str]:
    table = {}
    for f in fields(TrainConfig):
        if f.name not in ("weights", "model", "enhance", "ablation"):
            table[f.name] = f.name
    for sec, typ in _SECTIONS.items():
        for f in fields(typ):
            table.setdefault(f.name, f"{sec}.{f.name}")
            table[f"{sec}.{f.name}"] = f"{sec}.{f.name}"
    for f in fields(ModelConfig):
        if f.name not in ("vit", "qformer", "decoder", "ablation", "seed"):
            table.setdefault(f.name, f"model.{f.name}")
    table.update(_ALIASES)
    return table


def _coerce(raw: str, current: Any) -> Any:
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float) or current is None:
        return float(raw)
    if isinstance(current, tuple) and (not current or isinstance(current[0], (int, float))):
        return tuple(float(x) for x in raw.replace(",", " ").split())
    return raw


def parse_lora_plan(raw: str) -> tuple[LoraTarget, ...]:
    plan = []
    for item in raw.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            target, r, a = item.split(":")
            plan.append(LoraTarget(target.strip(), int(r), float(a)))
        except ValueError:
            raise ConfigError(f"bad LoRA plan entry {item!r}; expected target:rank:alpha") from None
    return tuple(plan)


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def apply_overrides(cfg: TrainConfig, pairs: dict[str, str]) -> TrainConfig:
    table = _key_table()
    sections: dict[str, dict[str, Any]] = {}
    top: dict[str, Any] = {}
    model_kw: dict[str, Any] = {}
    for key, raw in pairs.items():
        if key not in table:
            raise ConfigError(f"unknown config key {key!r}")
        path = table[key]
        if path == "model.lora_plan":
            model_kw["lora_plan"] = parse_lora_plan(raw)
            continue
        if "." not in path:
            top[path] = _coerce(raw, getattr(cfg, path))
            continue
        sec, name = path.split(".", 1)
        if sec == "model":
            model_kw[name] = _coerce(raw, getattr(cfg.model, name))
            continue
        obj = _section(cfg, sec)
        sections.setdefault(sec, {})[name] = _coerce(raw, getattr(obj, name))
    model = cfg.model
    for sec in ("vit", "qformer", "decoder"):
        if sec in sections:
            model = replace(model, **{sec: replace(getattr(model, sec), **sections.pop(sec))})
    if model_kw:
        model = replace(model, **model_kw)
    for sec in ("weights", "enhance", "ablation"):
        if sec in sections:
            top[sec] = replace(getattr(cfg, sec), **sections.pop(sec))
    return replace(cfg, model=model, **top)


def _section(cfg: TrainConfig, sec: str):
    if sec in ("vit", "qformer", "decoder"):
        return getattr(cfg.model, sec)
    return getattr(cfg, sec)


def load_config(path: str | Path | None, base: TrainConfig | None = None) -> TrainConfig:
    cfg = base or TrainConfig()
    if path is None:
        return cfg
    return apply_overrides(cfg, parse_kv(Path(path).read_text(encoding="utf-8")))
