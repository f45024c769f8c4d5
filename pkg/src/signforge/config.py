"""Run configuration: one hashable JSON document with a section per stage.

Values are resolved in order: built-in defaults (desk or paper scale), the
config file, then ``--set section.field=value`` style overrides.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from signforge.attacks import AttackConfig
from signforge.model.train import TrainConfig, config_hash
from signforge.optimize import ColorOptConfig, PictogramSearchConfig
from signforge.synth.dataset import SynthConfig

SCHEMA_VERSION = 1
SECTIONS = ("synth", "train", "search_train", "attack", "search_attack", "color_attack", "search", "color", "eval")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    sample_cap: int | None = 200
    split: str = "test"
    coverages: tuple = (0.02, 0.05, 0.08)
    sweep_attacks: tuple = ("universal", "roa", "rp4")
    transfer_archs: tuple = ("small_conv", "mobilenet_like")
    k_sweep: bool = False
    k_sweep_inits: tuple = ("static_gray", "random")

    def __post_init__(self):
        for name in ("coverages", "sweep_attacks", "transfer_archs", "k_sweep_inits"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.sample_cap is not None and self.sample_cap < 1:
            raise ConfigError("eval.sample_cap must be >= 1 or null")


_SECTION_TYPES = {
    "synth": SynthConfig,
    "train": TrainConfig,
    "search_train": TrainConfig,
    "attack": AttackConfig,
    "search_attack": AttackConfig,
    "color_attack": AttackConfig,
    "search": PictogramSearchConfig,
    "color": ColorOptConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class RunConfig:
    """All stage configs plus run-level settings.

    ``attack`` is the evaluation attack, ``search_attack`` scores pictogram
    candidates, ``color_attack`` generates the adversarial examples that drive
    color steps, and ``search_train`` trains the candidate models.
    """

    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    search_train: TrainConfig = field(default_factory=lambda: TrainConfig.desk(phase1_epochs=8, phase2_epochs=5))
    attack: AttackConfig = field(default_factory=AttackConfig)
    search_attack: AttackConfig = field(default_factory=lambda: AttackConfig(search="gradient", top_candidates=16))
    color_attack: AttackConfig = field(default_factory=lambda: AttackConfig(search="gradient", top_candidates=8,
                                                                            opt_steps=10, step_size=0.1))
    search: PictogramSearchConfig = field(default_factory=lambda: PictogramSearchConfig(runs_per_candidate=2))
    color: ColorOptConfig = field(default_factory=lambda: ColorOptConfig(T=100, restarts=3))
    eval: EvalConfig = field(default_factory=EvalConfig)
    n_classes: int = 7
    pool_size: int = 5
    master_seed: int = 0
    paper_scale: bool = False

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schema"] = SCHEMA_VERSION
        return d

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def section_hash(self, *names) -> str:
        d = self.to_dict()
        return config_hash({n: d[n] for n in names})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def desk_defaults() -> dict:
    return RunConfig().to_dict()


def paper_defaults() -> dict:
    """The published protocol: 7 scenes/type, 225 augmentations, T=400, 10 restarts, 5 runs."""
    d = desk_defaults()
    d["synth"].update(dataclasses.asdict(SynthConfig.paper_scale()))
    d["train"].update(dataclasses.asdict(TrainConfig()))
    d["search_train"].update(dataclasses.asdict(TrainConfig()))
    d["search"].update(runs_per_candidate=5)
    d["color"].update(T=400, restarts=10)
    d["eval"].update(sample_cap=None)
    d["paper_scale"] = True
    return d


def _merge(base: dict, upd: dict, where: str = "") -> dict:
    for k, v in upd.items():
        if k == "schema":
            continue
        if k not in base:
            raise ConfigError(f"unknown config key {where + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, f"{where}{k}.")
        else:
            base[k] = v
    return base


def parse_override(text: str) -> dict:
    """``"section.field=value"`` -> nested dict; the value is parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    cur = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


_SEED_FIELDS = {"synth": "master_seed", "eval": None}


def build_run_config(doc: dict) -> RunConfig:
    """Typed config from a merged document; ``master_seed`` overrides every section seed."""
    kwargs = {}
    for name, cls in _SECTION_TYPES.items():
        sec = dict(doc[name])
        seed_field = _SEED_FIELDS.get(name, "seed")
        if seed_field:
            sec[seed_field] = doc["master_seed"]
        if name == "search":
            sec["eval_attack"] = kwargs["search_attack"]
        for k, v in sec.items():
            if isinstance(v, list):
                sec[k] = tuple(v)
        try:
            kwargs[name] = cls(**sec)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid [{name}] section: {e}") from None
    for k in ("n_classes", "pool_size", "master_seed", "paper_scale"):
        kwargs[k] = doc[k]
    return RunConfig(**kwargs)


def load_run_config(path=None, overrides=(), paper_scale: bool = False) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (dicts or key=value strings)."""
    doc = paper_defaults() if paper_scale else desk_defaults()
    if path is not None:
        try:
            file_doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if file_doc.get("paper_scale") and not paper_scale:
            doc = paper_defaults()
        _merge(doc, file_doc)
    for ov in overrides:
        _merge(doc, parse_override(ov) if isinstance(ov, str) else ov)
    if paper_scale:
        doc["paper_scale"] = True
    return build_run_config(doc)
