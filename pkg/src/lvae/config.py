"""Plain-text run configuration: ``section.key = value`` lines, ``#`` comments.

Sections are ``gen`` (data generation), ``model`` (architecture and prior),
``train`` (optimisation) and ``run`` (everything else). Unknown keys are
rejected; every key has a default, and ``dumps`` writes the fully resolved
configuration in a form ``loads`` reads back unchanged.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

from .datagen import GenConfig
from .trainer import ModelConfig, TrainConfig


@dataclass
class RunSettings:
    dense_cap: int = 2000
    mc_samples: int = 25
    num_bins: int = 6
    impute_mode: str = "encoder"
    checkpoint: str = "model.json"
    log: str = "train_log.jsonl"


@dataclass
class RunConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunSettings = field(default_factory=RunSettings)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, gen=replace(self.gen, seed=seed), train=replace(self.train, seed=seed))


_SECTIONS = ("gen", "model", "train", "run")


def _coerce(text: str, default, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError
            return text.lower() == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ValueError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def loads(text: str) -> RunConfig:
    cfg = RunConfig()
    updates = {s: {} for s in _SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'section.key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        defaults = asdict(getattr(cfg, section))
        if name not in defaults:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        updates[section][name] = _coerce(value, defaults[name], key)
    return RunConfig(**{s: replace(getattr(cfg, s), **updates[s]) for s in _SECTIONS})


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def dumps(cfg: RunConfig) -> str:
    lines = []
    for s in _SECTIONS:
        obj = getattr(cfg, s)
        for f in fields(obj):
            lines.append(f"{s}.{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def save(cfg: RunConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(cfg))
