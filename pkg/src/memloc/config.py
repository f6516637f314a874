"""Run configuration: an INI file with typed sections, flag overrides and a stable hash."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, fields, replace

from .corpus import CollectionCriteria, CorpusParams
from .del_bench import DelConfig
from .inj_bench import InjectionSpec
from .jobs import default_workers
from .lm import ModelConfig, TrainConfig
from .locate import HARD_CONCRETE_DEFAULT, METHODS, SLIMMING_DEFAULT, MaskTrainConfig, MethodParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    workers: int = 0  # 0 = one per core; never affects results
    methods: tuple = METHODS
    ig_steps: int = 20
    n_definitions: int = 20
    inj_ks: tuple = (1.0, 2.0, 5.0)


@dataclass(frozen=True)
class RunConfig:
    run: RunSettings = RunSettings()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    corpus: CorpusParams = CorpusParams()
    collect: CollectionCriteria = CollectionCriteria()
    inject: InjectionSpec = InjectionSpec()
    dele: DelConfig = DelConfig()
    slimming: MaskTrainConfig = SLIMMING_DEFAULT
    hard_concrete: MaskTrainConfig = HARD_CONCRETE_DEFAULT

    @property
    def workers(self) -> int:
        return self.run.workers or default_workers()

    def method_params(self) -> MethodParams:
        return MethodParams(self.run.ig_steps, self.slimming, self.hard_concrete)

    def to_dict(self) -> dict:
        return {sec: {f.name: _plain(getattr(getattr(self, attr), f.name)) for f in fields(getattr(self, attr))}
                for sec, attr in SECTIONS.items()}

    def config_hash(self) -> str:
        """sha256 of the canonical config, ignoring the worker count."""
        d = self.to_dict()
        d["run"] = {k: v for k, v in d["run"].items() if k != "workers"}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def provenance(self) -> dict:
        return {"config_hash": self.config_hash(), "seed": self.run.seed}

    def to_ini(self) -> str:
        lines = []
        for sec, vals in self.to_dict().items():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {_ini_value(v)}" for k, v in vals.items()]
            lines.append("")
        return "\n".join(lines)


# INI section name -> RunConfig attribute ("del" is a keyword)
SECTIONS = {"run": "run", "model": "model", "train": "train", "corpus": "corpus", "collect": "collect",
            "inject": "inject", "del": "dele", "slimming": "slimming", "hard_concrete": "hard_concrete"}


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def _ini_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return ", ".join(str(x) for x in v)
    return str(v).lower() if isinstance(v, bool) else str(v)


def _coerce(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if default and isinstance(default[0], float):
                return tuple(float(x) for x in items)
            if default and isinstance(default[0], int):
                return tuple(int(x) for x in items)
            return tuple(items)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _apply(cfg: RunConfig, section: str, key: str, raw: str) -> RunConfig:
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    attr = SECTIONS[section]
    sub = getattr(cfg, attr)
    names = {f.name for f in fields(sub)}
    if key not in names:
        raise ConfigError(f"unknown key {section}.{key}")
    value = _coerce(raw, getattr(sub, key), f"{section}.{key}")
    try:
        return replace(cfg, **{attr: replace(sub, **{key: value})})
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{section}.{key}={raw}: {e}") from None


def parse_ini(text: str, base: RunConfig = RunConfig()) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    cfg = base
    for sec in cp.sections():
        for key, raw in cp.items(sec):
            cfg = _apply(cfg, sec, key, raw)
    return _validate(cfg)


def load_config(path=None, overrides=(), seed: int | None = None, workers: int | None = None) -> RunConfig:
    """File values, then ``section.key=value`` overrides, then the explicit flags."""
    cfg = RunConfig()
    if path is not None:
        try:
            with open(path) as fh:
                cfg = parse_ini(fh.read())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, raw = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        cfg = _apply(cfg, section, key, raw)
    if seed is not None:
        cfg = replace(cfg, run=replace(cfg.run, seed=seed))
    if workers is not None:
        cfg = replace(cfg, run=replace(cfg.run, workers=workers))
    return _validate(cfg)


def _validate(cfg: RunConfig) -> RunConfig:
    if cfg.run.workers < 0:
        raise ConfigError("run.workers must be >= 0")
    unknown = set(cfg.run.methods) - set(METHODS)
    if unknown:
        raise ConfigError(f"run.methods has unknown entries {sorted(unknown)}")
    need = cfg.collect.prefix_len + cfg.collect.suffix_len
    if cfg.corpus.fact_prefix_len + cfg.corpus.fact_suffix_len < need:
        raise ConfigError("factlets are shorter than prefix_len + suffix_len")
    if max(need, cfg.corpus.filler_len, cfg.corpus.definition_len) > cfg.model.n_ctx:
        raise ConfigError("sequences longer than model.n_ctx")
    if cfg.model.vocab_size != 256:
        raise ConfigError("the byte tokenizer needs model.vocab_size = 256")
    return cfg
