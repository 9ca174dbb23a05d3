"""Audit configuration: TOML documents, validation, overrides and hashing.

A config document has top-level keys for the run settings, optional
``[dt]``, ``[rf]`` and ``[mlp]`` hyperparameter tables, and one
``[[domains]]`` table per domain. A domain is read either from an ingest CSV
(``path``) or drawn from a generator preset (``[domains.synth]``)::

    seeds = [0, 1, 2, 3, 4]
    background_size = 100

    [[domains]]
    name = "league_a"
    role = "elite"
    path = "data/league_a.csv"

    [[domains]]
    name = "campus"
    role = "target"
    [domains.synth]
    preset = "elite"
    seed = 7
    n_matches = 40
    shift = { permutation = "reversal", damping = 0.7, noise_inflation = 1.5 }

Unknown keys are rejected. Environment variables prefixed ``SHIFTAUDIT_``
override the document (see :data:`ENV_OVERRIDES`), and explicit CLI flags
override both.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli

from .dataset import ELITE, TARGET
from .errors import ProtocolViolation, SchemaError
from .models import DT_DEFAULTS, RF_DEFAULTS, MlpParams, TreeParams
from .models.tree import resolve_mtry

MODEL_KINDS = ("dt", "rf", "mlp")
METHODS = ("shapley", "cis")
PVALUE_METHODS = ("t", "permutation", "exact")
ENV_PREFIX = "SHIFTAUDIT_"
ENV_OVERRIDES = {
    "SEEDS": "seeds",
    "THREADS": "threads",
    "OUT": "output_dir",
    "BACKGROUND_SIZE": "background_size",
    "N_PERMUTATIONS": "n_permutations",
    "PVALUE": "pvalue",
}
# settings that change how a run executes but not what it computes
RUNTIME_KEYS = frozenset({"threads", "output_dir", "render", "save_models"})


@dataclass(frozen=True)
class ShiftConfig:
    permutation: str | tuple[int, ...] = "reversal"
    damping: float = 0.7
    noise_inflation: float = 1.5


@dataclass(frozen=True)
class SynthSource:
    preset: str = "elite"
    seed: int = 0
    n_matches: int = 1000
    noise_std: float | None = None
    coupling: float | None = None
    ratio: float | None = None
    spacing: str | None = None
    shift: ShiftConfig | None = None


@dataclass(frozen=True)
class DomainConfig:
    name: str
    role: str
    path: str | None = None
    match_domain: str | None = None
    adjudication: str | None = None
    synth: SynthSource | None = None


@dataclass(frozen=True)
class AuditConfig:
    domains: tuple[DomainConfig, ...]
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    models: tuple[str, ...] = MODEL_KINDS
    explain_models: tuple[str, ...] = ("rf", "mlp")
    methods: tuple[str, ...] = METHODS
    split_seed: int = 0
    split_ratios: tuple[int, ...] = (8, 1, 1)
    background_size: int = 100
    n_permutations: int = 200
    pvalue: str = "t"
    pvalue_resamples: int = 100_000
    train_domains: tuple[str, ...] | None = None
    background_domains: tuple[str, ...] | None = None
    reference_domains: tuple[str, ...] | None = None
    dt: TreeParams = DT_DEFAULTS
    rf: TreeParams = RF_DEFAULTS
    mlp: MlpParams = field(default_factory=MlpParams)
    threads: int = 1
    output_dir: str = "audit_out"
    render: bool = True
    save_models: bool = False
    base_dir: str = "."

    @property
    def elite_domains(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.domains if d.role == ELITE)

    @property
    def target_domains(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.domains if d.role == TARGET)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_dict(self, runtime: bool = True) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        if not runtime:
            for k in RUNTIME_KEYS:
                d.pop(k)
        return _plain(d)

    @property
    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON of every setting that affects results."""
        text = json.dumps(self.to_dict(runtime=False), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# --------------------------------------------------------------------------- parsing


def _check_keys(doc: dict, allowed, where: str) -> None:
    if not isinstance(doc, dict):
        raise SchemaError(f"{where}: expected a table")
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise SchemaError(f"{where}: unknown key(s) {', '.join(unknown)}")


def _names(cls) -> list[str]:
    return [f.name for f in fields(cls)]


def _int_list(value, where: str) -> tuple[int, ...]:
    if isinstance(value, (int, str)) and not isinstance(value, bool):
        value = [value]
    try:
        return tuple(int(v) for v in value)
    except (TypeError, ValueError):
        raise SchemaError(f"{where}: expected a list of integers") from None


def _choice_list(value, allowed, where: str) -> tuple[str, ...]:
    if isinstance(value, str):
        value = [value]
    out = tuple(str(v) for v in value)
    bad = [v for v in out if v not in allowed]
    if bad:
        raise SchemaError(f"{where}: unknown value(s) {bad}; choose from {list(allowed)}")
    return out


def _tree_params(doc: dict, default: TreeParams, where: str) -> TreeParams:
    _check_keys(doc, _names(TreeParams), where)
    try:
        params = replace(default, **doc)
        resolve_mtry(params.feature_subsample, 1)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: {exc}") from None
    if params.n_trees < 1 or params.min_samples_leaf < 1:
        raise SchemaError(f"{where}: n_trees and min_samples_leaf must be >= 1")
    return params


def _mlp_params(doc: dict) -> MlpParams:
    _check_keys(doc, _names(MlpParams), "mlp")
    try:
        return MlpParams(**{**asdict(MlpParams()), **doc})
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"mlp: {exc}") from None


def _shift(doc: dict, where: str) -> ShiftConfig:
    _check_keys(doc, _names(ShiftConfig), where)
    perm = doc.get("permutation", "reversal")
    if not isinstance(perm, str):
        perm = _int_list(perm, f"{where}.permutation")
    elif perm != "reversal":
        raise SchemaError(f"{where}.permutation: expected 'reversal' or a list of indices")
    try:
        return ShiftConfig(perm, float(doc.get("damping", 0.7)),
                           float(doc.get("noise_inflation", 1.5)))
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: {exc}") from None


def _synth(doc: dict, where: str) -> SynthSource:
    _check_keys(doc, _names(SynthSource), where)
    doc = dict(doc)
    if "shift" in doc:
        doc["shift"] = _shift(doc["shift"], f"{where}.shift")
    try:
        src = SynthSource(**doc)
    except TypeError as exc:
        raise SchemaError(f"{where}: {exc}") from None
    if src.n_matches < 1:
        raise SchemaError(f"{where}.n_matches must be >= 1")
    return src


def _domain(doc: dict, i: int) -> DomainConfig:
    where = f"domains[{i}]"
    _check_keys(doc, _names(DomainConfig), where)
    for key in ("name", "role"):
        if key not in doc:
            raise SchemaError(f"{where}: missing required key {key!r}")
    if doc["role"] not in (ELITE, TARGET):
        raise SchemaError(f"{where}.role must be {ELITE!r} or {TARGET!r}")
    has_path, has_synth = "path" in doc, "synth" in doc
    if has_path == has_synth:
        raise SchemaError(f"{where}: give exactly one of 'path' or 'synth'")
    doc = dict(doc)
    if has_synth:
        doc["synth"] = _synth(doc["synth"], f"{where}.synth")
    return DomainConfig(**doc)


def parse_config(doc: dict, base_dir: str | Path = ".") -> AuditConfig:
    """Validate a config document; raises :class:`SchemaError` on bad input."""
    _check_keys(doc, [n for n in _names(AuditConfig) if n != "base_dir"], "config")
    doc = dict(doc)
    if "domains" not in doc or not doc["domains"]:
        raise SchemaError("config: at least one [[domains]] entry is required")
    kw: dict = {"domains": tuple(_domain(d, i) for i, d in enumerate(doc.pop("domains")))}
    names = [d.name for d in kw["domains"]]
    if len(set(names)) != len(names):
        raise SchemaError("config: domain names must be unique")
    if "seeds" in doc:
        kw["seeds"] = _int_list(doc.pop("seeds"), "seeds")
    for key, allowed in (("models", MODEL_KINDS), ("explain_models", MODEL_KINDS),
                         ("methods", METHODS)):
        if key in doc:
            kw[key] = _choice_list(doc.pop(key), allowed, key)
    if "split_ratios" in doc:
        kw["split_ratios"] = _int_list(doc.pop("split_ratios"), "split_ratios")
    for key in ("train_domains", "background_domains", "reference_domains"):
        if key in doc:
            value = doc.pop(key)
            kw[key] = (value,) if isinstance(value, str) else tuple(str(v) for v in value)
    if "dt" in doc:
        kw["dt"] = _tree_params(doc.pop("dt"), DT_DEFAULTS, "dt")
    if "rf" in doc:
        kw["rf"] = _tree_params(doc.pop("rf"), RF_DEFAULTS, "rf")
    if "mlp" in doc:
        kw["mlp"] = _mlp_params(doc.pop("mlp"))
    kw.update(doc)
    try:
        cfg = AuditConfig(base_dir=str(base_dir), **kw)
    except TypeError as exc:
        raise SchemaError(f"config: {exc}") from None
    validate(cfg)
    return cfg


def validate(cfg: AuditConfig) -> None:
    """Schema checks first (:class:`SchemaError`), then protocol checks
    (:class:`ProtocolViolation`)."""
    if not cfg.seeds or len(set(cfg.seeds)) != len(cfg.seeds):
        raise SchemaError("seeds must be non-empty and distinct")
    if not cfg.models:
        raise SchemaError("the model set is empty")
    missing = [m for m in cfg.explain_models if m not in cfg.models]
    if missing:
        raise SchemaError(f"explain_models {missing} are not in models")
    if cfg.pvalue not in PVALUE_METHODS:
        raise SchemaError(f"pvalue must be one of {list(PVALUE_METHODS)}")
    if cfg.background_size < 1 or cfg.n_permutations < 1 or cfg.threads < 1:
        raise SchemaError("background_size, n_permutations and threads must be >= 1")
    if len(cfg.split_ratios) != 3 or min(cfg.split_ratios) <= 0:
        raise SchemaError("split_ratios needs three positive entries")
    names = {d.name: d.role for d in cfg.domains}
    if not cfg.elite_domains:
        raise ProtocolViolation("no elite domain: training, background and CIS targets "
                                "need elite training data")
    for key in ("train_domains", "background_domains", "reference_domains"):
        chosen = getattr(cfg, key)
        if chosen is None:
            continue
        if not chosen:
            raise SchemaError(f"{key} must not be empty")
        for name in chosen:
            if name not in names:
                raise SchemaError(f"{key}: unknown domain {name!r}")
            if names[name] != ELITE:
                raise ProtocolViolation(f"{key}: target domain {name!r} is inference-only")


def with_overrides(cfg: AuditConfig, **changes) -> AuditConfig:
    """Copy of ``cfg`` with ``changes`` applied (``None`` values ignored), revalidated."""
    changes = {k: v for k, v in changes.items() if v is not None}
    if "seeds" in changes:
        changes["seeds"] = _int_list(changes["seeds"], "seeds")
    out = replace(cfg, **changes)
    validate(out)
    return out


def env_overrides(environ=None) -> dict:
    """Config overrides read from ``SHIFTAUDIT_*`` variables."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for suffix, key in ENV_OVERRIDES.items():
        raw = environ.get(ENV_PREFIX + suffix)
        if raw is None or raw == "":
            continue
        try:
            if key == "seeds":
                out[key] = tuple(int(s) for s in raw.replace(",", " ").split())
            elif key in ("threads", "background_size", "n_permutations"):
                out[key] = int(raw)
            else:
                out[key] = raw
        except ValueError:
            raise SchemaError(f"{ENV_PREFIX + suffix}: cannot parse {raw!r}") from None
    return out


def load_config(path, environ=None) -> AuditConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except FileNotFoundError:
        raise SchemaError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise SchemaError(f"{path}: {exc}") from None
    cfg = parse_config(doc, base_dir=path.parent)
    return with_overrides(cfg, **env_overrides(environ))
