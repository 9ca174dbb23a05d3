"""Five-experiment explanation audit.

Every model is trained on pooled elite training data, once per (model kind,
seed), and shared by all experiments. Target domains are only ever passed
to ``predict``; training data, background rows and CIS reference statistics
carry provenance tags that are checked where they are consumed.
"""

from __future__ import annotations

import dataclasses
import datetime as _dt
import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .attribution import Background, ImportanceVector, draw_background, explain
from .cis import CisResult, CisTargets, build_targets, cis_scores
from .config import AuditConfig, DomainConfig, SynthSource
from .dataset import (ELITE, TARGET, DomainDataset, FeatureSchema, MatchRecord, SplitDataset,
                      compute_stats, expand_perspectives, expand_split, ingest_matches,
                      read_adjudication, split_matches)
from .errors import AuditError, ProtocolViolation, SchemaError, TrainingDiverged
from .models import EvalEntry, EvalReport, aggregate_eval, evaluate, save_model
from .models.mlp import train_mlp
from .models.tree import train_forest, train_tree
from .report import bars_svg, box_svg, heatmap_svg, write_csv, write_json
from .robustness import (AgreementMatrix, AgreementReport, average_reports, domain_agreement,
                         method_agreement, seed_stability)
from .synth import PRESETS, ShiftSpec, apply_shift, generate_domain, reversal_shift

POOLED = "elite"
ELITE_ROW = "elite"
MEAN_BASELINE = "mean_baseline"
OUTPUTS = ("exp1_eval.csv", "exp2_importance.csv", "exp3_seed_stability.csv",
           "exp4_domain_agreement.csv", "exp5_method_agreement.csv")


# --------------------------------------------------------------------------- data


def synth_spec(src: SynthSource, name: str):
    """Generator spec for a configured synthetic domain."""
    if src.preset not in PRESETS:
        raise SchemaError(f"unknown synth preset {src.preset!r}; choose from {sorted(PRESETS)}")
    overrides = {k: getattr(src, k) for k in ("noise_std", "coupling", "ratio", "spacing")
                 if getattr(src, k) is not None}
    try:
        spec = PRESETS[src.preset](domain=name, seed=src.seed, **overrides)
        if src.shift is not None:
            sh = src.shift
            if sh.permutation == "reversal":
                shift = reversal_shift(spec.p, sh.damping, sh.noise_inflation, source=spec)
            else:
                shift = ShiftSpec(sh.permutation, sh.damping, sh.noise_inflation)
            spec = apply_shift(spec, shift)
    except ValueError as exc:
        raise SchemaError(f"domain {name!r}: {exc}") from None
    return spec


def load_records(cfg: AuditConfig, dc: DomainConfig, schema: FeatureSchema):
    """Match records and exclusions for one configured domain, relabelled
    with the domain's configured name."""
    if dc.synth is not None:
        return generate_domain(synth_spec(dc.synth, dc.name), dc.synth.n_matches), []
    adjudicated = None
    if dc.adjudication:
        try:
            adjudicated = read_adjudication(cfg.resolve(dc.adjudication))
        except FileNotFoundError:
            raise SchemaError(f"no such file: {cfg.resolve(dc.adjudication)}") from None
    records, exclusions = ingest_matches(cfg.resolve(dc.path), schema, adjudicated)
    if dc.match_domain is not None:
        records = [r for r in records if r.domain == dc.match_domain]
    if not records:
        raise SchemaError(f"domain {dc.name!r} has no usable matches")
    return [dataclasses.replace(r, domain=dc.name) for r in records], exclusions


def _only(ds: DomainDataset, names, label: str) -> DomainDataset:
    return ds.subset(np.isin(ds.domains.astype(str), list(names)), label=label)


@dataclass
class AuditData:
    schema: FeatureSchema
    split: SplitDataset
    train: DomainDataset
    val: DomainDataset
    background_pool: DomainDataset
    reference: DomainDataset
    leagues: dict[str, DomainDataset]
    targets: dict[str, DomainDataset]
    exclusions: list[tuple[str, str, str]] = field(default_factory=list)

    @property
    def test(self) -> DomainDataset:
        return self.split.test

    @property
    def domains(self) -> dict[str, DomainDataset]:
        """Evaluation sets by label: the pooled elite test set, then each
        elite league's test rows, then each target domain."""
        out = {POOLED: self.test} if len(self.leagues) > 1 else {}
        out.update(self.leagues)
        out.update(self.targets)
        return out


def prepare_data(cfg: AuditConfig, schema: FeatureSchema | None = None) -> AuditData:
    schema = schema or FeatureSchema()
    elite_records: list[MatchRecord] = []
    targets: dict[str, DomainDataset] = {}
    exclusions = []
    for dc in cfg.domains:
        records, excl = load_records(cfg, dc, schema)
        exclusions.extend((dc.name, e.match_id, e.reason) for e in excl)
        if dc.role == ELITE:
            elite_records.extend(records)
        else:
            targets[dc.name] = expand_perspectives(records, schema, dc.name, TARGET, "all")
    ids = [r.match_id for r in elite_records]
    if len(set(ids)) != len(ids):
        raise SchemaError("elite domains share match ids")
    try:
        partition = split_matches(elite_records, cfg.split_ratios, cfg.split_seed)
    except ValueError as exc:
        raise SchemaError(f"cannot split elite matches: {exc}") from None
    split = expand_split(elite_records, partition, schema, POOLED, ELITE)
    elite = cfg.elite_domains
    train = _only(split.train, cfg.train_domains or elite, POOLED)
    if len(train) == 0:
        raise SchemaError("no elite training rows in the selected training domains")
    leagues = {name: _only(split.test, [name], name) for name in elite}
    empty = [k for k, v in leagues.items() if len(v) == 0]
    if empty:
        raise SchemaError(f"elite domain(s) {empty} have no test matches")
    return AuditData(
        schema, split, train, split.val,
        _only(split.train, cfg.background_domains or elite, POOLED),
        _only(split.train, cfg.reference_domains or elite, POOLED),
        leagues, targets, exclusions,
    )


# --------------------------------------------------------------------------- context


def _require_elite_train(ds: DomainDataset, what: str, targets=()) -> None:
    if ds.tag != "elite-train":
        raise ProtocolViolation(f"{what} must come from elite training data, got {ds.tag}")
    leaked = sorted(set(ds.domains.astype(str)) & set(targets))
    if leaked:
        raise ProtocolViolation(f"{what} contain rows from target domain(s) {leaked}")


@dataclass
class AuditContext:
    """Prepared data plus lazily computed, cached models and explanations."""

    cfg: AuditConfig
    data: AuditData
    models: dict = field(default_factory=dict)
    backgrounds: dict = field(default_factory=dict)
    attributions: dict = field(default_factory=dict)
    cis: dict = field(default_factory=dict)
    targets_cache: CisTargets | None = None
    timing: dict = field(default_factory=dict)

    @classmethod
    def build(cls, cfg: AuditConfig) -> "AuditContext":
        t0 = time.perf_counter()
        ctx = cls(cfg, prepare_data(cfg))
        ctx._tick("data", t0)
        return ctx

    def _tick(self, key: str, t0: float) -> None:
        self.timing[key] = self.timing.get(key, 0.0) + time.perf_counter() - t0

    @property
    def features(self) -> tuple[str, ...]:
        return tuple(self.data.schema.feature_names)

    def model(self, kind: str, seed: int):
        key = (kind, seed)
        if key not in self.models:
            t0 = time.perf_counter()
            train = self.data.train
            _require_elite_train(train, "training data", self.cfg.target_domains)
            cfg = self.cfg
            try:
                if kind == "dt":
                    m = train_tree(train, cfg.dt, seed=seed)
                elif kind == "rf":
                    m = train_forest(train, cfg.rf, seed=seed, threads=cfg.threads)
                elif kind == "mlp":
                    m = train_mlp(train, self.data.val, cfg.mlp, seed=seed)
                else:
                    raise SchemaError(f"unknown model kind {kind!r}")
            except (TrainingDiverged, FloatingPointError) as exc:
                raise TrainingDiverged(f"{kind} seed {seed}: {exc}") from exc
            self.models[key] = m
            self._tick(f"train_{kind}", t0)
        return self.models[key]

    def background(self, seed: int) -> Background:
        if seed not in self.backgrounds:
            pool = self.data.background_pool
            _require_elite_train(pool, "background rows", self.cfg.target_domains)
            self.backgrounds[seed] = draw_background(pool, self.cfg.background_size, seed)
        return self.backgrounds[seed]

    def cis_targets(self) -> CisTargets:
        if self.targets_cache is None:
            ref = self.data.reference
            _require_elite_train(ref, "CIS reference statistics", self.cfg.target_domains)
            self.targets_cache = build_targets(compute_stats(ref), self.data.schema)
        return self.targets_cache

    def _phi(self, kind: str, seed: int, group: str) -> np.ndarray:
        """Per-row attributions for the pooled elite test set or a target."""
        key = (kind, seed, group)
        if key not in self.attributions:
            t0 = time.perf_counter()
            ds = self.data.test if group == POOLED else self.data.targets[group]
            attr = explain(self.model(kind, seed), ds.features, self.background(seed),
                           n_permutations=self.cfg.n_permutations, seed=seed,
                           threads=self.cfg.threads)
            self.attributions[key] = attr.phi
            self._tick("shapley", t0)
        return self.attributions[key]

    def shapley_importance(self, kind: str, seed: int, domain: str) -> ImportanceVector:
        if domain in self.data.targets:
            phi = self._phi(kind, seed, domain)
        else:
            phi = self._phi(kind, seed, POOLED)
            if domain != POOLED:
                phi = phi[self.data.test.domains.astype(str) == domain]
        return ImportanceVector(np.mean(np.abs(phi), axis=0), "shapley", domain, seed,
                                self.features)

    def cis_result(self, kind: str, seed: int, domain: str) -> CisResult:
        key = (kind, seed, domain)
        if key not in self.cis:
            t0 = time.perf_counter()
            self.cis[key] = cis_scores(self.model(kind, seed), self.data.domains[domain],
                                       self.cis_targets(), domain)
            self._tick("cis", t0)
        return self.cis[key]

    def importance(self, kind: str, method: str, seed: int, domain: str) -> ImportanceVector:
        if method == "shapley":
            return self.shapley_importance(kind, seed, domain)
        if method == "cis":
            r = self.cis_result(kind, seed, domain)
            return ImportanceVector(r.raw, "cis", domain, seed, self.features)
        raise SchemaError(f"unknown method {method!r}")

    def mean_importance(self, kind: str, method: str, domain: str) -> ImportanceVector:
        """Seed-averaged importance, the input to cross-domain comparison."""
        vals = np.mean([self.importance(kind, method, s, domain).values for s in self.cfg.seeds],
                       axis=0)
        return ImportanceVector(vals, method, domain, None, self.features)


def _context(cfg: AuditConfig, ctx: AuditContext | None) -> AuditContext:
    return ctx if ctx is not None else AuditContext.build(cfg)


# --------------------------------------------------------------------------- experiments


def run_experiment1(cfg: AuditConfig, ctx: AuditContext | None = None) -> dict[str, EvalReport]:
    """Test-set MAE/RMSE per model kind and seed, plus a mean-predictor baseline."""
    if not cfg.models:
        raise SchemaError("the model set is empty")
    ctx = _context(cfg, ctx)
    test = ctx.data.test
    out: dict[str, EvalReport] = {}
    for kind in cfg.models:
        out[kind] = aggregate_eval(evaluate(ctx.model(kind, s), test, s) for s in cfg.seeds)
    resid = test.y.astype(np.float64) - float(np.mean(ctx.data.train.y))
    base = EvalEntry(MEAN_BASELINE, -1, float(np.mean(np.abs(resid))),
                     float(np.sqrt(np.mean(resid * resid))), len(test))
    out[MEAN_BASELINE] = EvalReport(MEAN_BASELINE, [base])
    return out


def run_experiment2(cfg: AuditConfig, ctx: AuditContext | None = None) -> dict:
    """Importance vectors keyed by ``(model, method, domain, seed)``; seed
    ``None`` holds the seed average."""
    ctx = _context(cfg, ctx)
    out = {}
    for kind in cfg.explain_models:
        for method in cfg.methods:
            for domain in ctx.data.domains:
                for s in cfg.seeds:
                    out[(kind, method, domain, s)] = ctx.importance(kind, method, s, domain)
                out[(kind, method, domain, None)] = ctx.mean_importance(kind, method, domain)
    return out


def run_experiment3(cfg: AuditConfig, ctx: AuditContext | None = None) -> dict:
    """Seed stability per ``(model, method, domain)``; empty with one seed."""
    ctx = _context(cfg, ctx)
    out: dict[tuple[str, str, str], AgreementReport] = {}
    if len(cfg.seeds) < 2:
        return out
    for kind in cfg.explain_models:
        for method in cfg.methods:
            for domain in ctx.data.domains:
                imps = [ctx.importance(kind, method, s, domain) for s in cfg.seeds]
                rep = seed_stability(imps, _pv(cfg))
                rep.context = {"model": kind, "method": method, "domain": domain}
                out[(kind, method, domain)] = rep
    return out


def run_experiment4(cfg: AuditConfig, ctx: AuditContext | None = None) -> dict:
    """Cross-domain agreement of seed-averaged importances: elite leagues
    then target domains."""
    ctx = _context(cfg, ctx)
    labels = list(ctx.data.leagues) + list(ctx.data.targets)
    if len(labels) < 2:
        raise SchemaError("domain agreement needs at least two domains")
    out: dict[tuple[str, str], AgreementMatrix] = {}
    for kind in cfg.explain_models:
        for method in cfg.methods:
            vecs = {d: ctx.mean_importance(kind, method, d) for d in labels}
            out[(kind, method)] = domain_agreement(vecs, _pv(cfg))
    return out


def run_experiment5(cfg: AuditConfig, ctx: AuditContext | None = None) -> dict:
    """Per-seed Shapley-vs-CIS agreement. Keys ``(model, row)`` where
    ``row`` is :data:`ELITE_ROW` (per-league rho averaged across leagues) or
    a target domain; per-domain reports are under ``(model, "domain", name)``."""
    if not {"shapley", "cis"} <= set(cfg.methods):
        raise SchemaError("method agreement needs both shapley and cis")
    ctx = _context(cfg, ctx)
    out: dict = {}
    names = list(ctx.data.leagues) + list(ctx.data.targets)
    for kind in cfg.explain_models:
        per = {}
        for d in names:
            shap = [ctx.shapley_importance(kind, s, d) for s in cfg.seeds]
            cis = [ctx.cis_result(kind, s, d) for s in cfg.seeds]
            rep = method_agreement(shap, cis, _pv(cfg))
            rep.context = {"model": kind, "domain": d}
            per[d] = rep
            out[(kind, "domain", d)] = rep
        out[(kind, ELITE_ROW)] = average_reports([per[d] for d in ctx.data.leagues])
        for d in ctx.data.targets:
            out[(kind, d)] = per[d]
    return out


def _pv(cfg: AuditConfig) -> str:
    return cfg.pvalue


# --------------------------------------------------------------------------- run + export


@dataclass
class AuditRunRecord:
    config_hash: str
    outputs: dict[str, str]
    timing: dict[str, float]
    version: str = __version__
    started: str = ""
    finished: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class AuditResults:
    exp1: dict
    exp2: dict
    exp3: dict
    exp4: dict
    exp5: dict
    record: AuditRunRecord


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _seed_label(s) -> str:
    return "mean" if s is None else str(s)


def export(cfg: AuditConfig, ctx: AuditContext, e1, e2, e3, e4, e5, out_dir: Path) -> dict[str, Path]:
    """Write every table (and figure, when enabled); returns name -> path."""
    h = cfg.config_hash
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    rows = []
    for kind, rep in e1.items():
        for e in rep.entries:
            rows.append((h, kind, "" if e.seed < 0 else e.seed, e.mae, e.rmse, e.n))
    paths["exp1_eval.csv"] = write_csv(out_dir / "exp1_eval.csv",
                                       ["config_hash", "model", "seed", "mae", "rmse", "n_test"], rows)
    rows = []
    for kind, rep in e1.items():
        (mm, ms), (rm, rs) = rep.mae, rep.rmse
        rows.append((h, kind, len(rep.entries), mm, ms, rm, rs))
    paths["exp1_summary.csv"] = write_csv(
        out_dir / "exp1_summary.csv",
        ["config_hash", "model", "n_seeds", "mae_mean", "mae_std", "rmse_mean", "rmse_std"], rows)

    rows = []
    feats = ctx.features
    for (kind, method, domain, s), vec in e2.items():
        norm = vec.normalized()
        for f, v, nv in zip(feats, vec.values, norm):
            rows.append((h, kind, method, domain, _seed_label(s), f, float(v), float(nv)))
    paths["exp2_importance.csv"] = write_csv(
        out_dir / "exp2_importance.csv",
        ["config_hash", "model", "method", "domain", "seed", "feature", "importance", "normalized"],
        rows)

    rows, summ = [], []
    for (kind, method, domain), rep in e3.items():
        for (a, b), r, p in zip(rep.labels, rep.rhos, rep.p_values):
            rows.append((h, kind, method, domain, a, b, r, p))
        summ.append((h, kind, method, domain, len(rep.rhos), rep.mean, rep.std, rep.median_p))
    paths["exp3_seed_stability.csv"] = write_csv(
        out_dir / "exp3_seed_stability.csv",
        ["config_hash", "model", "method", "domain", "seed_a", "seed_b", "rho", "p_value"], rows)
    paths["exp3_summary.csv"] = write_csv(
        out_dir / "exp3_summary.csv",
        ["config_hash", "model", "method", "domain", "n_pairs", "rho_mean", "rho_std", "median_p"],
        summ)

    rows = []
    for (kind, method), mat in e4.items():
        for i, a in enumerate(mat.labels):
            for j, b in enumerate(mat.labels):
                rows.append((h, kind, method, a, b, float(mat.rho[i, j]), float(mat.p_value[i, j])))
    paths["exp4_domain_agreement.csv"] = write_csv(
        out_dir / "exp4_domain_agreement.csv",
        ["config_hash", "model", "method", "domain_a", "domain_b", "rho", "p_value"], rows)

    rows, summ = [], []
    for key, rep in e5.items():
        if len(key) == 3:
            kind, _, domain = key
            for (s, _), r, p in zip(rep.labels, rep.rhos, rep.p_values):
                rows.append((h, kind, domain, s, r, p))
        else:
            kind, row = key
            summ.append((h, kind, row, len(rep.rhos), rep.mean, rep.std, rep.median_p))
    paths["exp5_method_agreement.csv"] = write_csv(
        out_dir / "exp5_method_agreement.csv",
        ["config_hash", "model", "domain", "seed", "rho", "p_value"], rows)
    paths["exp5_summary.csv"] = write_csv(
        out_dir / "exp5_summary.csv",
        ["config_hash", "model", "row", "n_seeds", "rho_mean", "rho_std", "median_p"], summ)

    if ctx.data.exclusions:
        paths["exclusions.csv"] = write_csv(out_dir / "exclusions.csv",
                                            ["config_hash", "domain", "match_id", "reason"],
                                            [(h, *e) for e in ctx.data.exclusions])
    if cfg.render:
        paths.update(_figures(cfg, ctx, e2, e3, e4, out_dir))
    if cfg.save_models:
        mdir = out_dir / "models"
        mdir.mkdir(exist_ok=True)
        for (kind, s), m in sorted(ctx.models.items()):
            p = mdir / f"{kind}_seed{s}.json"
            save_model(m, p)
            paths[f"models/{p.name}"] = p
    return paths


def _figures(cfg, ctx, e2, e3, e4, out_dir: Path) -> dict[str, Path]:
    note = f"config {cfg.config_hash}"
    paths = {}
    feats = list(ctx.features)
    for kind in cfg.explain_models:
        for method in cfg.methods:
            groups = {d: e2[(kind, method, d, None)].normalized() for d in ctx.data.domains}
            name = f"exp2_{kind}_{method}.svg"
            p = out_dir / name
            p.write_text(bars_svg(feats, groups, f"{kind} {method} importance (normalized)", note),
                         encoding="utf-8")
            paths[name] = p
    if e3:
        groups = {f"{k} {d}": rep.rhos for (k, m, d), rep in e3.items() if m == "shapley"}
        if groups:
            p = out_dir / "exp3_seed_stability.svg"
            p.write_text(box_svg(groups, "seed-wise rank agreement (shapley)", note),
                         encoding="utf-8")
            paths[p.name] = p
    for (kind, method), mat in e4.items():
        name = f"exp4_{kind}_{method}.svg"
        p = out_dir / name
        p.write_text(heatmap_svg(mat.labels, mat.rho, f"{kind} {method} cross-domain agreement",
                                 note), encoding="utf-8")
        paths[name] = p
    return paths


def run_audit(cfg: AuditConfig, out_dir=None) -> AuditResults:
    """Run all five experiments and write reports plus ``manifest.json``."""
    started = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    t0 = time.perf_counter()
    out_dir = Path(out_dir if out_dir is not None else cfg.resolve(cfg.output_dir))
    # BLAS stays single-threaded so every sum has one fixed order; parallelism
    # comes from the tree and attribution workers
    with threadpool_limits(limits=1):
        ctx = AuditContext.build(cfg)
        e1 = run_experiment1(cfg, ctx)
        e2 = run_experiment2(cfg, ctx)
        e3 = run_experiment3(cfg, ctx)
        e4 = run_experiment4(cfg, ctx)
        e5 = run_experiment5(cfg, ctx)
        paths = export(cfg, ctx, e1, e2, e3, e4, e5, out_dir)
    timing = {k: round(v, 3) for k, v in sorted(ctx.timing.items())}
    timing["total"] = round(time.perf_counter() - t0, 3)
    record = AuditRunRecord(
        cfg.config_hash,
        {name: str(p.relative_to(out_dir)) for name, p in sorted(paths.items())},
        timing, __version__, started,
        _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    )
    write_json(out_dir / "manifest.json", {
        **record.to_dict(),
        "config": cfg.to_dict(),
        "sha256": {name: _sha256(p) for name, p in sorted(paths.items())},
    })
    return AuditResults(e1, e2, e3, e4, e5, record)


__all__ = [
    "AuditContext", "AuditData", "AuditResults", "AuditRunRecord", "AuditError", "OUTPUTS",
    "prepare_data", "run_audit", "run_experiment1", "run_experiment2", "run_experiment3",
    "run_experiment4", "run_experiment5", "synth_spec",
]
