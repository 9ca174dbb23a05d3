"""Match-event data model, CSV ingest, leakage-safe splitting and perspective expansion.

Match files are UTF-8 CSV with a header row::

    match_id, domain, [season], home_<event>..., away_<event>...

where ``<event>`` runs over :data:`EVENTS`. ``home_goal`` is the home side's
goals and ``home_enemy_goal`` the goals it conceded, so a consistent row has
``home_goal == away_enemy_goal`` and ``home_enemy_goal == away_goal``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .errors import SchemaError

FEATURES: tuple[str, ...] = (
    "shot_on_target",
    "shot_off_target",
    "blocked_shot",
    "pass_success",
    "pass_fail",
    "dribble_success",
    "dribble_fail",
    "offside",
    "corner",
    "tackle_success",
    "tackle_fail",
    "touch",
    "block",
    "interception",
    "clearance",
    "save",
    "foul",
)
EVENTS: tuple[str, ...] = FEATURES + ("goal", "enemy_goal")

ELITE = "elite"
TARGET = "target"
SIDES = ("home", "away")

# Failure-type names perturbed downward by CIS besides anything containing "fail".
_DECREASE_NAMES = frozenset({"offside", "foul", "fouls"})


def is_failure_type(name: str) -> bool:
    lowered = name.lower()
    return "fail" in lowered or lowered in _DECREASE_NAMES


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered model inputs plus the two goal columns that define the target.

    ``direction`` holds +1 (increase) or -1 (decrease) per feature and is
    derived from the feature names.
    """

    feature_names: tuple[str, ...] = FEATURES
    target_pos: str = "goal"
    target_neg: str = "enemy_goal"

    def __post_init__(self):
        names = tuple(self.feature_names)
        object.__setattr__(self, "feature_names", names)
        if len(names) < 1:
            raise SchemaError("schema needs at least one feature")
        if len(set(names)) != len(names):
            raise SchemaError("feature names must be unique")
        if self.target_pos == self.target_neg:
            raise SchemaError("target columns must differ")
        if self.target_pos in names or self.target_neg in names:
            raise SchemaError("target columns cannot be features")

    @property
    def p(self) -> int:
        return len(self.feature_names)

    @property
    def events(self) -> tuple[str, ...]:
        return self.feature_names + (self.target_pos, self.target_neg)

    @property
    def direction(self) -> tuple[int, ...]:
        return tuple(-1 if is_failure_type(n) else 1 for n in self.feature_names)

    def columns(self) -> list[str]:
        return [f"{side}_{e}" for side in SIDES for e in self.events]


@dataclass(frozen=True)
class MatchRecord:
    """Both teams' event counts for one fixture, in ``schema.events`` order."""

    match_id: str
    domain: str
    home: tuple[int, ...]
    away: tuple[int, ...]
    season: str = ""

    def __post_init__(self):
        for side in (self.home, self.away):
            if any((not isinstance(c, (int, np.integer))) or c < 0 for c in side):
                raise ValueError(f"match {self.match_id}: counts must be nonnegative integers")


@dataclass(frozen=True)
class Exclusion:
    match_id: str
    reason: str


@dataclass
class IngestResult:
    records: list[MatchRecord]
    exclusions: list[Exclusion]

    def __iter__(self):
        yield self.records
        yield self.exclusions


class Sample(NamedTuple):
    x: np.ndarray
    y: int
    match_id: str
    perspective: str
    domain: str


@dataclass
class DomainDataset:
    """Column-wise collection of perspective samples.

    ``role`` is :data:`ELITE` or :data:`TARGET`; ``split`` names where the
    rows came from (``train``, ``val``, ``test`` or ``all``). Both tags travel
    with every derived object so protocol checks can be made downstream.
    """

    schema: FeatureSchema
    X: np.ndarray
    y: np.ndarray
    match_ids: np.ndarray
    perspectives: np.ndarray
    domains: np.ndarray
    label: str
    role: str = ELITE
    split: str = "all"

    def __post_init__(self):
        self.X = np.asarray(self.X)
        if self.X.ndim != 2 or self.X.shape[1] != self.schema.p:
            raise SchemaError(f"expected {self.schema.p} feature columns, got shape {self.X.shape}")
        n = self.X.shape[0]
        for name in ("y", "match_ids", "perspectives", "domains"):
            if len(getattr(self, name)) != n:
                raise SchemaError(f"{name} length does not match X")

    def __len__(self) -> int:
        return self.X.shape[0]

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield Sample(self.X[i], int(self.y[i]), str(self.match_ids[i]),
                         str(self.perspectives[i]), str(self.domains[i]))

    @property
    def features(self) -> np.ndarray:
        """Inputs promoted to float for the model boundary."""
        return self.X.astype(np.float64)

    @property
    def tag(self) -> str:
        return f"{self.role}-{self.split}"

    def subset(self, mask, label: str | None = None) -> "DomainDataset":
        return DomainDataset(
            self.schema, self.X[mask], self.y[mask], self.match_ids[mask],
            self.perspectives[mask], self.domains[mask],
            label or self.label, self.role, self.split,
        )


@dataclass
class SplitDataset:
    train: DomainDataset
    val: DomainDataset
    test: DomainDataset

    def __post_init__(self):
        ids = [set(ds.match_ids.tolist()) for ds in (self.train, self.val, self.test)]
        if ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2]:
            raise ValueError("splits share match ids")


@dataclass(frozen=True)
class Partition:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def parts(self) -> dict[str, tuple[str, ...]]:
        return {"train": self.train, "val": self.val, "test": self.test}


@dataclass(frozen=True)
class DomainStats:
    """Per-feature mean and population standard deviation."""

    mu: np.ndarray
    sigma: np.ndarray
    source: str = field(default="elite-train")


# --------------------------------------------------------------------------- ingest


def _parse_count(raw: str) -> int:
    raw = raw.strip()
    value = int(raw)  # rejects "1.5", "", "abc"
    if value < 0:
        raise ValueError("negative count")
    return value


def ingest_matches(path, schema: FeatureSchema | None = None,
                   adjudicated: dict | None = None) -> IngestResult:
    """Read and validate a match CSV.

    Rows with unparseable or negative counts, inconsistent scorelines or a
    repeated ``match_id`` are dropped and reported, never imputed. A missing
    column raises :class:`SchemaError`.

    ``adjudicated`` maps ``(match_id, perspective, event)`` to a count that
    overrides the file value (see :func:`read_adjudication`).
    """
    schema = schema or FeatureSchema()
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"no such file: {path}")
    required = ["match_id", "domain"] + schema.columns()
    records: list[MatchRecord] = []
    exclusions: list[Exclusion] = []
    seen: set[str] = set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"missing required column(s): {', '.join(missing)}")
        for row in reader:
            match_id = (row["match_id"] or "").strip()
            if match_id in seen:
                exclusions.append(Exclusion(match_id, "duplicate"))
                continue
            try:
                sides = {}
                for side in SIDES:
                    counts = []
                    for event in schema.events:
                        key = (match_id, side, event)
                        if adjudicated is not None and key in adjudicated:
                            counts.append(int(adjudicated[key]))
                        else:
                            counts.append(_parse_count(row[f"{side}_{event}"] or ""))
                    sides[side] = tuple(counts)
                if not match_id:
                    raise ValueError("empty match id")
            except (ValueError, TypeError):
                exclusions.append(Exclusion(match_id, "unparseable"))
                continue
            seen.add(match_id)
            home, away = sides["home"], sides["away"]
            if home[-2] != away[-1] or home[-1] != away[-2]:
                exclusions.append(Exclusion(match_id, "inconsistent_score"))
                continue
            records.append(MatchRecord(match_id, row["domain"].strip(), home, away,
                                       (row.get("season") or "").strip()))
    return IngestResult(records, exclusions)


def write_matches(records: Iterable[MatchRecord], path, schema: FeatureSchema | None = None):
    schema = schema or FeatureSchema()
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["match_id", "domain", "season"] + schema.columns())
        for r in records:
            w.writerow([r.match_id, r.domain, r.season, *r.home, *r.away])


def write_exclusions(exclusions: Iterable[Exclusion], path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["match_id", "reason"])
        for e in exclusions:
            w.writerow([e.match_id, e.reason])


# --------------------------------------------------------------------------- adjudication


def adjudicate(counts: Sequence[int]) -> int:
    """Resolve three annotators' counts: majority value, else the median."""
    if len(counts) != 3:
        raise ValueError("adjudication needs exactly three counts")
    a, b, c = (int(v) for v in counts)
    if a == b or a == c:
        return a
    if b == c:
        return b
    return sorted((a, b, c))[1]


def read_adjudication(path) -> dict[tuple[str, str, str], int]:
    """Load a three-referee CSV and return adjudicated counts keyed by
    ``(match_id, perspective, event)``."""
    cols = ["match_id", "perspective", "event", "count_ref1", "count_ref2", "count_ref3"]
    out: dict[tuple[str, str, str], int] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in cols if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"missing required column(s): {', '.join(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                refs = [_parse_count(row[c]) for c in cols[3:]]
            except ValueError as exc:
                raise SchemaError(f"line {lineno}: unparseable referee count") from exc
            perspective = row["perspective"].strip()
            if perspective not in SIDES:
                raise SchemaError(f"line {lineno}: perspective must be home or away")
            out[(row["match_id"].strip(), perspective, row["event"].strip())] = adjudicate(refs)
    return out


# --------------------------------------------------------------------------- splitting


def largest_remainder(n: int, ratios: Sequence[int | float]) -> list[int]:
    """Apportion ``n`` items by ``ratios``; leftover units go to the largest
    fractional remainders, ties to the earlier part."""
    fr = [Fraction(r).limit_denominator(10**6) for r in ratios]
    total = sum(fr)
    quotas = [n * r / total for r in fr]
    sizes = [math.floor(q) for q in quotas]
    order = sorted(range(len(fr)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_matches(records: Sequence[MatchRecord], ratios=(8, 1, 1), seed: int = 0) -> Partition:
    """Random match-level train/val/test partition.

    Ids are sorted before shuffling, so the result depends only on the set of
    records and the seed. Every part receives at least one match.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError("ratios must be three positive numbers")
    ids = sorted(r.match_id for r in records)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate match ids")
    if len(ids) < 3:
        raise ValueError("insufficient matches")
    sizes = largest_remainder(len(ids), ratios)
    for i in range(3):
        if sizes[i] == 0:
            donor = max(range(3), key=lambda k: (sizes[k], -k))
            sizes[donor] -= 1
            sizes[i] += 1
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    a, b = sizes[0], sizes[0] + sizes[1]
    return Partition(tuple(sorted(shuffled[:a])), tuple(sorted(shuffled[a:b])),
                     tuple(sorted(shuffled[b:])))


# --------------------------------------------------------------------------- expansion


def expand_perspectives(records: Sequence[MatchRecord], schema: FeatureSchema | None = None,
                        label: str = "", role: str = ELITE, split: str = "all") -> DomainDataset:
    """Two samples per match: the home view then the away view."""
    schema = schema or FeatureSchema()
    p = schema.p
    n = 2 * len(records)
    X = np.zeros((n, p), dtype=np.int64)
    y = np.zeros(n, dtype=np.int64)
    mids = np.empty(n, dtype=object)
    persp = np.empty(n, dtype=object)
    doms = np.empty(n, dtype=object)
    for i, r in enumerate(records):
        for k, (side, own) in enumerate((("home", r.home), ("away", r.away))):
            row = 2 * i + k
            X[row] = own[:p]
            y[row] = own[p] - own[p + 1]
            mids[row] = r.match_id
            persp[row] = side
            doms[row] = r.domain
    return DomainDataset(schema, X, y, mids, persp, doms, label, role, split)


def expand_split(records: Sequence[MatchRecord], partition: Partition,
                 schema: FeatureSchema | None = None, label: str = "",
                 role: str = ELITE) -> SplitDataset:
    by_id = {r.match_id: r for r in records}
    parts = {
        name: expand_perspectives([by_id[m] for m in ids], schema, label, role, name)
        for name, ids in partition.parts().items()
    }
    return SplitDataset(**parts)


def compute_stats(ds: DomainDataset) -> DomainStats:
    """Per-feature mean and divisor-N standard deviation of ``ds``."""
    if len(ds) == 0:
        raise ValueError("cannot compute statistics of an empty dataset")
    X = ds.features
    return DomainStats(X.mean(axis=0), X.std(axis=0), ds.tag)
