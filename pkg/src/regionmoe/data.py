"""Feature schema, cohort CSV I/O, per-fold z-scoring, stratified folds."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import CohortError, SchemaError, StratificationError

CLASS_NAMES = ("CN", "MCI", "AD")
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class Region:
    name: str
    columns: tuple[str, ...]


@dataclass(frozen=True)
class Modality:
    name: str
    regions: tuple[Region, ...]

    @property
    def columns(self) -> tuple[str, ...]:
        return tuple(c for r in self.regions for c in r.columns)


@dataclass(frozen=True)
class Block:
    """One expert's slice of the concatenated feature vector."""

    modality: str
    region: str
    modality_index: int
    region_index: int
    start: int
    stop: int

    @property
    def dim(self) -> int:
        return self.stop - self.start

    @property
    def label(self) -> str:
        return f"{self.modality}:{self.region}"


@dataclass(frozen=True)
class FeatureSchema:
    modalities: tuple[Modality, ...]
    label_column: str = "label"
    id_column: str = "id"
    categorical: frozenset[str] = frozenset()

    def __post_init__(self):
        if not self.modalities:
            raise SchemaError("schema needs at least one modality")
        seen: set[str] = set()
        mod_names: set[str] = set()
        for mod in self.modalities:
            if mod.name in mod_names:
                raise SchemaError(f"duplicate modality {mod.name!r}")
            mod_names.add(mod.name)
            if not mod.regions:
                raise SchemaError(f"modality {mod.name!r} has no regions")
            for reg in mod.regions:
                if not reg.columns:
                    raise SchemaError(f"region {mod.name}:{reg.name} has no columns")
                for col in reg.columns:
                    if col in seen:
                        raise SchemaError(f"duplicate column {col!r}")
                    if col in (self.label_column, self.id_column):
                        raise SchemaError(f"column {col!r} collides with id/label column")
                    seen.add(col)

    @property
    def columns(self) -> list[str]:
        return [c for m in self.modalities for c in m.columns]

    @property
    def modality_names(self) -> list[str]:
        return [m.name for m in self.modalities]

    @property
    def n_features(self) -> int:
        return len(self.columns)

    @property
    def blocks(self) -> list[Block]:
        out, pos = [], 0
        for k, mod in enumerate(self.modalities):
            for r, reg in enumerate(mod.regions):
                out.append(Block(mod.name, reg.name, k, r, pos, pos + len(reg.columns)))
                pos += len(reg.columns)
        return out

    @property
    def n_experts(self) -> int:
        return sum(len(m.regions) for m in self.modalities)

    def modality_slice(self, k: int) -> slice:
        start = sum(len(m.columns) for m in self.modalities[:k])
        return slice(start, start + len(self.modalities[k].columns))

    def column_modality(self) -> np.ndarray:
        """Modality index of every feature column."""
        return np.array([k for k, m in enumerate(self.modalities) for _ in m.columns], dtype=np.intp)

    def drop_modality(self, name: str) -> "FeatureSchema":
        if name not in self.modality_names:
            raise SchemaError(f"unknown modality {name!r}")
        if len(self.modalities) == 1:
            raise SchemaError(f"cannot drop {name!r}: it is the only modality")
        return replace(self, modalities=tuple(m for m in self.modalities if m.name != name))

    def only_modality(self, name: str) -> "FeatureSchema":
        if name not in self.modality_names:
            raise SchemaError(f"unknown modality {name!r}")
        return replace(self, modalities=tuple(m for m in self.modalities if m.name == name))

    def to_dict(self) -> dict:
        def col(c):
            return {"name": c, "categorical": True} if c in self.categorical else c

        return {
            "modalities": [
                {"name": m.name, "regions": [{"name": r.name, "columns": [col(c) for c in r.columns]} for r in m.regions]}
                for m in self.modalities
            ],
            "label_column": self.label_column,
            "id_column": self.id_column,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FeatureSchema":
        categorical = set()
        try:
            mods = []
            for i, m in enumerate(doc["modalities"]):
                regions = []
                for j, r in enumerate(m["regions"]):
                    cols = []
                    for c in r["columns"]:
                        if isinstance(c, dict):
                            if c.get("categorical"):
                                categorical.add(c["name"])
                            c = c["name"]
                        if not isinstance(c, str):
                            raise SchemaError(f"modalities[{i}].regions[{j}]: column names must be strings")
                        cols.append(c)
                    regions.append(Region(str(r["name"]), tuple(cols)))
                mods.append(Modality(str(m["name"]), tuple(regions)))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema, missing or bad key: {exc}") from exc
        return cls(
            tuple(mods),
            label_column=doc.get("label_column", "label"),
            id_column=doc.get("id_column", "id"),
            categorical=frozenset(categorical),
        )


def load_schema(path) -> FeatureSchema:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from exc
    return FeatureSchema.from_dict(doc)


def save_schema(schema: FeatureSchema, path):
    Path(path).write_text(json.dumps(schema.to_dict(), indent=2) + "\n", encoding="utf-8")


def bundled_schema_path() -> Path:
    return Path(__file__).parent / "resources" / "adni_like.schema.json"


# -- cohorts -----------------------------------------------------------------


@dataclass
class SubjectRecord:
    id: str
    blocks: dict[tuple[str, str], np.ndarray]
    availability: dict[str, bool]
    label: int


@dataclass
class Cohort:
    """Column-major view of a cohort.

    ``X`` holds raw values with NaN in unavailable modalities; after
    ``zscore_apply`` it holds normalized values with zeros there instead.
    """

    schema: FeatureSchema
    ids: list[str]
    X: np.ndarray  # (n, D)
    avail: np.ndarray  # (n, M) bool
    y: np.ndarray  # (n,) int
    num_classes: int = len(CLASS_NAMES)
    normalized: bool = False

    def __post_init__(self):
        n = len(self.ids)
        if self.X.shape != (n, self.schema.n_features):
            raise CohortError(f"feature matrix shape {self.X.shape} != ({n}, {self.schema.n_features})")
        if self.avail.shape != (n, len(self.schema.modalities)):
            raise CohortError(f"availability shape {self.avail.shape} != ({n}, {len(self.schema.modalities)})")
        if self.y.shape != (n,):
            raise CohortError("label vector length mismatch")

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "Cohort":
        idx = np.asarray(idx)
        return replace(self, ids=[self.ids[i] for i in np.arange(len(self))[idx]], X=self.X[idx], avail=self.avail[idx], y=self.y[idx])

    def expert_avail(self) -> np.ndarray:
        mods = np.array([b.modality_index for b in self.schema.blocks], dtype=np.intp)
        return self.avail[:, mods]

    def features(self) -> np.ndarray:
        """Model-ready matrix: NaN (missing) replaced by zero."""
        return np.where(np.isnan(self.X), 0.0, self.X)

    def record(self, i: int) -> SubjectRecord:
        x = self.features()[i]
        return SubjectRecord(
            id=self.ids[i],
            blocks={(b.modality, b.region): x[b.start : b.stop].copy() for b in self.schema.blocks},
            availability={m: bool(a) for m, a in zip(self.schema.modality_names, self.avail[i])},
            label=int(self.y[i]),
        )

    def records(self) -> Iterator[SubjectRecord]:
        for i in range(len(self)):
            yield self.record(i)

    def restrict(self, schema: FeatureSchema) -> "Cohort":
        """Keep only the modalities present in ``schema`` (by name), dropping
        subjects left with no available modality."""
        names = self.schema.modality_names
        keep_mods = [names.index(m.name) for m in schema.modalities]
        cols = np.concatenate([np.arange(self.schema.n_features)[self.schema.modality_slice(k)] for k in keep_mods])
        avail = self.avail[:, keep_mods]
        rows = avail.any(axis=1)
        return Cohort(
            schema,
            [i for i, r in zip(self.ids, rows) if r],
            self.X[rows][:, cols],
            avail[rows],
            self.y[rows],
            self.num_classes,
            self.normalized,
        )


def parse_label(token: str) -> int:
    t = token.strip()
    if t in CLASS_NAMES:
        return CLASS_NAMES.index(t)
    if t.isdigit():
        return int(t)
    raise CohortError(f"unknown label token {token!r}; expected one of {CLASS_NAMES} or an integer index")


def load_cohort(csv_path, schema: FeatureSchema) -> Cohort:
    """Read a cohort CSV. Categorical columns are one-hot expanded (categories
    sorted lexicographically) and the returned cohort carries the expanded schema."""
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in [schema.id_column, schema.label_column, *schema.columns] if c not in header]
        if missing:
            raise CohortError(f"{csv_path}: missing required column(s) {missing}")
        rows = list(reader)

    cats = {c: sorted({r[c].strip() for r in rows if r[c].strip()}) for c in schema.categorical}

    def expand(c: str) -> tuple[str, ...]:
        return tuple(f"{c}={v}" for v in cats[c]) if c in cats else (c,)

    resolved = FeatureSchema(
        tuple(Modality(m.name, tuple(Region(r.name, tuple(e for c in r.columns for e in expand(c))) for r in m.regions)) for m in schema.modalities),
        label_column=schema.label_column,
        id_column=schema.id_column,
    )

    n, M = len(rows), len(schema.modalities)
    X = np.full((n, resolved.n_features), np.nan)
    avail = np.zeros((n, M), dtype=bool)
    y = np.zeros(n, dtype=np.int64)
    for i, row in enumerate(rows):
        line = i + 2
        try:
            y[i] = parse_label(row[schema.label_column])
        except CohortError as exc:
            raise CohortError(f"{csv_path}:{line}: {exc}") from None
        pos = 0
        for k, mod in enumerate(schema.modalities):
            cells = [row[c].strip() for c in mod.columns]
            width = sum(len(expand(c)) for c in mod.columns)
            present = [bool(v) for v in cells]
            if not any(present):
                pos += width
                continue
            if not all(present):
                empty = [c for c, p in zip(mod.columns, present) if not p]
                raise CohortError(f"{csv_path}:{line}: modality {mod.name!r} partially missing (empty: {empty})")
            avail[i, k] = True
            for c, v in zip(mod.columns, cells):
                if c in cats:
                    X[i, pos : pos + len(cats[c])] = [1.0 if v == cat else 0.0 for cat in cats[c]]
                    pos += len(cats[c])
                else:
                    try:
                        X[i, pos] = float(v)
                    except ValueError:
                        raise CohortError(f"{csv_path}:{line}: column {c!r} is not numeric: {v!r}") from None
                    pos += 1
    num_classes = max(len(CLASS_NAMES), int(y.max()) + 1 if n else 0)
    return Cohort(resolved, [row[schema.id_column] for row in rows], X, avail, y, num_classes)


def _fmt(v: float) -> str:
    return "" if np.isnan(v) else repr(float(v))


def write_cohort(cohort: Cohort, csv_path):
    schema = cohort.schema
    cols = schema.columns
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([schema.id_column, *cols, schema.label_column])
        for i in range(len(cohort)):
            label = CLASS_NAMES[cohort.y[i]] if cohort.num_classes == len(CLASS_NAMES) else str(int(cohort.y[i]))
            w.writerow([cohort.ids[i], *(_fmt(v) for v in cohort.X[i]), label])


# -- normalization -----------------------------------------------------------


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray  # already floored at STD_FLOOR

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "NormStats":
        return cls(np.array(doc["mean"], dtype=np.float64), np.array(doc["std"], dtype=np.float64))


def zscore_fit(train: Cohort) -> NormStats:
    """Population mean/std per column over training rows whose modality is available."""
    if train.normalized:
        raise CohortError("zscore_fit expects raw (unnormalized) features")
    col_mod = train.schema.column_modality()
    D = train.schema.n_features
    mean, std = np.empty(D), np.empty(D)
    for j in range(D):
        vals = train.X[train.avail[:, col_mod[j]], j]
        if vals.size == 0:
            raise CohortError(f"no available training rows for column {train.schema.columns[j]!r}")
        mean[j] = vals.mean()
        std[j] = vals.std()
    return NormStats(mean, np.maximum(std, STD_FLOOR))


def zscore_apply(cohort: Cohort, stats: NormStats) -> Cohort:
    if cohort.normalized:
        raise CohortError("cohort is already normalized")
    if stats.mean.shape != (cohort.schema.n_features,):
        raise CohortError(f"NormStats cover {stats.mean.shape[0]} columns, cohort has {cohort.schema.n_features}")
    Z = (cohort.X - stats.mean) / stats.std
    col_avail = cohort.avail[:, cohort.schema.column_modality()]
    Z = np.where(col_avail, Z, 0.0)
    return replace(cohort, X=Z, normalized=True)


# -- folds -------------------------------------------------------------------


@dataclass
class FoldPlan:
    k: int
    seed: int
    assignments: dict[str, int]
    fold_of: np.ndarray = field(repr=False)

    def test_index(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == fold)

    def train_index(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != fold)

    def fold_of_ids(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self.assignments[i] for i in ids], dtype=np.intp)


def stratified_kfold(labels, k: int, seed: int, ids: Sequence[str] | None = None, num_classes: int | None = None) -> FoldPlan:
    """Seeded per-class shuffle, then round-robin over folds. The round-robin
    position carries over between classes so fold sizes also stay balanced."""
    y = np.asarray(labels)
    if k < 2:
        raise StratificationError("k must be at least 2")
    ids = [str(i) for i in range(len(y))] if ids is None else list(ids)
    C = int(y.max()) + 1 if num_classes is None else num_classes
    counts = np.bincount(y, minlength=C)
    small = [c for c in range(C) if counts[c] < k]
    if small:
        raise StratificationError(f"class(es) {small} have fewer than k={k} members (counts {counts.tolist()})")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(y), dtype=np.intp)
    offset = 0
    for c in range(C):
        members = rng.permutation(np.flatnonzero(y == c))
        fold_of[members] = (offset + np.arange(len(members))) % k
        offset = (offset + len(members)) % k
    return FoldPlan(k, seed, dict(zip(ids, fold_of.tolist())), fold_of)


def slug(name: str) -> str:
    return re.sub(r"[^0-9a-z]+", "_", name.lower()).strip("_")
