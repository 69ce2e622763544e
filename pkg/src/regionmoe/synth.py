"""Synthetic multimodal cohorts with planted class signal in chosen blocks.

Each block's standardized features are ``class_mean + noise * eps``. Only
planted blocks have class-dependent means; every column then gets a random
affine offset/scale so normalization has real work to do. Because the model is
known, the Bayes-optimal accuracy can be estimated by Monte Carlo.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Cohort, FeatureSchema, Modality, Region, slug
from .errors import ConfigError

DEFAULT_REGIONS = (
    "Frontal",
    "Temporal",
    "Parietal",
    "Occipital",
    "Cingulate",
    "Insula",
    "Subcortical Temporal",
    "Ventricular",
    "Brainstem",
    "Striatum/Basal Ganglia",
    "Thalamus",
    "Cerebellum",
    "Corpus Callosum White Matter",
    "Other",
)
DEMOGRAPHIC_COLUMNS = ("age", "sex", "education", "race", "ethnicity", "apoe")


@dataclass
class ModalityShape:
    name: str
    regions: list[str]
    columns_per_region: int = 3
    missing_rate: float = 0.0
    # explicit column names for single-region modalities (demographics)
    column_names: list[str] | None = None


@dataclass
class PlantedBlock:
    modality: str
    region: str
    effect: float | None = None  # falls back to SynthSpec.effect_size
    # per-class multipliers of the block's unit direction; default is centred ordinal
    pattern: list[float] | None = None


@dataclass
class SynthSpec:
    n_subjects: int = 1200
    modalities: list[ModalityShape] = field(default_factory=list)
    planted: list[PlantedBlock] = field(default_factory=list)
    class_proportions: list[float] = field(default_factory=lambda: [1 / 3, 1 / 3, 1 / 3])
    effect_size: float = 1.5
    noise: float = 1.0
    mc_draws: int = 100_000

    @property
    def num_classes(self) -> int:
        return len(self.class_proportions)

    def validate(self):
        if self.n_subjects < 1:
            raise ConfigError("n_subjects must be positive")
        if self.effect_size < 0 or any(p.effect is not None and p.effect < 0 for p in self.planted):
            raise ConfigError("effect size must be >= 0")
        if self.noise <= 0:
            raise ConfigError("noise must be > 0")
        if abs(sum(self.class_proportions) - 1.0) > 1e-9 or min(self.class_proportions) <= 0:
            raise ConfigError("class_proportions must be positive and sum to 1")
        names = {m.name: m for m in self.modalities}
        if not names:
            raise ConfigError("at least one modality required")
        for m in self.modalities:
            if not 0.0 <= m.missing_rate < 1.0:
                raise ConfigError(f"missing_rate for {m.name} must be in [0, 1)")
        if all(m.missing_rate > 0 for m in self.modalities):
            raise ConfigError("at least one modality must be always observed")
        for p in self.planted:
            if p.modality not in names or p.region not in names[p.modality].regions:
                raise ConfigError(f"planted block {p.modality}:{p.region} not in schema")
            if p.pattern is not None and len(p.pattern) != self.num_classes:
                raise ConfigError("planted pattern needs one entry per class")

    def schema(self) -> FeatureSchema:
        mods = []
        for m in self.modalities:
            regions = []
            for r in m.regions:
                if m.column_names is not None and len(m.regions) == 1:
                    cols = tuple(m.column_names)
                else:
                    cols = tuple(f"{slug(m.name)}_{slug(r)}_{j + 1}" for j in range(m.columns_per_region))
                regions.append(Region(r, cols))
            mods.append(Modality(m.name, tuple(regions)))
        return FeatureSchema(tuple(mods))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthSpec":
        doc = dict(doc)
        doc["modalities"] = [ModalityShape(**m) for m in doc.get("modalities", [])]
        doc["planted"] = [PlantedBlock(**p) for p in doc.get("planted", [])]
        return cls(**doc)


def default_spec(**overrides) -> SynthSpec:
    """Two imaging modalities x 14 regions x 3 columns plus 6 demographic columns."""
    spec = SynthSpec(
        modalities=[
            ModalityShape("MRI", list(DEFAULT_REGIONS), 3),
            ModalityShape("PET", list(DEFAULT_REGIONS), 3),
            ModalityShape("Demographic", ["Demographic"], len(DEMOGRAPHIC_COLUMNS), column_names=list(DEMOGRAPHIC_COLUMNS)),
        ],
        planted=[
            PlantedBlock("MRI", "Temporal"),
            PlantedBlock("MRI", "Subcortical Temporal"),
            PlantedBlock("PET", "Brainstem"),
            PlantedBlock("PET", "Striatum/Basal Ganglia"),
        ],
    )
    for k, v in overrides.items():
        if not hasattr(spec, k):
            raise ConfigError(f"unknown synth spec field {k!r}")
        setattr(spec, k, v)
    return spec


def load_spec(path) -> SynthSpec:
    return SynthSpec.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _class_counts(n: int, props) -> np.ndarray:
    raw = np.asarray(props) * n
    counts = np.floor(raw).astype(int)
    rem = n - counts.sum()
    # largest remainder, ties to lowest class index
    order = sorted(range(len(props)), key=lambda c: (-(raw[c] - counts[c]), c))
    for c in order[:rem]:
        counts[c] += 1
    return counts


@dataclass
class _Planted:
    modality_index: int
    start: int
    stop: int
    means: np.ndarray  # (C, d)
    block: PlantedBlock


def _planted_blocks(spec: SynthSpec, schema: FeatureSchema, rng) -> list[_Planted]:
    C = spec.num_classes
    lookup = {(b.modality, b.region): b for b in schema.blocks}
    out = []
    for p in spec.planted:
        b = lookup[(p.modality, p.region)]
        direction = rng.standard_normal(b.dim)
        direction /= np.linalg.norm(direction)
        pattern = np.asarray(p.pattern if p.pattern is not None else np.arange(C) - (C - 1) / 2, dtype=np.float64)
        effect = spec.effect_size if p.effect is None else p.effect
        out.append(_Planted(b.modality_index, b.start, b.stop, effect * pattern[:, None] * direction[None, :], p))
    return out


def _sample_missing(spec: SynthSpec, n: int, rng) -> np.ndarray:
    rates = np.array([m.missing_rate for m in spec.modalities])
    avail = rng.random((n, len(rates))) >= rates
    # guarantee one observed modality: the first never-missing one
    anchor = int(np.flatnonzero(rates == 0)[0])
    avail[:, anchor] = True
    return avail


def bayes_accuracy_mc(spec: SynthSpec, draws: int, seed: int, mc_stream: int = 0) -> float:
    """Monte-Carlo accuracy of the Bayes classifier under the generative model.

    ``seed`` fixes the planted structure (as in ``synth_generate``);
    ``mc_stream`` selects an independent stream of Monte-Carlo draws.
    """
    spec.validate()
    schema = spec.schema()
    planted = _planted_blocks(spec, schema, np.random.default_rng([seed, 0]))
    rng = np.random.default_rng([seed, 2, mc_stream])
    props = np.asarray(spec.class_proportions)
    y = rng.choice(spec.num_classes, size=draws, p=props)
    avail = _sample_missing(spec, draws, rng)
    loglik = np.tile(np.log(props), (draws, 1))
    for p in planted:
        x = p.means[y] + spec.noise * rng.standard_normal((draws, p.means.shape[1]))
        sq = ((x[:, None, :] - p.means[None, :, :]) ** 2).sum(-1)
        loglik += np.where(avail[:, p.modality_index][:, None], -sq / (2 * spec.noise**2), 0.0)
    return float(np.mean(loglik.argmax(axis=1) == y))


def synth_generate(spec: SynthSpec, seed: int) -> tuple[Cohort, dict]:
    """Generate a cohort and its ground-truth manifest."""
    spec.validate()
    schema = spec.schema()
    rng_struct = np.random.default_rng([seed, 0])
    planted = _planted_blocks(spec, schema, rng_struct)
    rng = np.random.default_rng([seed, 1])
    n, D = spec.n_subjects, schema.n_features

    counts = _class_counts(n, spec.class_proportions)
    y = rng.permutation(np.repeat(np.arange(spec.num_classes), counts))
    Z = spec.noise * rng.standard_normal((n, D))
    for p in planted:
        Z[:, p.start : p.stop] += p.means[y]
    loc = rng_struct.uniform(-5.0, 5.0, size=D)
    scale = rng_struct.uniform(0.5, 3.0, size=D)
    X = loc + scale * Z
    avail = _sample_missing(spec, n, rng)
    col_mod = schema.column_modality()
    X[~avail[:, col_mod]] = np.nan

    width = len(str(n - 1))
    ids = [f"S{i:0{width}d}" for i in range(n)]
    cohort = Cohort(schema, ids, X, avail, y.astype(np.int64), num_classes=spec.num_classes)
    manifest = {
        "planted_blocks": [
            {"modality": p.block.modality, "region": p.block.region, "class_means": p.means.tolist()} for p in planted
        ],
        "bayes_accuracy_mc": bayes_accuracy_mc(spec, spec.mc_draws, seed),
        "majority_rate": float(counts.max() / n),
        "seed": seed,
        "spec": spec.to_dict(),
    }
    return cohort, manifest


def planted_indicator(schema: FeatureSchema, manifest: dict) -> np.ndarray:
    planted = {(p["modality"], p["region"]) for p in manifest["planted_blocks"]}
    return np.array([(b.modality, b.region) in planted for b in schema.blocks], dtype=bool)
