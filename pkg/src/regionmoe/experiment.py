"""Cross-validation, ablations, gate attribution and model bundles."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (
    ConcatMlpModel,
    LateFusionModel,
    LogRegModel,
    concat_from_dict,
    concat_to_dict,
    late_from_dict,
    late_to_dict,
    logreg_from_dict,
    logreg_to_dict,
)
from .data import Cohort, FeatureSchema, FoldPlan, NormStats, stratified_kfold, zscore_apply, zscore_fit
from .errors import ConfigError, SchemaError
from .metrics import EvalResult, FoldSummary, evaluate, summarize_folds, write_summary_csv, write_summary_json
from .moe import GATE_MODES, MoeModel, build_moe, moe_from_dict, moe_to_dict
from .objectives import LossConfig
from .optim import TrainConfig, TrainTrace, train

MODEL_KINDS = ("mref", "concat", "late", "logreg")
BUNDLE_VERSION = 1


@dataclass
class ModelSettings:
    kind: str = "mref"
    gate_mode: str = "hier"
    top_k: int | None = None
    hidden: tuple[int, int] = (64, 32)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.gate_mode not in GATE_MODES:
            raise ConfigError(f"gate mode must be one of {GATE_MODES}, got {self.gate_mode!r}")
        self.hidden = tuple(int(h) for h in self.hidden)


def build_model(settings: ModelSettings, schema: FeatureSchema, num_classes: int, seed: int):
    if settings.kind == "mref":
        return build_moe(schema, num_classes, settings.gate_mode, settings.top_k, settings.hidden, seed)
    if settings.kind == "concat":
        return ConcatMlpModel.build(schema, num_classes, settings.hidden, seed)
    if settings.kind == "late":
        return LateFusionModel.build(schema, num_classes, settings.hidden, seed)
    return LogRegModel.build(schema, num_classes)


def fit_model(model, X, avail, y, train_cfg: TrainConfig, loss_cfg: LossConfig, num_classes: int) -> list[TrainTrace]:
    if isinstance(model, LateFusionModel):
        return model.fit(X, avail, y, train_cfg, loss_cfg)
    return [train(model, X, avail, y, train_cfg, loss_cfg, num_classes)[1]]


def model_to_dict(model) -> dict:
    if isinstance(model, MoeModel):
        return {"kind": "mref", **moe_to_dict(model)}
    if isinstance(model, ConcatMlpModel):
        return {"kind": "concat", **concat_to_dict(model)}
    if isinstance(model, LateFusionModel):
        return {"kind": "late", **late_to_dict(model)}
    return {"kind": "logreg", **logreg_to_dict(model)}


def model_from_dict(doc: dict, schema: FeatureSchema):
    loaders = {"mref": moe_from_dict, "concat": concat_from_dict, "late": late_from_dict, "logreg": logreg_from_dict}
    try:
        return loaders[doc["kind"]](doc, schema)
    except KeyError as exc:
        raise ConfigError(f"bad model document: {exc}") from exc


@dataclass
class Bundle:
    """A trained model with the schema and training-fold normalization it expects."""

    model: object
    schema: FeatureSchema
    norm: NormStats

    def to_dict(self) -> dict:
        return {
            "schema_version": BUNDLE_VERSION,
            "schema": self.schema.to_dict(),
            "norm": self.norm.to_dict(),
            "model": model_to_dict(self.model),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Bundle":
        if doc.get("schema_version") != BUNDLE_VERSION:
            raise ConfigError(f"unsupported bundle schema_version {doc.get('schema_version')!r}")
        schema = FeatureSchema.from_dict(doc["schema"])
        return cls(model_from_dict(doc["model"], schema), schema, NormStats.from_dict(doc["norm"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Bundle":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -- attribution -----------------------------------------------------------------


@dataclass
class AttributionTable:
    labels: list[tuple[str, str]]  # (modality, region) per expert
    expert_means: np.ndarray  # (N,)
    modality_names: list[str]
    modality_means: np.ndarray  # (M,)
    n_subjects: int

    def ranking(self) -> list[int]:
        """Expert indices by decreasing mean weight (ties to lower index)."""
        return sorted(range(len(self.expert_means)), key=lambda m: (-self.expert_means[m], m))

    def write_csv(self, path):
        order = self.ranking()
        rank = {m: r + 1 for r, m in enumerate(order)}
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["level", "modality", "region", "mean_weight", "rank"])
            for m, (mod, reg) in enumerate(self.labels):
                w.writerow(["expert", mod, reg, repr(float(self.expert_means[m])), rank[m]])
            for k, mod in enumerate(self.modality_names):
                w.writerow(["modality", mod, "", repr(float(self.modality_means[k])), ""])


def attribution_table(schema: FeatureSchema, gates: np.ndarray) -> AttributionTable:
    gates = np.atleast_2d(gates)
    means = gates.mean(axis=0)
    mods = np.array([b.modality_index for b in schema.blocks])
    mod_means = np.array([means[mods == k].sum() for k in range(len(schema.modalities))])
    return AttributionTable(
        [(b.modality, b.region) for b in schema.blocks], means, schema.modality_names, mod_means, gates.shape[0]
    )


def write_gates_csv(path, schema: FeatureSchema, ids, gates, folds=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["id"] + (["fold"] if folds is not None else []) + [b.label for b in schema.blocks]
        w.writerow(head)
        for i, sid in enumerate(ids):
            row = [sid] + ([int(folds[i])] if folds is not None else [])
            w.writerow(row + [repr(float(v)) for v in gates[i]])


# -- cross-validation ------------------------------------------------------------


def prepare_fold(cohort: Cohort, fold_of: np.ndarray, fold: int) -> tuple[Cohort, Cohort, NormStats]:
    """Fit z-scores on the training part only and apply them to both parts."""
    train_raw = cohort.subset(fold_of != fold)
    test_raw = cohort.subset(fold_of == fold)
    stats = zscore_fit(train_raw)
    return zscore_apply(train_raw, stats), zscore_apply(test_raw, stats), stats


def fold_seed(seed: int, fold: int) -> int:
    return seed ^ fold


@dataclass
class CvResult:
    summary: FoldSummary
    bundles: list[Bundle]
    traces: list[list[TrainTrace]]
    ids: list[str]  # held-out order, fold by fold
    folds: np.ndarray
    labels: np.ndarray
    probs: np.ndarray
    gates: np.ndarray | None  # (n, N) final held-out gate weights, mref only
    attribution: AttributionTable | None
    schema: FeatureSchema
    plan: FoldPlan = field(repr=False, default=None)


def run_cv_cohort(
    cohort: Cohort,
    settings: ModelSettings,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    k: int = 10,
    seed: int = 0,
    plan: FoldPlan | None = None,
) -> CvResult:
    """k-fold CV. ``plan`` (keyed by subject id) lets ablations share folds with
    the full cohort even after subjects were dropped."""
    C = cohort.num_classes
    if plan is None:
        plan = stratified_kfold(cohort.y, k, seed, cohort.ids, C)
    fold_of = plan.fold_of_ids(cohort.ids)
    results: list[EvalResult] = []
    bundles, traces = [], []
    ids, folds, labels, probs, gates = [], [], [], [], []
    for fold in range(plan.k):
        tr, te, stats = prepare_fold(cohort, fold_of, fold)
        s = fold_seed(seed, fold)
        model = build_model(settings, cohort.schema, C, s)
        traces.append(fit_model(model, tr.X, tr.avail, tr.y, replace(train_cfg, seed=s), loss_cfg, C))
        if isinstance(model, MoeModel):
            pred = model.predict(te.X, te.avail)
            p = pred.class_probs
            gates.append(pred.gate.weights)
        else:
            p = model.predict_proba(te.X, te.avail)
        results.append(evaluate(p, te.y, C))
        bundles.append(Bundle(model, cohort.schema, stats))
        ids.extend(te.ids)
        folds.append(np.full(len(te), fold))
        labels.append(te.y)
        probs.append(p)
    G = np.concatenate(gates) if gates else None
    return CvResult(
        summarize_folds(results),
        bundles,
        traces,
        ids,
        np.concatenate(folds),
        np.concatenate(labels),
        np.concatenate(probs),
        G,
        attribution_table(cohort.schema, G) if G is not None else None,
        cohort.schema,
        plan,
    )


def write_cv_outputs(result: CvResult, out_dir, manifest: dict | None = None):
    out = Path(out_dir)
    (out / "models").mkdir(parents=True, exist_ok=True)
    (out / "traces").mkdir(exist_ok=True)
    write_summary_csv(result.summary, out / "metrics.csv")
    write_summary_json(result.summary, out / "metrics.json")
    for i, bundle in enumerate(result.bundles):
        bundle.save(out / "models" / f"fold_{i}.json")
    for i, fold_traces in enumerate(result.traces):
        if len(fold_traces) == 1:
            fold_traces[0].write_csv(out / "traces" / f"fold_{i}.csv")
        else:
            for name, tr in zip(result.schema.modality_names, fold_traces):
                tr.write_csv(out / "traces" / f"fold_{i}_{name}.csv")
    if result.attribution is not None:
        result.attribution.write_csv(out / "attribution.csv")
        write_gates_csv(out / "gates_per_subject.csv", result.schema, result.ids, result.gates, result.folds)
    if manifest is not None:
        write_manifest(out, manifest)


def write_manifest(out_dir, manifest: dict):
    doc = {"version": __version__, **manifest}
    Path(out_dir, "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- ablations -------------------------------------------------------------------


@dataclass(frozen=True)
class AblationMode:
    kind: str  # full | drop | only | topk | modality-gate | region-gate
    arg: str | int | None = None

    @classmethod
    def parse(cls, text: str) -> "AblationMode":
        t = text.strip()
        if t in ("full", "modality-gate", "region-gate"):
            return cls(t)
        head, _, arg = t.partition(":")
        if head in ("drop", "only") and arg:
            return cls(head, arg)
        if head == "topk" and arg.isdigit():
            return cls(head, int(arg))
        raise ConfigError(f"unknown ablation mode {text!r} (full, drop:NAME, only:NAME, topk:K, modality-gate, region-gate)")

    @property
    def label(self) -> str:
        return {
            "full": "Full",
            "drop": f"w/o {self.arg}",
            "only": f"{self.arg} only",
            "topk": f"Top-{self.arg} experts",
            "modality-gate": "Modality-only gate",
            "region-gate": "Region-only gate",
        }[self.kind]

    def apply(self, schema: FeatureSchema, settings: ModelSettings) -> tuple[FeatureSchema, ModelSettings]:
        if self.kind == "drop":
            return schema.drop_modality(str(self.arg)), settings
        if self.kind == "only":
            return schema.only_modality(str(self.arg)), settings
        if self.kind == "topk":
            if not 1 <= int(self.arg) <= schema.n_experts:
                raise ConfigError(f"top-k {self.arg} outside [1, {schema.n_experts}]")
            return schema, replace(settings, top_k=int(self.arg))
        if self.kind == "modality-gate":
            return schema, replace(settings, gate_mode="modality")
        if self.kind == "region-gate":
            return schema, replace(settings, gate_mode="region")
        return schema, settings


def default_ablation_modes(schema: FeatureSchema) -> list[AblationMode]:
    modes = [AblationMode("full")]
    modes += [AblationMode("drop", m.name) for m in schema.modalities]
    modes += [AblationMode("only", m.name) for m in schema.modalities if len(m.regions) > 1]
    modes += [AblationMode("topk", k) for k in (5, 3, 1) if k <= schema.n_experts]
    modes += [AblationMode("modality-gate"), AblationMode("region-gate")]
    return modes


def run_ablation_cohort(
    cohort: Cohort,
    settings: ModelSettings,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    modes: list[AblationMode],
    k: int = 10,
    seed: int = 0,
) -> list[tuple[AblationMode, CvResult]]:
    """Retrain from scratch under each mode with one shared fold plan."""
    if settings.kind != "mref":
        raise ConfigError("ablations apply to the mref model")
    prepared = [(mode, *mode.apply(cohort.schema, settings)) for mode in modes]  # validate all up front
    plan = stratified_kfold(cohort.y, k, seed, cohort.ids, cohort.num_classes)
    out = []
    for mode, schema, mode_settings in prepared:
        sub = cohort if schema is cohort.schema else cohort.restrict(schema)
        out.append((mode, run_cv_cohort(sub, mode_settings, train_cfg, loss_cfg, k, seed, plan)))
    return out


def write_ablation_csv(results: list[tuple[AblationMode, CvResult]], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["configuration", "auroc_mean", "auroc_sd", "accuracy_mean", "accuracy_sd", "f1_mean", "f1_sd"])
        for mode, res in results:
            s = res.summary
            w.writerow(
                [mode.label]
                + [repr(v) for m in ("auroc_macro", "accuracy", "f1_macro") for v in (s.mean[m], s.sd[m])]
            )


# -- explain ---------------------------------------------------------------------


def explain(bundle: Bundle, cohort: Cohort) -> tuple[AttributionTable, np.ndarray]:
    """Final (masked, top-k) gate weights per subject and their mean per expert."""
    if not isinstance(bundle.model, MoeModel):
        raise ConfigError("explain needs an mref model bundle")
    if cohort.schema.to_dict()["modalities"] != bundle.schema.to_dict()["modalities"]:
        raise SchemaError("cohort schema does not match the bundle schema")
    norm = zscore_apply(cohort, bundle.norm)
    gates = bundle.model.predict(norm.X, norm.avail).gate.weights
    return attribution_table(bundle.schema, gates), gates


def config_dict(settings: ModelSettings, train_cfg: TrainConfig, loss_cfg: LossConfig, **extra) -> dict:
    loss = asdict(loss_cfg)
    if loss_cfg.class_weights is not None:
        loss["class_weights"] = np.asarray(loss_cfg.class_weights).tolist()
    return {"model": asdict(settings), "train": asdict(train_cfg), "loss": loss, **extra}
