"""Command-line entry point: synth, train, cv, ablate, explain.

Failures print a single JSON line ``{"error": <code>, "message": ...}`` on
stderr and exit nonzero (2 for usage/config problems, 1 otherwise).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .data import Cohort, bundled_schema_path, load_cohort, load_schema, save_schema, write_cohort, zscore_apply, zscore_fit
from .errors import ConfigError, RegionMoeError
from .experiment import (
    MODEL_KINDS,
    AblationMode,
    Bundle,
    ModelSettings,
    build_model,
    config_dict,
    default_ablation_modes,
    explain,
    fit_model,
    run_ablation_cohort,
    run_cv_cohort,
    write_ablation_csv,
    write_cv_outputs,
    write_gates_csv,
    write_manifest,
)
from .moe import GATE_MODES
from .objectives import LossConfig
from .optim import TrainConfig
from .synth import SynthSpec, load_spec, synth_generate

BUNDLED_SPECS = ("default", "complementary", "null")


class UsageError(ConfigError):
    code = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class ExperimentConfig:
    schema_path: Path
    data_path: Path
    settings: ModelSettings
    train: TrainConfig
    loss: LossConfig
    k_folds: int
    out_dir: Path
    seed: int

    def validate(self):
        for what, p in (("schema", self.schema_path), ("data", self.data_path)):
            if not p.is_file():
                raise ConfigError(f"{what} file not found: {p}")
        if self.k_folds < 2:
            raise ConfigError(f"k_folds must be >= 2, got {self.k_folds}")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--schema", type=Path, default=None, help="feature schema JSON (default: bundled ADNI-like schema)")
    p.add_argument("--data", type=Path, help="cohort CSV")
    p.add_argument("--out", type=Path, default=Path("out"), help="output root directory")
    p.add_argument("--run-id", default=None, help="subdirectory of --out (default derived from command, model and seed)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model", choices=MODEL_KINDS, default="mref")
    p.add_argument("--gate-mode", choices=GATE_MODES, default="hier")
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--hidden", default="64,32", help="expert/baseline hidden widths, comma separated")
    p.add_argument("--lambda-sparsity", type=float, default=0.01)
    p.add_argument("--lambda-diversity", type=float, default=0.01)
    p.add_argument("--class-weighting", choices=("balanced", "none"), default="balanced")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--patience", type=int, default=None, help="default: min(10, --epochs)")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--val-fraction", type=float, default=0.1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="regionmoe", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"regionmoe {__version__}")
    common = _Parser(add_help=False)
    _common(common)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    p.add_argument("--spec", default="default", help=f"synth spec JSON path or one of {BUNDLED_SPECS}")
    p.add_argument("--n-subjects", type=int, default=None)
    p.add_argument("--effect-size", type=float, default=None)
    p.add_argument("--mc-draws", type=int, default=None)

    sub.add_parser("train", parents=[common], help="fit one model on the whole cohort and save a bundle")

    p = sub.add_parser("cv", parents=[common], help="stratified k-fold cross-validation")
    p.add_argument("--folds", type=int, default=10)

    p = sub.add_parser("ablate", parents=[common], help="retrain under ablation modes on a shared fold plan")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument(
        "--modes",
        default=None,
        help="comma-separated modes: full, drop:NAME, only:NAME, topk:K, modality-gate, region-gate (default: standard set)",
    )

    p = sub.add_parser("explain", parents=[common], help="per-subject gate weights and attribution table of a bundle")
    p.add_argument("--bundle", type=Path, required=True, help="model bundle JSON written by train or cv")
    return parser


# -- helpers ---------------------------------------------------------------------


def _settings(args) -> ModelSettings:
    try:
        hidden = tuple(int(h) for h in args.hidden.split(","))
    except ValueError as exc:
        raise ConfigError(f"--hidden must be comma-separated integers, got {args.hidden!r}") from exc
    if len(hidden) != 2 or min(hidden) < 1:
        raise ConfigError("--hidden needs two positive widths")
    if args.top_k is not None and args.top_k < 1:
        raise ConfigError("--top-k must be >= 1")
    return ModelSettings(args.model, args.gate_mode, args.top_k, hidden)


def _train_cfg(args) -> TrainConfig:
    try:
        patience = min(10, args.epochs) if args.patience is None else args.patience
        return TrainConfig(args.epochs, patience, args.batch_size, args.val_fraction, args.seed, args.lr, args.weight_decay)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _loss_cfg(args) -> LossConfig:
    try:
        return LossConfig(args.lambda_sparsity, args.lambda_diversity, args.class_weighting)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _schema_path(args) -> Path:
    return args.schema if args.schema is not None else bundled_schema_path()


def _experiment(args, folds: int = 10) -> ExperimentConfig:
    if args.data is None:
        raise ConfigError(f"{args.command} needs --data")
    cfg = ExperimentConfig(
        _schema_path(args), args.data, _settings(args), _train_cfg(args), _loss_cfg(args), folds, args.out, args.seed
    )
    cfg.validate()
    return cfg


def _load(cfg: ExperimentConfig) -> Cohort:
    return load_cohort(cfg.data_path, load_schema(cfg.schema_path))


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _run_dir(args) -> Path:
    run_id = args.run_id or f"{args.command}-{args.model}-seed{args.seed}"
    if Path(run_id).name != run_id or run_id in ("", ".", ".."):
        raise ConfigError(f"--run-id must be a plain directory name, got {run_id!r}")
    path = args.out / run_id
    path.mkdir(parents=True, exist_ok=True)
    return path


def _manifest(args, cfg: ExperimentConfig, run_dir: Path, cohort: Cohort, **extra) -> dict:
    return {
        "command": args.command,
        "run_id": run_dir.name,
        "seed": cfg.seed,
        "config": config_dict(cfg.settings, cfg.train, cfg.loss, k_folds=cfg.k_folds),
        "data": {"path": cfg.data_path.name, "sha256": _sha256(cfg.data_path), "n_subjects": len(cohort)},
        "schema": {"path": cfg.schema_path.name, "sha256": _sha256(cfg.schema_path)},
        **extra,
    }


def _resolve_spec(name: str) -> SynthSpec:
    if name in BUNDLED_SPECS:
        return load_spec(Path(__file__).parent / "resources" / f"{name}.synth.json")
    path = Path(name)
    if not path.is_file():
        raise ConfigError(f"synth spec not found: {name} (bundled: {', '.join(BUNDLED_SPECS)})")
    try:
        return load_spec(path)
    except (TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad synth spec {path}: {exc}") from exc


# -- subcommands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = _resolve_spec(args.spec)
    for attr in ("n_subjects", "effect_size", "mc_draws"):
        if getattr(args, attr) is not None:
            setattr(spec, attr, getattr(args, attr))
    cohort, manifest = synth_generate(spec, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    write_cohort(cohort, args.out / "cohort.csv")
    save_schema(cohort.schema, args.out / "schema.json")
    (args.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    counts = np.bincount(cohort.y, minlength=cohort.num_classes).tolist()
    print(
        f"wrote {args.out / 'cohort.csv'}: n={len(cohort)} features={cohort.schema.n_features} "
        f"experts={cohort.schema.n_experts} classes={counts} "
        f"planted={len(manifest['planted_blocks'])} bayes_accuracy_mc={manifest['bayes_accuracy_mc']:.4f}"
    )
    return 0


def cmd_train(args) -> int:
    cfg = _experiment(args)
    cohort = _load(cfg)
    run_dir = _run_dir(args)
    stats = zscore_fit(cohort)
    norm = zscore_apply(cohort, stats)
    model = build_model(cfg.settings, cohort.schema, cohort.num_classes, cfg.seed)
    traces = fit_model(model, norm.X, norm.avail, norm.y, cfg.train, cfg.loss, cohort.num_classes)
    Bundle(model, cohort.schema, stats).save(run_dir / "model.json")
    if len(traces) == 1:
        traces[0].write_csv(run_dir / "trace.csv")
    else:
        for name, tr in zip(cohort.schema.modality_names, traces):
            tr.write_csv(run_dir / f"trace_{name}.csv")
    write_manifest(run_dir, _manifest(args, cfg, run_dir, cohort))
    print(f"wrote {run_dir / 'model.json'}")
    return 0


def cmd_cv(args) -> int:
    cfg = _experiment(args, args.folds)
    cohort = _load(cfg)
    run_dir = _run_dir(args)
    result = run_cv_cohort(cohort, cfg.settings, cfg.train, cfg.loss, cfg.k_folds, cfg.seed)
    write_cv_outputs(result, run_dir, _manifest(args, cfg, run_dir, cohort))
    s = result.summary
    print(
        f"{cfg.settings.kind}: auroc {s.mean['auroc_macro']:.4f} ± {s.sd['auroc_macro']:.4f}  "
        f"accuracy {s.mean['accuracy']:.4f} ± {s.sd['accuracy']:.4f}  "
        f"f1 {s.mean['f1_macro']:.4f} ± {s.sd['f1_macro']:.4f}  -> {run_dir}"
    )
    return 0


def cmd_ablate(args) -> int:
    cfg = _experiment(args, args.folds)
    if cfg.settings.kind != "mref":
        raise ConfigError("ablate applies to --model mref")
    cohort = _load(cfg)
    if args.modes:
        modes = [AblationMode.parse(t) for t in args.modes.split(",")]
    else:
        modes = default_ablation_modes(cohort.schema)
    run_dir = _run_dir(args)
    results = run_ablation_cohort(cohort, cfg.settings, cfg.train, cfg.loss, modes, cfg.k_folds, cfg.seed)
    write_ablation_csv(results, run_dir / "ablation.csv")
    write_manifest(run_dir, _manifest(args, cfg, run_dir, cohort, modes=[m.label for m in modes]))
    for mode, res in results:
        print(f"{mode.label:24s} auroc {res.summary.mean['auroc_macro']:.4f} ± {res.summary.sd['auroc_macro']:.4f}")
    return 0


def cmd_explain(args) -> int:
    if args.data is None:
        raise ConfigError("explain needs --data")
    for what, p in (("bundle", args.bundle), ("data", args.data), ("schema", _schema_path(args))):
        if not p.is_file():
            raise ConfigError(f"{what} file not found: {p}")
    bundle = Bundle.load(args.bundle)
    cohort = load_cohort(args.data, load_schema(_schema_path(args)))
    table, gates = explain(bundle, cohort)
    run_dir = _run_dir(args)
    table.write_csv(run_dir / "attribution.csv")
    write_gates_csv(run_dir / "gates_per_subject.csv", bundle.schema, cohort.ids, gates)
    write_manifest(
        run_dir,
        {
            "command": "explain",
            "run_id": run_dir.name,
            "bundle": {"path": args.bundle.name, "sha256": _sha256(args.bundle)},
            "data": {"path": args.data.name, "sha256": _sha256(args.data), "n_subjects": len(cohort)},
        },
    )
    top = table.ranking()[:5]
    print("top experts: " + ", ".join(f"{'/'.join(table.labels[m])}={table.expert_means[m]:.3f}" for m in top))
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "cv": cmd_cv, "ablate": cmd_ablate, "explain": cmd_explain}


def _fail(code: str, message: str, status: int) -> int:
    print(json.dumps({"error": code, "message": " ".join(str(message).split())}), file=sys.stderr)
    return status


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        return _fail(exc.code, str(exc), 2)
    except RegionMoeError as exc:
        return _fail(exc.code, str(exc), 1)
    except OSError as exc:
        return _fail("io", f"{exc.strerror or exc}: {exc.filename or ''}", 1)
    except ValueError as exc:
        return _fail("invalid_value", str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
