"""Command-line front end. Subcommands run either a single analysis stage
against a feature table or the whole pipeline; ``synth`` writes seeded
synthetic cohorts for experimentation. A JSON config file supplies
defaults; flags override file values.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

from .errors import PetrelError
from .pipeline import (
    PipelineConfig,
    PipelineResult,
    StageRecord,
    _stage_correlate,
    _stage_ggm,
    _stage_ingest,
    _stage_pca,
    _stage_survive,
    _stage_xplain,
    _write_manifest,
    run_pipeline,
)
from .synth import PlantedDependency, SynthSpec, synth_cohort
from .survival import write_survival
from .table import write_table
from .volume import write_mask, write_volume

_CONFIG_FIELDS = {f.name for f in fields(PipelineConfig)}


def _add_config_flags(sub: argparse.ArgumentParser, *, need_table: bool) -> None:
    sub.add_argument("--config", help="JSON file with PipelineConfig fields")
    sub.add_argument("--out-dir", help="output directory")
    sub.add_argument("--seed", type=int, help="master seed (required)")
    if need_table:
        sub.add_argument("--table-csv", help="feature table CSV")
        sub.add_argument("--table-meta", help="feature table metadata JSON")
        sub.add_argument("--volume-list", help="JSON array of {patient_id, volume, mask, external}")
    sub.add_argument("--survival-csv", help="survival CSV (patient_id,time,event)")
    sub.add_argument("--n-levels", type=int, help="quantization levels")
    sub.add_argument("--glcm-distance", type=int, help="co-occurrence distance")
    sub.add_argument("--variance-fraction", type=float, help="PCA variance fraction")
    sub.add_argument("--kmeans-k", type=int, help="loading-space cluster count")
    sub.add_argument("--pc-count", type=int, help="principal components in the risk model")
    sub.add_argument("--n-test", type=int, help="held-out test rows")
    sub.add_argument("--folds", type=int, help="CV folds")
    sub.add_argument("--repetitions", type=int, help="CV repetitions")


def _build_config(args: argparse.Namespace) -> PipelineConfig:
    values: dict = {}
    if getattr(args, "config", None):
        loaded = json.loads(Path(args.config).read_text())
        unknown = set(loaded) - _CONFIG_FIELDS
        if unknown:
            raise PetrelError(f"unknown config keys: {sorted(unknown)}")
        values.update(loaded)
    for name in _CONFIG_FIELDS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    if "penalty_grid" in values and values["penalty_grid"] is not None:
        values["penalty_grid"] = tuple(values["penalty_grid"])
    if "external_columns" in values:
        values["external_columns"] = tuple(values["external_columns"])
    if "out_dir" not in values:
        raise PetrelError("--out-dir (or config out_dir) is required")
    if "seed" not in values:
        raise PetrelError("--seed (or config seed) is required; there is no default")
    return PipelineConfig(**values)


def _run_single_stage(cfg: PipelineConfig, stage_name: str) -> int:
    """Ingest, then run one analysis stage, writing its artifacts plus a
    two-stage manifest."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ingest_rec = StageRecord("ingest")
    table = _stage_ingest(cfg, out, ingest_rec)
    ingest_rec.status = "ok"
    keep = [n for n in table.names if n not in set(table.constant_columns())]
    analysis = table.select(keep) if len(keep) < len(table.names) else table
    rec = StageRecord(stage_name)
    bodies = {
        "correlate": lambda: _stage_correlate(analysis, out, rec),
        "ggm": lambda: _stage_ggm(cfg, analysis, out, rec),
        "pca": lambda: _stage_pca(cfg, analysis, out, rec),
        "cluster": lambda: _stage_pca(cfg, analysis, out, rec),
        "xplain": lambda: _stage_xplain(cfg, analysis, out, rec),
        "survive": lambda: _stage_survive(cfg, analysis, out, rec),
    }
    bodies[stage_name]()
    if rec.status == "pending":
        rec.status = "ok"
    _write_manifest(out, cfg, [ingest_rec, rec])
    for path in rec.outputs:
        print(out / path)
    return 0


def _cmd_extract(args) -> int:
    cfg = _build_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rec = StageRecord("ingest")
    _stage_ingest(cfg, out, rec)
    rec.status = "ok"
    _write_manifest(out, cfg, [rec])
    print(out / "features.csv")
    return 0


def _cmd_run(args) -> int:
    cfg = _build_config(args)
    result: PipelineResult = run_pipeline(cfg)
    for rec in result.stages:
        print(f"{rec.name}: {rec.status}")
    print(result.manifest_path)
    return 0


def _cmd_synth(args) -> int:
    deps = tuple(
        PlantedDependency(
            name=d["name"],
            parents=tuple(d["parents"]),
            weights=tuple(d["weights"]),
            noise_sd=d.get("noise_sd", 0.0),
        )
        for d in json.loads(args.dependencies)
    )
    hazard = tuple((h["name"], h["beta"]) for h in json.loads(args.hazard))
    spec = SynthSpec(
        n_patients=args.n_patients,
        seed=args.seed,
        mode=args.mode,
        n_texture_features=args.n_texture_features,
        dependencies=deps,
        hazard=hazard,
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if spec.mode == "table":
        table, surv = synth_cohort(spec)
        write_table(table, out / "features.csv", out / "features_meta.json")
        write_survival(surv, out / "survival.csv")
        print(out / "features.csv")
        print(out / "survival.csv")
    else:
        cohort = synth_cohort(spec)
        listing = []
        for pid, grid, mask, ext in zip(
            cohort.patient_ids, cohort.grids, cohort.masks, cohort.externals
        ):
            vol_path = out / f"{pid}_vol.json"
            mask_path = out / f"{pid}_mask.json"
            write_volume(grid, vol_path)
            write_mask(mask, mask_path, grid.spacing_mm)
            listing.append(
                {
                    "patient_id": pid,
                    "volume": str(vol_path),
                    "mask": str(mask_path),
                    "external": ext,
                }
            )
        (out / "volumes.json").write_text(json.dumps(listing, indent=2) + "\n")
        write_survival(cohort.survival, out / "survival.csv")
        print(out / "volumes.json")
        print(out / "survival.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="petrel",
        description="radiomic feature tables and their statistical structure",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    for name, helptext in [
        ("extract", "read volumes or a CSV and write the validated feature table"),
        ("correlate", "write the feature correlation matrix"),
        ("ggm", "fit the sparse partial-correlation graph"),
        ("pca", "eigendecomposition, scores, and loading-space clusters"),
        ("cluster", "alias of pca (clusters come from the same stage)"),
        ("xplain", "per-feature lasso explanation reports"),
        ("survive", "risk models, optimized split, KM curves"),
        ("run", "run every stage in order"),
    ]:
        sub = subs.add_parser(name, help=helptext)
        _add_config_flags(sub, need_table=True)

    synth = subs.add_parser("synth", help="write a seeded synthetic cohort")
    synth.add_argument("--out-dir", required=True)
    synth.add_argument("--seed", type=int, required=True)
    synth.add_argument("--mode", choices=["table", "image"], default="table")
    synth.add_argument("--n-patients", type=int, default=130)
    synth.add_argument("--n-texture-features", type=int, default=38)
    synth.add_argument(
        "--dependencies",
        default="[]",
        help='JSON: [{"name","parents","weights","noise_sd"}]',
    )
    synth.add_argument("--hazard", default="[]", help='JSON: [{"name","beta"}]')
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "extract":
            return _cmd_extract(args)
        return _run_single_stage(_build_config(args), args.command)
    except PetrelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
