"""End-to-end orchestration: ingest or extract a feature table, run the
correlation/GGM, PCA/clustering, per-feature explanation, and survival
stages in order, and write every artifact plus a manifest under one output
directory. A stage failure stops the run but keeps earlier outputs,
recorded with a failure marker in the manifest.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import PetrelError, ValidationError
from .features import EXTERNAL_COLUMNS, FeatureConfig, extract_all
from .survival import align, baseline_model, pc_risk_model, read_survival
from .stats import (
    components_for_variance,
    ggm_fit,
    kmeans_loadings,
    pca,
    pearson_matrix,
    scores,
    to_dot,
)
from .table import FLOAT_FMT, FeatureTable, from_vectors, read_table, write_table
from .volume import load_mask, load_volume
from .xplain import SplitConfig, xplain_all

STAGE_ORDER = ("ingest", "correlate", "ggm", "pca", "xplain", "survive")


class StageError(PetrelError):
    """A pipeline stage failed; the message is prefixed with the stage name."""


@dataclass(frozen=True)
class PipelineConfig:
    out_dir: str
    seed: int
    table_csv: str | None = None
    table_meta: str | None = None
    volume_list: str | None = None
    survival_csv: str | None = None
    n_levels: int = 32
    glcm_distance: int = 1
    external_columns: tuple[str, ...] = EXTERNAL_COLUMNS
    variance_fraction: float = 0.95
    kmeans_k: int = 12
    pc_count: int = 12
    penalty_grid: tuple[float, ...] | None = None
    n_test: int = 30
    folds: int = 5
    repetitions: int = 2

    def __post_init__(self):
        if (self.table_csv is None) == (self.volume_list is None):
            raise ValidationError("provide exactly one of table_csv or volume_list")
        for label in ("table_csv", "table_meta", "volume_list", "survival_csv"):
            value = getattr(self, label)
            if value is not None and not Path(value).exists():
                raise ValidationError(f"{label} path does not exist: {value}")

    def split(self) -> SplitConfig:
        return SplitConfig(
            n_test=self.n_test,
            folds=self.folds,
            repetitions=self.repetitions,
            seed=self.seed,
        )


def config_hash(config: PipelineConfig) -> str:
    payload = json.dumps(asdict(config), sort_keys=True, default=list)
    return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class StageRecord:
    name: str
    status: str = "pending"  # ok | skipped | failed
    outputs: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)


@dataclass
class PipelineResult:
    out_dir: Path
    manifest_path: Path
    stages: list[StageRecord]

    def stage(self, name: str) -> StageRecord:
        for rec in self.stages:
            if rec.name == name:
                return rec
        raise KeyError(name)


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(
            [FLOAT_FMT % v if isinstance(v, float) else v for v in row]
        )
    path.write_text(buf.getvalue())


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Stage bodies. Each returns a list of written paths.

def ingest_table(csv_path, metadata_path=None) -> FeatureTable:
    """Read and validate a feature-table CSV (plus optional column
    metadata); constant columns are reported by the caller, not dropped."""
    return read_table(csv_path, metadata_path)


def _extract_from_volume_list(cfg: PipelineConfig) -> FeatureTable:
    listing = json.loads(Path(cfg.volume_list).read_text())
    if not isinstance(listing, list) or not listing:
        raise ValidationError("volume list must be a nonempty JSON array")
    fconf = FeatureConfig(
        n_levels=cfg.n_levels,
        glcm_distance=cfg.glcm_distance,
        external_columns=cfg.external_columns,
    )
    vectors = []
    for entry in listing:
        for key in ("patient_id", "volume", "mask"):
            if key not in entry:
                raise ValidationError(f"volume list entry missing {key!r}")
        grid = load_volume(entry["volume"])
        mask = load_mask(entry["mask"])
        vectors.append(
            extract_all(
                grid,
                mask,
                fconf,
                external=entry.get("external", {}),
                patient_id=entry["patient_id"],
            )
        )
    return from_vectors(vectors)


def _stage_ingest(cfg: PipelineConfig, out: Path, rec: StageRecord) -> FeatureTable:
    if cfg.table_csv is not None:
        table = ingest_table(cfg.table_csv, cfg.table_meta)
    else:
        table = _extract_from_volume_list(cfg)
    write_table(table, out / "features.csv", out / "features_meta.json")
    rec.outputs += ["features.csv", "features_meta.json"]
    constant = table.constant_columns()
    for name in constant:
        rec.notes.append(f"constant column {name!r} excluded from analysis stages")
    return table


def _analysis_view(table: FeatureTable) -> FeatureTable:
    keep = [n for n in table.names if n not in set(table.constant_columns())]
    return table.select(keep) if len(keep) < len(table.names) else table


def _stage_correlate(table: FeatureTable, out: Path, rec: StageRecord) -> None:
    corr = pearson_matrix(table)
    rows = [
        [name] + list(corr.r[i]) for i, name in enumerate(corr.names)
    ]
    _write_csv(out / "correlation.csv", ["feature"] + list(corr.names), rows)
    rec.outputs.append("correlation.csv")


def _stage_ggm(cfg: PipelineConfig, table: FeatureTable, out: Path, rec: StageRecord) -> None:
    grid = None if cfg.penalty_grid is None else np.asarray(cfg.penalty_grid)
    graph = ggm_fit(table, penalty_grid=grid)
    _write_csv(
        out / "ggm_edges.csv",
        ["feature_a", "feature_b", "partial_corr"],
        [[a, b, float(w)] for a, b, w in graph.edges],
    )
    (out / "ggm.dot").write_text(to_dot(graph))
    _write_json(
        out / "ggm_summary.json",
        {
            "penalty": graph.penalty,
            "bic": graph.bic,
            "n_edges": len(graph.edges),
            "n_nodes": len(graph.nodes),
        },
    )
    rec.outputs += ["ggm_edges.csv", "ggm.dot", "ggm_summary.json"]


def _stage_pca(cfg: PipelineConfig, table: FeatureTable, out: Path, rec: StageRecord) -> None:
    p = pca(table)
    n_comp = len(p.eigenvalues)
    _write_csv(
        out / "pca_eigenvalues.csv",
        ["component", "eigenvalue", "cumulative_fraction"],
        [
            [k + 1, float(p.eigenvalues[k]), float(p.cumulative[k])]
            for k in range(n_comp)
        ],
    )
    _write_csv(
        out / "pca_loadings.csv",
        ["feature"] + [f"pc{k + 1}" for k in range(n_comp)],
        [[name] + list(p.loadings[i]) for i, name in enumerate(p.names)],
    )
    k_scores = min(cfg.pc_count, n_comp)
    s = scores(p, table, k_scores)
    _write_csv(
        out / "pca_scores.csv",
        ["patient_id"] + [f"pc{k + 1}" for k in range(k_scores)],
        [[pid] + list(s[i]) for i, pid in enumerate(table.patient_ids)],
    )
    assign = kmeans_loadings(
        p,
        k=min(cfg.kmeans_k, len(p.names) - 1),
        seed=cfg.seed,
        variance_fraction=cfg.variance_fraction,
    )
    _write_csv(
        out / "clusters.csv",
        ["feature", "cluster"],
        [[name, int(assign.assignment[name])] for name in p.names],
    )
    rec.notes.append(
        f"{components_for_variance(p, cfg.variance_fraction)} components reach "
        f"{cfg.variance_fraction:g} of variance"
    )
    rec.outputs += [
        "pca_eigenvalues.csv",
        "pca_loadings.csv",
        "pca_scores.csv",
        "clusters.csv",
    ]


def _stage_xplain(cfg: PipelineConfig, table: FeatureTable, out: Path, rec: StageRecord) -> None:
    batch = xplain_all(table, cfg.split())
    xdir = out / "xplain"
    xdir.mkdir(exist_ok=True)
    summary_rows = []
    pred_rows = []
    for rep in batch.reports:
        doc = {
            "dependent": rep.dependent,
            "selected": [{"name": n, "coef": c} for n, c in rep.selected],
            "cv_mse": rep.cv_mse,
            "test_mse": rep.test_mse,
            "selection_frequency": rep.selection_frequency,
        }
        _write_json(xdir / f"{rep.dependent}.json", doc)
        rec.outputs.append(f"xplain/{rep.dependent}.json")
        summary_rows.append(
            [
                rep.dependent,
                len(rep.selected),
                ";".join(n for n, _ in rep.selected),
                float(rep.cv_mse),
                float(rep.test_mse),
            ]
        )
        test_idx = np.array(rep.test_indices)
        x_test = np.column_stack(
            [table.column(n)[test_idx] for n in rep.model.predictor_names]
        )
        predicted = rep.model.predict(x_test)
        observed = table.column(rep.dependent)[test_idx]
        for idx, obs, pred in zip(test_idx, observed, predicted):
            pred_rows.append(
                [rep.dependent, table.patient_ids[idx], float(obs), float(pred)]
            )
    _write_csv(
        out / "xplain_summary.csv",
        ["dependent", "n_selected", "selected", "cv_mse", "test_mse"],
        summary_rows,
    )
    _write_csv(
        out / "predicted_observed.csv",
        ["dependent", "patient_id", "observed", "predicted"],
        pred_rows,
    )
    rec.outputs += ["xplain_summary.csv", "predicted_observed.csv"]
    for name, message in sorted(batch.failures.items()):
        rec.notes.append(f"{name}: {message}")


def _km_rows(curve, group):
    return [
        [float(t), float(s), int(r), group]
        for t, s, r in zip(curve.times, curve.survival, curve.at_risk)
    ]


def _model_rows(cox):
    return [
        [name, float(c), float(se), float(p)]
        for name, c, se, p in zip(cox.names, cox.coefs, cox.se, cox.p_values)
    ]


def _stage_survive(cfg: PipelineConfig, table: FeatureTable, out: Path, rec: StageRecord) -> None:
    if cfg.survival_csv is None:
        rec.status = "skipped"
        rec.notes.append("no survival CSV configured; survival stage skipped")
        return
    surv = align(table, read_survival(cfg.survival_csv))
    pc = pc_risk_model(table, surv, k=cfg.pc_count)
    base = baseline_model(table, surv)
    _write_csv(out / "pc_model.csv", ["covariate", "coef", "se", "p"], _model_rows(pc.cox))
    _write_csv(
        out / "baseline_model.csv", ["covariate", "coef", "se", "p"], _model_rows(base.cox)
    )
    km_rows = (
        _km_rows(pc.km_high, "pc_high")
        + _km_rows(pc.km_low, "pc_low")
        + _km_rows(base.km_high, "baseline_high")
        + _km_rows(base.km_low, "baseline_low")
    )
    _write_csv(out / "km_curves.csv", ["time", "survival", "at_risk", "group"], km_rows)

    def _summary(result):
        return {
            "concordance": result.cox.concordance,
            "loglik": result.cox.loglik,
            "logrank_statistic": result.split.statistic,
            "logrank_p": result.split.p_value,
            "cutoff_percentile": result.split.percentile,
            "optimism_biased": result.split.optimism_biased,
            "n_covariates": len(result.cox.coefs),
        }

    _write_json(
        out / "survival_summary.json",
        {"pc_model": _summary(pc), "baseline_model": _summary(base)},
    )
    rec.outputs += [
        "pc_model.csv",
        "baseline_model.csv",
        "km_curves.csv",
        "survival_summary.json",
    ]


# ---------------------------------------------------------------------------

def _write_manifest(out: Path, cfg: PipelineConfig, stages) -> Path:
    manifest = {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "version": __version__,
        "stages": [
            {
                "name": rec.name,
                "status": rec.status,
                "outputs": rec.outputs,
                "notes": rec.notes,
            }
            for rec in stages
        ],
    }
    path = out / "manifest.json"
    _write_json(path, manifest)
    return path


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    """Run every stage in order, writing artifacts into cfg.out_dir. The
    manifest is (re)written after each stage, so a failed run leaves behind
    the completed artifacts plus the failure marker."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stages = [StageRecord(name) for name in STAGE_ORDER]
    by_name = {rec.name: rec for rec in stages}

    table = None
    analysis = None

    def _run(name, body):
        rec = by_name[name]
        try:
            body(rec)
            if rec.status == "pending":
                rec.status = "ok"
        except Exception as exc:
            rec.status = "failed"
            rec.notes.append(str(exc))
            _write_manifest(out, cfg, stages)
            raise StageError(f"[{name}] {exc}") from exc
        _write_manifest(out, cfg, stages)

    def _ingest(rec):
        nonlocal table, analysis
        table = _stage_ingest(cfg, out, rec)
        analysis = _analysis_view(table)

    _run("ingest", _ingest)
    _run("correlate", lambda rec: _stage_correlate(analysis, out, rec))
    _run("ggm", lambda rec: _stage_ggm(cfg, analysis, out, rec))
    _run("pca", lambda rec: _stage_pca(cfg, analysis, out, rec))
    _run("xplain", lambda rec: _stage_xplain(cfg, analysis, out, rec))
    _run("survive", lambda rec: _stage_survive(cfg, analysis, out, rec))

    return PipelineResult(out_dir=out, manifest_path=out / "manifest.json", stages=stages)
