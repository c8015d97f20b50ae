"""Survival analysis over right-censored follow-up: proportional-hazards
regression (Breslow tie handling, Newton with step-halving), Harrell's
concordance, Kaplan-Meier curves, the two-group log-rank test, and the
log-rank-optimized risk split used for stratification plots.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as spstats

from .errors import (
    ConvergenceError,
    DegenerateDataError,
    FormatError,
    ValidationError,
)
from .table import FeatureTable

RISK_PERCENTILES = tuple(range(10, 91, 5))


@dataclass(frozen=True)
class SurvivalData:
    patient_ids: list[str]
    time: np.ndarray
    event: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.time, dtype=np.float64)
        e = np.asarray(self.event)
        if t.shape != (len(self.patient_ids),) or e.shape != t.shape:
            raise FormatError("survival arrays must align with patient ids")
        if not np.isfinite(t).all() or (t <= 0).any():
            raise ValidationError("survival times must be positive and finite")
        if not np.isin(e, (0, 1)).all():
            raise ValidationError("event flags must be 0 or 1")
        object.__setattr__(self, "time", t)
        object.__setattr__(self, "event", e.astype(np.int64))

    @property
    def n(self) -> int:
        return len(self.patient_ids)

    @property
    def n_events(self) -> int:
        return int(self.event.sum())

    def subset(self, idx) -> "SurvivalData":
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return SurvivalData(
            patient_ids=[self.patient_ids[i] for i in idx],
            time=self.time[idx],
            event=self.event[idx],
        )


@dataclass(frozen=True)
class CoxModel:
    names: tuple[str, ...]
    coefs: np.ndarray
    se: np.ndarray
    p_values: np.ndarray
    concordance: float
    loglik: float
    n_iter: int
    ll_trace: tuple[float, ...] = field(repr=False, default=())


@dataclass(frozen=True)
class KmCurve:
    group: str
    times: np.ndarray  # leading 0 anchor, then ordered event times
    survival: np.ndarray
    at_risk: np.ndarray


@dataclass(frozen=True)
class LogrankResult:
    statistic: float
    p_value: float
    optimism_biased: bool = False


@dataclass(frozen=True)
class SplitOutcome:
    cutoff: float
    percentile: int
    statistic: float
    p_value: float
    high_mask: np.ndarray
    optimism_biased: bool = True


@dataclass(frozen=True)
class RiskModelResult:
    cox: CoxModel
    risk: np.ndarray
    split: SplitOutcome
    km_high: KmCurve
    km_low: KmCurve


# ---------------------------------------------------------------------------
# I/O

def read_survival(path) -> SurvivalData:
    path = Path(path)
    with path.open(newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty CSV") from None
        if header[:3] != ["patient_id", "time", "event"]:
            raise FormatError(f"{path}: header must be patient_id,time,event")
        ids, times, events = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 cells")
            ids.append(row[0])
            try:
                times.append(float(row[1]))
                events.append(int(row[2]))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{path}: duplicate patient_id")
    return SurvivalData(patient_ids=ids, time=np.array(times), event=np.array(events))


def write_survival(surv: SurvivalData, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["patient_id", "time", "event"])
    for pid, t, e in zip(surv.patient_ids, surv.time, surv.event):
        writer.writerow([pid, "%.17g" % t, int(e)])
    Path(path).write_text(buf.getvalue())


def align(table: FeatureTable, surv: SurvivalData) -> SurvivalData:
    """Reorder survival rows into the table's patient order."""
    pos = {pid: i for i, pid in enumerate(surv.patient_ids)}
    missing = [pid for pid in table.patient_ids if pid not in pos]
    if missing:
        raise ValidationError(f"no survival row for patient {missing[0]!r}")
    idx = np.array([pos[pid] for pid in table.patient_ids])
    return surv.subset(idx)


# ---------------------------------------------------------------------------
# Cox proportional hazards (Breslow ties)

def _breslow_terms(x, time, event, beta):
    """Log partial likelihood, gradient, and information at beta.

    Risk-set sums come from suffix cumulative sums over rows sorted by
    ascending time; tied times share one risk set per Breslow.
    """
    eta = x @ beta
    eta = eta - eta.max()  # guards exp overflow; ll shifts cancel per block
    w = np.exp(eta)
    s0 = np.cumsum(w[::-1])[::-1]
    s1 = np.cumsum((w[:, None] * x)[::-1], axis=0)[::-1]
    s2 = np.cumsum((w[:, None, None] * (x[:, :, None] * x[:, None, :]))[::-1], axis=0)[::-1]

    starts = np.flatnonzero(np.r_[True, time[1:] != time[:-1]])
    ends = np.r_[starts[1:], time.size]
    ll = 0.0
    grad = np.zeros(x.shape[1])
    info = np.zeros((x.shape[1], x.shape[1]))
    for s, e in zip(starts, ends):
        ev = np.flatnonzero(event[s:e]) + s
        d = ev.size
        if d == 0:
            continue
        mu = s1[s] / s0[s]
        ll += float(eta[ev].sum()) - d * float(np.log(s0[s]))
        grad += x[ev].sum(axis=0) - d * mu
        info += d * (s2[s] / s0[s] - np.outer(mu, mu))
    return ll, grad, info


def cox_fit(covariates: np.ndarray, surv: SurvivalData, names=None) -> CoxModel:
    """Maximize the Breslow partial likelihood by Newton iterations with
    step-halving; covariates are standardized internally and coefficients
    mapped back, so the reported scale is the caller's.
    """
    x = np.asarray(covariates, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, k = x.shape
    if n != surv.n:
        raise ValidationError("covariate rows do not match survival rows")
    if surv.n_events < 1:
        raise ValidationError("need at least one event")
    if k >= surv.n_events:
        raise ValidationError(f"{k} covariates with only {surv.n_events} events")
    sds = x.std(axis=0)
    for j in range(k):
        if sds[j] == 0:
            raise DegenerateDataError(f"constant covariate at column {j}")
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(k))
    z = (x - x.mean(axis=0)) / sds

    order = np.argsort(surv.time, kind="stable")
    zs = z[order]
    ts = surv.time[order]
    es = surv.event[order]

    beta = np.zeros(k)
    ll, grad, info = _breslow_terms(zs, ts, es, beta)
    trace = [ll]
    n_iter = 0
    converged = False
    for n_iter in range(1, 101):
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            raise ConvergenceError("singular information matrix") from None
        scale = 1.0
        while True:
            cand = beta + scale * step
            ll_new, grad_new, info_new = _breslow_terms(zs, ts, es, cand)
            if ll_new >= ll - 1e-12:
                break
            scale /= 2.0
            if scale < 1e-10:
                raise ConvergenceError("step-halving failed to improve likelihood")
        beta = cand
        trace.append(ll_new)
        if float(np.linalg.norm(beta)) > 50.0:
            raise DegenerateDataError(
                "coefficient divergence (monotone likelihood / separation)"
            )
        delta = ll_new - ll
        ll, grad, info = ll_new, grad_new, info_new
        if abs(delta) < 1e-9:
            converged = True
            break
    if not converged:
        raise ConvergenceError("Newton iterations did not converge")

    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise ConvergenceError("singular information matrix at optimum") from None
    se_std = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    coefs = beta / sds
    se = se_std / sds
    with np.errstate(divide="ignore", invalid="ignore"):
        zscores = np.where(se > 0, np.abs(coefs) / se, np.inf)
    p_values = 2.0 * spstats.norm.sf(zscores)
    lp = x @ coefs
    c = concordance(lp, surv)
    return CoxModel(
        names=names,
        coefs=coefs,
        se=se,
        p_values=p_values,
        concordance=c,
        loglik=ll,
        n_iter=n_iter,
        ll_trace=tuple(trace),
    )


def linear_predictor(model: CoxModel, covariates: np.ndarray) -> np.ndarray:
    x = np.asarray(covariates, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return x @ model.coefs


# ---------------------------------------------------------------------------
# Concordance

def concordance(risk: np.ndarray, surv: SurvivalData) -> float:
    """Harrell's C: fraction of comparable pairs whose risk ordering matches
    the outcome ordering; tied risks count one half.

    A pair is comparable when the earlier time is an event, or at equal
    times when exactly the one with the event is compared against a
    censored patient.
    """
    risk = np.asarray(risk, dtype=np.float64)
    t = surv.time
    e = surv.event.astype(bool)
    if risk.shape != t.shape:
        raise ValidationError("risk vector does not match survival rows")
    ti = t[:, None]
    tj = t[None, :]
    ei = e[:, None]
    ej = e[None, :]
    comparable = ((ti < tj) & ei) | ((ti == tj) & ei & ~ej)
    n_comp = int(comparable.sum())
    if n_comp == 0:
        raise DegenerateDataError("no comparable pair")
    ri = risk[:, None]
    rj = risk[None, :]
    concordant = (comparable & (ri > rj)).sum()
    tied = (comparable & (ri == rj)).sum()
    return float((concordant + 0.5 * tied) / n_comp)


# ---------------------------------------------------------------------------
# Kaplan-Meier and log-rank

def km_estimate(surv: SurvivalData, group: str = "") -> KmCurve:
    """Product-limit curve; a patient censored at an event time is still in
    that time's risk set. Output rows are the event times, anchored by a
    (0, 1, N) start."""
    if surv.n == 0:
        raise ValidationError("empty survival data")
    t = surv.time
    e = surv.event
    event_times = np.unique(t[e == 1])
    times = [0.0]
    survival = [1.0]
    at_risk = [surv.n]
    # the running product is kept as an exact integer ratio and rounded once
    # per step, so without censoring the curve lands on the empirical
    # survivor fraction to the last bit
    s_num = 1
    s_den = 1
    for et in event_times:
        n_risk = int((t >= et).sum())
        d = int(((t == et) & (e == 1)).sum())
        s_num *= n_risk - d
        s_den *= n_risk
        times.append(float(et))
        survival.append(s_num / s_den)
        at_risk.append(n_risk)
    return KmCurve(
        group=group,
        times=np.array(times),
        survival=np.array(survival),
        at_risk=np.array(at_risk, dtype=np.int64),
    )


def logrank(a: SurvivalData, b: SurvivalData) -> LogrankResult:
    """Two-group log-rank chi-square (1 df) with the hypergeometric
    variance; all-zero variance yields statistic 0, p 1."""
    if a.n == 0 or b.n == 0:
        raise ValidationError("both groups must be nonempty")
    if a.n_events + b.n_events == 0:
        raise DegenerateDataError("no events in either group")
    times = np.unique(np.concatenate([a.time[a.event == 1], b.time[b.event == 1]]))
    obs = 0.0
    exp = 0.0
    var = 0.0
    for t in times:
        n1 = int((a.time >= t).sum())
        n2 = int((b.time >= t).sum())
        d1 = int(((a.time == t) & (a.event == 1)).sum())
        d2 = int(((b.time == t) & (b.event == 1)).sum())
        n = n1 + n2
        d = d1 + d2
        if n == 0 or d == 0:
            continue
        obs += d1
        exp += d * n1 / n
        if n > 1:
            var += d * (n1 / n) * (n2 / n) * (n - d) / (n - 1)
    if var <= 0.0:
        return LogrankResult(statistic=0.0, p_value=1.0)
    stat = (obs - exp) ** 2 / var
    return LogrankResult(statistic=float(stat), p_value=float(spstats.chi2.sf(stat, 1)))


def optimal_split(
    risk: np.ndarray, surv: SurvivalData, percentiles=RISK_PERCENTILES
) -> SplitOutcome:
    """Best log-rank statistic over risk-percentile cutoffs (high = risk
    above the cutoff). Ties keep the lower cutoff; the reported p-value is
    flagged optimism-biased because the cutoff was searched.
    """
    risk = np.asarray(risk, dtype=np.float64)
    if surv.n < 20:
        raise ValidationError("need >= 20 patients to search a split")
    if np.all(risk == risk[0]):
        raise DegenerateDataError("all risk values identical")
    best = None
    for q in percentiles:
        cutoff = float(np.quantile(risk, q / 100.0))
        high = risk > cutoff
        if not high.any() or high.all():
            continue
        res = logrank(surv.subset(high), surv.subset(~high))
        if best is None or res.statistic > best.statistic + 1e-12:
            best = SplitOutcome(
                cutoff=cutoff,
                percentile=q,
                statistic=res.statistic,
                p_value=res.p_value,
                high_mask=high,
            )
    if best is None:
        raise DegenerateDataError("no percentile produced two nonempty groups")
    return best


# ---------------------------------------------------------------------------
# Composite risk models

def _stratify(cox: CoxModel, covariates: np.ndarray, surv: SurvivalData) -> RiskModelResult:
    lp = linear_predictor(cox, covariates)
    split = optimal_split(lp, surv)
    km_high = km_estimate(surv.subset(split.high_mask), group="high")
    km_low = km_estimate(surv.subset(~split.high_mask), group="low")
    return RiskModelResult(cox=cox, risk=lp, split=split, km_high=km_high, km_low=km_low)


def pc_risk_model(table: FeatureTable, surv: SurvivalData, k: int = 12) -> RiskModelResult:
    """Fit the hazard on the first k principal-component scores of the
    continuous features and stratify by the optimized risk split."""
    from .stats import pca, scores

    if table.patient_ids != surv.patient_ids:
        raise ValidationError("table and survival data are not row-aligned")
    p = pca(table)
    if not 1 <= k <= len(p.names):
        raise ValidationError(f"k must be in 1..{len(p.names)}")
    s = scores(p, table, k)
    cox = cox_fit(s, surv, names=tuple(f"pc{j + 1}" for j in range(k)))
    return _stratify(cox, s, surv)


BASELINE_COLUMNS = ("grade", "age", "suv_max")


def baseline_model(table: FeatureTable, surv: SurvivalData) -> RiskModelResult:
    """Reference hazard on the routine clinical trio: grade, age, and the
    in-lesion maximum uptake."""
    if table.patient_ids != surv.patient_ids:
        raise ValidationError("table and survival data are not row-aligned")
    for col in BASELINE_COLUMNS:
        if col not in table.names:
            raise ValidationError(f"missing baseline column {col!r}")
    x = np.column_stack([table.column(c) for c in BASELINE_COLUMNS])
    cox = cox_fit(x, surv, names=BASELINE_COLUMNS)
    return _stratify(cox, x, surv)
