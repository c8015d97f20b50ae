import numpy as np
import pytest

from petrel.errors import ConvergenceError, DegenerateDataError, ValidationError
from petrel.survival import (
    CoxModel,
    SurvivalData,
    align,
    baseline_model,
    concordance,
    cox_fit,
    km_estimate,
    linear_predictor,
    logrank,
    optimal_split,
    pc_risk_model,
    read_survival,
    write_survival,
)
from petrel.table import FeatureTable


def _surv(times, events, ids=None):
    ids = ids or [f"p{i:03d}" for i in range(len(times))]
    return SurvivalData(patient_ids=ids, time=np.array(times, dtype=float),
                        event=np.array(events))


def _naive_breslow_ll(x, surv, beta):
    """Straight quadruple-nested definition: for each distinct event time,
    one log of the risk-set sum per event, risk set scanned by brute force."""
    x = np.atleast_2d(np.asarray(x, dtype=float).T).T
    beta = np.atleast_1d(beta)
    eta = x @ beta
    ll = 0.0
    for t in np.unique(surv.time[surv.event == 1]):
        at_this = (surv.time == t) & (surv.event == 1)
        d = int(at_this.sum())
        risk_sum = 0.0
        for j in range(surv.n):
            if surv.time[j] >= t:
                risk_sum += np.exp(eta[j])
        ll += float(eta[at_this].sum()) - d * np.log(risk_sum)
    return ll


def _simulate_cohort(rng, n, beta, censor_horizon):
    x = rng.standard_normal((n, len(beta)))
    u = rng.uniform(size=n)
    t = -np.log(u) / (0.1 * np.exp(x @ np.asarray(beta)))
    event = (t <= censor_horizon).astype(int)
    time = np.minimum(t, censor_horizon)
    return x, _surv(time, event)


# ---------------------------------------------------------------------------
# Cox fitting

class TestCoxFit:
    def test_single_covariate_matches_dense_grid_search(self):
        rng = np.random.default_rng(41)
        x, surv = _simulate_cohort(rng, 30, [0.8], censor_horizon=30.0)
        model = cox_fit(x, surv)
        grid = np.arange(-3.0, 3.0, 1e-3)
        lls = np.array([_naive_breslow_ll(x, surv, [b]) for b in grid])
        best = lls.max()
        assert _naive_breslow_ll(x, surv, model.coefs) >= best - 1e-4
        assert abs(model.coefs[0] - grid[lls.argmax()]) < 5e-3

    def test_loglik_agrees_with_naive_oracle_at_optimum(self):
        rng = np.random.default_rng(42)
        x, surv = _simulate_cohort(rng, 80, [0.5, -0.7], censor_horizon=25.0)
        model = cox_fit(x, surv)
        # reported loglik is on the standardized parametrization; the value
        # is invariant to centering/scaling, so the raw-scale oracle matches
        assert model.loglik == pytest.approx(
            _naive_breslow_ll(x, surv, model.coefs), abs=1e-8
        )

    def test_gradient_zero_at_reported_optimum(self):
        rng = np.random.default_rng(43)
        x, surv = _simulate_cohort(rng, 60, [1.0], censor_horizon=20.0)
        model = cox_fit(x, surv)
        h = 1e-6
        b = model.coefs[0]
        num_grad = (
            _naive_breslow_ll(x, surv, [b + h]) - _naive_breslow_ll(x, surv, [b - h])
        ) / (2 * h)
        assert abs(num_grad) < 1e-4

    def test_planted_effect_recovered(self):
        rng = np.random.default_rng(44)
        x, surv = _simulate_cohort(rng, 1000, [1.0], censor_horizon=18.0)
        assert 0.15 < 1 - surv.n_events / surv.n < 0.45  # realistic censoring
        model = cox_fit(x, surv)
        assert 0.85 <= model.coefs[0] <= 1.15
        assert model.concordance >= 0.7
        assert model.p_values[0] < 1e-6

    def test_likelihood_trace_non_decreasing(self):
        rng = np.random.default_rng(45)
        x, surv = _simulate_cohort(rng, 120, [0.6, -0.4, 0.2], censor_horizon=22.0)
        model = cox_fit(x, surv)
        trace = np.array(model.ll_trace)
        assert (np.diff(trace) >= -1e-12).all()
        assert model.n_iter < 100

    def test_null_covariate_near_zero_with_p_near_one(self):
        # one binary covariate, both groups share the same event pattern
        times = list(range(1, 11)) * 2
        events = [1] * 20
        group = [0.0] * 10 + [1.0] * 10
        model = cox_fit(np.array(group)[:, None], _surv(times, events))
        assert abs(model.coefs[0]) < 1e-6
        assert model.p_values[0] > 0.99

    def test_scale_equivariance(self):
        rng = np.random.default_rng(46)
        x, surv = _simulate_cohort(rng, 90, [0.5, -0.5], censor_horizon=25.0)
        a = cox_fit(x, surv)
        c = np.array([10.0, 0.25])
        b = cox_fit(x * c, surv)
        assert np.allclose(b.coefs, a.coefs / c, atol=1e-8)
        assert np.allclose(
            linear_predictor(b, x * c), linear_predictor(a, x), atol=1e-8
        )
        assert b.concordance == pytest.approx(a.concordance, abs=1e-12)

    def test_tied_event_times_use_shared_risk_set(self):
        # heavy ties; compare against the brute-force likelihood at the fit
        rng = np.random.default_rng(47)
        x = rng.standard_normal((40, 1))
        times = rng.integers(1, 6, size=40).astype(float)  # only 5 distinct
        events = rng.uniform(size=40) < 0.8
        surv = _surv(times, events.astype(int))
        model = cox_fit(x, surv)
        assert model.loglik == pytest.approx(
            _naive_breslow_ll(x, surv, model.coefs), abs=1e-8
        )

    def test_constant_covariate_rejected(self):
        surv = _surv([1, 2, 3, 4], [1, 1, 1, 1])
        x = np.column_stack([np.ones(4), np.arange(4.0)])
        with pytest.raises(DegenerateDataError, match="constant"):
            cox_fit(x, surv)

    def test_no_events_rejected(self):
        surv = _surv([1, 2, 3], [0, 0, 0])
        with pytest.raises(ValidationError, match="event"):
            cox_fit(np.arange(3.0)[:, None], surv)

    def test_more_covariates_than_events_rejected(self):
        surv = _surv([1, 2, 3, 4, 5], [1, 1, 0, 0, 0])
        x = np.random.default_rng(0).standard_normal((5, 3))
        with pytest.raises(ValidationError, match="events"):
            cox_fit(x, surv)

    def test_perfect_separation_reported(self):
        # covariate orders times exactly and the effect is huge: the partial
        # likelihood increases without bound along beta -> inf
        times = np.arange(1.0, 21.0)
        x = -times[:, None]
        surv = _surv(times, [1] * 20)
        with pytest.raises((DegenerateDataError, ConvergenceError)):
            cox_fit(x, surv)


# ---------------------------------------------------------------------------
# Concordance

class TestConcordance:
    def test_hand_computed_small_case(self):
        # times 1,2,3 all events; risks 3,2,1 -> every pair concordant
        surv = _surv([1, 2, 3], [1, 1, 1])
        assert concordance(np.array([3.0, 2.0, 1.0]), surv) == 1.0
        assert concordance(np.array([1.0, 2.0, 3.0]), surv) == 0.0
        assert concordance(np.array([5.0, 5.0, 5.0]), surv) == 0.5

    def test_censored_pairs_excluded(self):
        # pair (censored earlier, event later) is not comparable
        surv = _surv([1, 2], [0, 1])
        # only the (event at 2 vs censored at 1)? no: censored-first pair is
        # incomparable, event-first requires t_i < t_j with e_i = 1 -> none
        with pytest.raises(DegenerateDataError):
            concordance(np.array([1.0, 2.0]), surv)

    def test_equal_time_event_vs_censored_is_comparable(self):
        surv = _surv([2, 2], [1, 0])
        assert concordance(np.array([9.0, 1.0]), surv) == 1.0
        assert concordance(np.array([1.0, 9.0]), surv) == 0.0

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(48)
        risk = rng.standard_normal(50)
        surv = _surv(rng.uniform(1, 10, size=50),
                     (rng.uniform(size=50) < 0.7).astype(int))
        c0 = concordance(risk, surv)
        assert concordance(3.0 * risk + 7.0, surv) == pytest.approx(c0, abs=1e-15)
        assert concordance(np.exp(risk), surv) == pytest.approx(c0, abs=1e-15)

    def test_loop_oracle(self):
        rng = np.random.default_rng(49)
        n = 40
        risk = rng.standard_normal(n)
        risk[rng.integers(0, n, 5)] = risk[0]  # some risk ties
        surv = _surv(rng.integers(1, 8, size=n).astype(float),
                     (rng.uniform(size=n) < 0.6).astype(int))
        num = 0.0
        den = 0
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                comp = (surv.time[i] < surv.time[j] and surv.event[i] == 1) or (
                    surv.time[i] == surv.time[j]
                    and surv.event[i] == 1
                    and surv.event[j] == 0
                )
                if not comp:
                    continue
                den += 1
                if risk[i] > risk[j]:
                    num += 1.0
                elif risk[i] == risk[j]:
                    num += 0.5
        assert concordance(risk, surv) == pytest.approx(num / den, abs=1e-15)


# ---------------------------------------------------------------------------
# Kaplan-Meier

class TestKaplanMeier:
    def test_three_events(self):
        curve = km_estimate(_surv([1, 2, 3], [1, 1, 1]))
        assert curve.times.tolist() == [0.0, 1.0, 2.0, 3.0]
        assert curve.survival == pytest.approx([1.0, 2 / 3, 1 / 3, 0.0])
        assert curve.at_risk.tolist() == [3, 3, 2, 1]

    def test_censoring_shrinks_risk_set(self):
        curve = km_estimate(_surv([1, 2, 3], [0, 1, 1]))
        assert curve.times.tolist() == [0.0, 2.0, 3.0]
        assert curve.survival == pytest.approx([1.0, 0.5, 0.0])
        assert curve.at_risk.tolist() == [3, 2, 1]

    def test_all_censored_flat_one(self):
        curve = km_estimate(_surv([4, 5, 6], [0, 0, 0]))
        assert curve.times.tolist() == [0.0]
        assert curve.survival.tolist() == [1.0]

    def test_no_censoring_equals_empirical_survivor(self):
        rng = np.random.default_rng(50)
        times = rng.integers(1, 12, size=60).astype(float)
        curve = km_estimate(_surv(times, [1] * 60))
        for t, s in zip(curve.times[1:], curve.survival[1:]):
            assert s == pytest.approx((times > t).mean(), abs=1e-12)

    def test_censored_at_event_time_still_at_risk(self):
        curve = km_estimate(_surv([2, 2, 5], [1, 0, 1]))
        # at t=2 the censored patient counts in the risk set of 3
        assert curve.at_risk.tolist() == [3, 3, 1]
        assert curve.survival == pytest.approx([1.0, 2 / 3, 0.0])


# ---------------------------------------------------------------------------
# Log-rank

class TestLogrank:
    def test_identical_groups_null(self):
        g = _surv([1, 2, 3, 4], [1, 1, 0, 1])
        res = logrank(g, _surv([1, 2, 3, 4], [1, 1, 0, 1]))
        assert res.statistic == 0.0
        assert res.p_value == 1.0

    def test_symmetry(self):
        rng = np.random.default_rng(51)
        a = _surv(rng.uniform(1, 10, 30), (rng.uniform(size=30) < 0.8).astype(int))
        b = _surv(rng.uniform(2, 14, 25), (rng.uniform(size=25) < 0.8).astype(int))
        r1 = logrank(a, b)
        r2 = logrank(b, a)
        assert r1.statistic == pytest.approx(r2.statistic, rel=1e-12)
        assert r1.p_value == pytest.approx(r2.p_value, rel=1e-12)

    def test_separated_groups_highly_significant(self):
        a = _surv(np.arange(1.0, 21.0), [1] * 20)
        b = _surv(np.arange(31.0, 51.0), [1] * 20)
        res = logrank(a, b)
        assert res.statistic > 20.0
        assert res.p_value < 1e-5

    def test_hand_computed_two_by_two(self):
        # events at t=1 (group a) and t=2 (group b), no censoring
        a = _surv([1.0], [1])
        b = _surv([2.0], [1])
        # t=1: n1=1, n2=1, d=1 -> E1 += 0.5, V += 0.25; t=2: only b at risk,
        # n1=0 -> E1 += 0, V += 0. O1=1 -> stat = (1-0.5)^2/0.25 = 1.0
        res = logrank(a, b)
        assert res.statistic == pytest.approx(1.0, abs=1e-12)

    def test_empty_group_rejected(self):
        a = _surv([1.0], [1])
        with pytest.raises(ValidationError):
            logrank(a, SurvivalData(patient_ids=[], time=np.array([]), event=np.array([], dtype=int)))

    def test_no_events_rejected(self):
        with pytest.raises(DegenerateDataError):
            logrank(_surv([1, 2], [0, 0]), _surv([3, 4], [0, 0]))


# ---------------------------------------------------------------------------
# Optimal split

class TestOptimalSplit:
    def _cohort(self, seed=52, n=80):
        rng = np.random.default_rng(seed)
        risk = rng.standard_normal(n)
        u = rng.uniform(size=n)
        t = -np.log(u) / (0.2 * np.exp(risk))
        horizon = 12.0
        return risk, _surv(np.minimum(t, horizon), (t <= horizon).astype(int))

    def test_matches_exhaustive_reevaluation(self):
        risk, surv = self._cohort()
        out = optimal_split(risk, surv)
        best_stat = -1.0
        best_cut = None
        for q in range(10, 91, 5):
            cut = float(np.quantile(risk, q / 100))
            high = risk > cut
            if not high.any() or high.all():
                continue
            stat = logrank(surv.subset(high), surv.subset(~high)).statistic
            if stat > best_stat + 1e-12:
                best_stat, best_cut = stat, cut
        assert out.statistic == pytest.approx(best_stat, rel=1e-12)
        assert out.cutoff == pytest.approx(best_cut, abs=0)
        assert out.optimism_biased is True

    def test_two_point_risk_finds_the_gap(self):
        # risk is exactly the group indicator; every cutoff in the gap gives
        # the same partition, tie resolved at the lowest percentile
        rng = np.random.default_rng(53)
        n = 40
        grp = np.repeat([0.0, 1.0], n // 2)
        t = np.where(grp == 1, rng.uniform(1, 3, n), rng.uniform(8, 12, n))
        surv = _surv(t, [1] * n)
        out = optimal_split(grp, surv)
        assert (out.high_mask == (grp == 1.0)).all()
        assert out.statistic > 15.0
        # every percentile up to the median gives cutoff 0 and the same
        # partition; the tie rule keeps the lowest one
        assert out.percentile == 10

    def test_monotone_transform_keeps_partition(self):
        risk, surv = self._cohort(seed=54)
        a = optimal_split(risk, surv)
        b = optimal_split(np.exp(risk / 2), surv)
        assert (a.high_mask == b.high_mask).all()
        assert a.statistic == pytest.approx(b.statistic, rel=1e-12)

    def test_identical_risk_rejected(self):
        _, surv = self._cohort(seed=55)
        with pytest.raises(DegenerateDataError):
            optimal_split(np.ones(surv.n), surv)

    def test_small_cohort_rejected(self):
        surv = _surv([1, 2, 3], [1, 1, 1])
        with pytest.raises(ValidationError):
            optimal_split(np.array([1.0, 2.0, 3.0]), surv)


# ---------------------------------------------------------------------------
# Composite models

def _factor_table(rng, n=150, p=8, hazard_scale=1.0):
    f = rng.standard_normal(n)
    loadings = np.linspace(1.0, 0.6, p)
    x = f[:, None] * loadings[None, :] + 0.35 * rng.standard_normal((n, p))
    ids = [f"p{i:03d}" for i in range(n)]
    names = [f"f{j:02d}" for j in range(p)]
    table = FeatureTable(patient_ids=ids, names=names, values=x)
    u = rng.uniform(size=n)
    t = -np.log(u) / (0.1 * np.exp(hazard_scale * f))
    horizon = 25.0
    surv = SurvivalData(patient_ids=ids, time=np.minimum(t, horizon),
                        event=(t <= horizon).astype(int))
    return table, surv, f


class TestRiskModels:
    def test_pc_model_has_exactly_k_coefficients(self):
        rng = np.random.default_rng(56)
        table, surv, _ = _factor_table(rng)
        out = pc_risk_model(table, surv, k=4)
        assert len(out.cox.coefs) == 4
        assert out.cox.names == ("pc1", "pc2", "pc3", "pc4")
        assert len(out.km_high.times) >= 1 and len(out.km_low.times) >= 1

    def test_leading_component_carries_the_hazard(self):
        hits = 0
        for rep in range(100):
            rng = np.random.default_rng(6000 + rep)
            table, surv, _ = _factor_table(rng)
            out = pc_risk_model(table, surv, k=4)
            if out.cox.p_values[0] < 0.01 and (out.cox.p_values[1:] > 0.05).all():
                hits += 1
        assert hits > 50

    def test_pc_split_separates_planted_groups(self):
        rng = np.random.default_rng(57)
        table, surv, f = _factor_table(rng, n=200, hazard_scale=1.2)
        out = pc_risk_model(table, surv, k=3)
        assert out.split.statistic > 10.0
        assert out.cox.concordance > 0.65
        # the high-risk arm should die faster: lower final survival
        assert out.km_high.survival[-1] <= out.km_low.survival[-1]

    def test_misaligned_rosters_rejected(self):
        rng = np.random.default_rng(58)
        table, surv, _ = _factor_table(rng)
        shuffled = surv.subset(np.roll(np.arange(surv.n), 1))
        with pytest.raises(ValidationError, match="aligned"):
            pc_risk_model(table, shuffled, k=3)

    def test_baseline_uses_the_three_clinical_columns(self):
        rng = np.random.default_rng(59)
        n = 120
        ids = [f"p{i:03d}" for i in range(n)]
        grade = rng.integers(1, 4, n).astype(float)
        age = rng.uniform(45, 80, n)
        suv = rng.uniform(2, 20, n)
        filler = rng.standard_normal(n)
        table = FeatureTable(
            patient_ids=ids,
            names=["age", "filler", "grade", "suv_max"],
            values=np.column_stack([age, filler, grade, suv]),
        )
        risk = 0.8 * (grade - 2) + 0.03 * (age - 60)
        u = rng.uniform(size=n)
        t = -np.log(u) / (0.05 * np.exp(risk))
        horizon = 40.0
        surv = SurvivalData(patient_ids=ids, time=np.minimum(t, horizon),
                            event=(t <= horizon).astype(int))
        out = baseline_model(table, surv)
        assert out.cox.names == ("grade", "age", "suv_max")
        assert len(out.cox.coefs) == 3
        assert out.cox.coefs[0] > 0  # higher grade, higher hazard

    def test_baseline_missing_column_named(self):
        rng = np.random.default_rng(60)
        table = FeatureTable(
            patient_ids=["a", "b"],
            names=["grade", "age"],
            values=rng.standard_normal((2, 2)),
        )
        surv = _surv([1, 2], [1, 1], ids=["a", "b"])
        with pytest.raises(ValidationError, match="suv_max"):
            baseline_model(table, surv)


# ---------------------------------------------------------------------------
# I/O and alignment

class TestSurvivalIo:
    def test_roundtrip(self, tmp_path):
        surv = _surv([1.5, 2.25, 10.125], [1, 0, 1], ids=["a", "b", "c"])
        path = tmp_path / "surv.csv"
        write_survival(surv, path)
        back = read_survival(path)
        assert back.patient_ids == surv.patient_ids
        assert (back.time == surv.time).all()
        assert (back.event == surv.event).all()

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "surv.csv"
        path.write_text("id,time,event\na,1,1\n")
        with pytest.raises(Exception, match="header"):
            read_survival(path)

    def test_align_reorders_to_table(self):
        table = FeatureTable(
            patient_ids=["a", "b", "c"],
            names=["v"],
            values=np.arange(3.0)[:, None],
        )
        surv = _surv([3, 1, 2], [1, 1, 0], ids=["c", "a", "b"])
        aligned = align(table, surv)
        assert aligned.patient_ids == ["a", "b", "c"]
        assert aligned.time.tolist() == [1.0, 2.0, 3.0]
        assert aligned.event.tolist() == [1, 0, 1]

    def test_align_missing_patient_named(self):
        table = FeatureTable(
            patient_ids=["a", "b"], names=["v"], values=np.zeros((2, 1))
        )
        surv = _surv([1.0], [1], ids=["a"])
        with pytest.raises(ValidationError, match="'b'"):
            align(table, surv)

    def test_nonpositive_time_rejected(self):
        with pytest.raises(ValidationError):
            _surv([0.0, 1.0], [1, 1])

    def test_bad_event_flag_rejected(self):
        with pytest.raises(ValidationError):
            _surv([1.0, 2.0], [1, 2])
