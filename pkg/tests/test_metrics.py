import math

import numpy as np
import pytest
from scipy.integrate import quad

from longisurv.errors import DataError, EmptyCellError
from longisurv.metrics import (concordance_td, brier_td, bootstrap_ci,
                               welch_one_sided, bonferroni, stars, risk_set,
                               window_risks, build_risk_cells, OracleScorer,
                               ModelScorer, mean_grid_concordance, ReportRow,
                               write_report)
from longisurv.model import ModelConfig, init_params
from longisurv.survival import hazard_to_survival
from longisurv.synthcohort import CohortConfig, generate_cohort


def naive_concordance(risks, steps, cens, horizon):
    """Independent exhaustive pair enumeration."""
    num = den = 0.0
    for i in range(len(risks)):
        if cens[i] or steps[i] >= horizon:
            continue
        for j in range(len(risks)):
            if steps[j] > steps[i]:
                den += 1
                if risks[i] > risks[j]:
                    num += 1.0
                elif risks[i] == risks[j]:
                    num += 0.5
    if den == 0:
        raise EmptyCellError("naive: no pairs")
    return num / den


def naive_brier(risks, steps, cens, horizon):
    total = 0.0
    for i in range(len(risks)):
        ind = 1.0 if (steps[i] < horizon and not cens[i]) else 0.0
        total += (ind - risks[i]) ** 2
    return total / len(risks)


def random_instance(rng, n):
    risks = rng.random(n)
    steps = rng.integers(1, 20, size=n)
    cens = rng.random(n) < 0.6
    horizon = int(rng.integers(2, 22))
    return risks, steps, cens, horizon


class TestConcordance:
    def test_single_concordant_pair(self):
        # eye A: event at year 3 (step 6), eye B censored at year 8 (step 16)
        c = concordance_td(np.array([0.9, 0.1]), np.array([6, 16]),
                           np.array([False, True]), horizon_step=12)
        assert c == 1.0

    def test_tie_counts_half(self):
        c = concordance_td(np.array([0.4, 0.4]), np.array([6, 16]),
                           np.array([False, True]), horizon_step=12)
        assert c == 0.5

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(60):
            risks, steps, cens, horizon = random_instance(rng, int(rng.integers(3, 30)))
            try:
                fast = concordance_td(risks, steps, cens, horizon)
            except EmptyCellError:
                with pytest.raises(EmptyCellError):
                    naive_concordance(risks, steps, cens, horizon)
                continue
            assert abs(fast - naive_concordance(risks, steps, cens, horizon)) <= 1e-12

    def test_empty_cell_is_a_signal_not_zero(self):
        with pytest.raises(EmptyCellError):
            concordance_td(np.array([0.5]), np.array([5]), np.array([True]), 10)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(4)
        risks, steps, cens, horizon = random_instance(rng, 25)
        a = concordance_td(risks, steps, cens, horizon)
        b = concordance_td(np.exp(3 * risks) + 7, steps, cens, horizon)
        assert a == b

    def test_negated_risks_give_one_minus_c(self):
        rng = np.random.default_rng(5)
        risks = rng.permutation(30) / 30.0          # distinct: no ties
        steps = rng.integers(1, 15, size=30)
        cens = rng.random(30) < 0.5
        try:
            a = concordance_td(risks, steps, cens, 12)
        except EmptyCellError:
            pytest.skip("degenerate draw")
        b = concordance_td(-risks, steps, cens, 12)
        assert a + b == pytest.approx(1.0, abs=1e-12)


class TestBrier:
    def test_perfect_prediction(self):
        assert brier_td(np.array([1.0]), np.array([3]), np.array([False]), 5) == 0.0

    def test_worst_prediction(self):
        assert brier_td(np.array([0.0]), np.array([3]), np.array([False]), 5) == 1.0

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            risks, steps, cens, horizon = random_instance(rng, 10)
            assert brier_td(risks, steps, cens, horizon) == pytest.approx(
                naive_brier(risks, steps, cens, horizon), abs=1e-14)

    def test_sum_flag(self):
        risks = np.array([0.2, 0.7])
        steps, cens = np.array([2, 9]), np.array([False, True])
        assert brier_td(risks, steps, cens, 5, "sum") == pytest.approx(
            2 * brier_td(risks, steps, cens, 5, "mean"))

    def test_event_fraction_predictor_beats_complement(self):
        rng = np.random.default_rng(7)
        steps = rng.integers(1, 12, size=100)
        cens = rng.random(100) < 0.6
        horizon = 8
        frac = float(((steps < horizon) & ~cens).mean())
        good = brier_td(np.full(100, frac), steps, cens, horizon)
        bad = brier_td(np.full(100, 1 - frac), steps, cens, horizon)
        assert good <= bad

    def test_empty_risk_set(self):
        with pytest.raises(EmptyCellError):
            brier_td(np.array([]), np.array([]), np.array([]), 5)


class TestBootstrap:
    def test_constant_statistic(self):
        res = bootstrap_ci(10, lambda idx: 0.7, n_samples=50, seed=1)
        assert res.lo95 == res.hi95 == 0.7
        assert res.mean == pytest.approx(0.7, abs=1e-12)

    def test_same_seed_identical_samples(self):
        data = np.random.default_rng(0).normal(size=25)
        a = bootstrap_ci(25, lambda i: data[i].mean(), n_samples=40, seed=9)
        b = bootstrap_ci(25, lambda i: data[i].mean(), n_samples=40, seed=9)
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_redraw_on_empty_cells(self):
        calls = {"n": 0}

        def statistic(idx):
            calls["n"] += 1
            if calls["n"] % 3 == 1:
                raise EmptyCellError("undefined")
            return float(idx.mean())

        res = bootstrap_ci(10, statistic, n_samples=20, seed=2)
        assert res.n_redraws > 0 and len(res.samples) == 20

    def test_gives_up_after_max_redraws(self):
        def statistic(idx):
            raise EmptyCellError("always")

        with pytest.raises(EmptyCellError):
            bootstrap_ci(10, statistic, n_samples=5, seed=3, max_redraws=4)

    def test_coverage_on_gaussian_mean(self):
        # percentile CI should cover the true mean ~95% of the time
        hits = 0
        n_trials = 1000
        base = np.random.default_rng(12345)
        for trial in range(n_trials):
            data = base.normal(loc=1.7, scale=1.0, size=100)
            res = bootstrap_ci(100, lambda i: float(data[i].mean()),
                               n_samples=400, seed=trial)
            hits += res.lo95 <= 1.7 <= res.hi95
        assert 0.93 <= hits / n_trials <= 0.97


def t_density(x, df):
    lognorm = (math.lgamma((df + 1) / 2) - math.lgamma(df / 2)
               - 0.5 * math.log(df * math.pi))
    return math.exp(lognorm - (df + 1) / 2 * math.log1p(x * x / df))


def welch_quadrature_oracle(a, b):
    """One-sided Welch P by numerical integration of the t density."""
    na, nb = len(a), len(b)
    va, vb = a.var(ddof=1) / na, b.var(ddof=1) / nb
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va ** 2 / (na - 1) + vb ** 2 / (nb - 1))
    if t >= 0:
        return quad(t_density, t, np.inf, args=(df,), epsabs=1e-12)[0]
    return 1.0 - quad(t_density, -t, np.inf, args=(df,), epsabs=1e-12)[0]


class TestWelch:
    def test_identical_samples_give_half(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        assert welch_one_sided(x, x.copy()) == pytest.approx(0.5)

    def test_separated_samples_tiny_p(self):
        a = 10 + 1e-4 * np.arange(10)
        b = 0 + 1e-4 * np.arange(10)
        assert welch_one_sided(a, b) < 1e-6

    def test_matches_quadrature_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(25):
            a = rng.normal(rng.uniform(-1, 1), rng.uniform(0.5, 2), size=int(rng.integers(5, 60)))
            b = rng.normal(rng.uniform(-1, 1), rng.uniform(0.5, 2), size=int(rng.integers(5, 60)))
            assert welch_one_sided(a, b) == pytest.approx(
                welch_quadrature_oracle(a, b), abs=1e-6)

    def test_degenerate_zero_variance(self):
        a, b = np.full(5, 3.0), np.full(5, 1.0)
        assert welch_one_sided(a, b) == 0.0
        assert welch_one_sided(b, a) == 1.0

    def test_small_samples_rejected(self):
        with pytest.raises(DataError):
            welch_one_sided(np.array([1.0]), np.array([1.0, 2.0]))


class TestBonferroni:
    @pytest.mark.parametrize("raw,adj,label", [
        (0.001, 0.04, "*"),
        (0.5, 1.0, "ns"),
        (1e-6, 4e-5, "****"),
        (1e-4, 4e-3, "**"),
    ])
    def test_adjustment_and_stars(self, raw, adj, label):
        p = bonferroni(raw)
        assert p == pytest.approx(adj)
        assert stars(p) == label

    def test_raw_p_bounds(self):
        with pytest.raises(DataError):
            bonferroni(1.5)


@pytest.fixture(scope="module")
def cohort():
    cfg = CohortConfig(n_patients=150, seed=21)
    return generate_cohort(cfg, render_images=False), cfg


class TestRiskCells:
    def test_risk_set_excludes_resolved_eyes(self, cohort):
        eyes, cfg = cohort
        t_step = cfg.grid.time_to_step(3.0)
        sel = risk_set(eyes, cfg.grid, t_step)
        for i in sel:
            assert eyes[i].outcome.event_step > t_step
        for i in set(range(len(eyes))) - set(sel):
            assert eyes[i].outcome.event_step <= t_step

    def test_oracle_cells_cover_grid(self, cohort):
        eyes, cfg = cohort
        cells = build_risk_cells(OracleScorer(), eyes, cfg.grid)
        assert len(cells) == 20
        for cell in cells.values():
            if cell is None:
                continue
            assert np.all((cell.risks >= 0) & (cell.risks <= 1))

    def test_window_clamps_to_grid_end(self, cohort):
        eyes, cfg = cohort
        curves = np.stack([hazard_to_survival(e.true_hazard) for e in eyes[:5]])
        t_step = cfg.grid.time_to_step(8.0)
        dt_steps = cfg.grid.time_to_step(8.0)
        risks = window_risks(curves, cfg.grid, t_step, dt_steps)
        end_clamped = window_risks(curves, cfg.grid, t_step, cfg.j_max - t_step)
        np.testing.assert_allclose(risks, end_clamped)

    def test_oracle_beats_anti_oracle(self, cohort):
        eyes, cfg = cohort
        cells = build_risk_cells(OracleScorer(), eyes, cfg.grid)
        anti = build_risk_cells(OracleScorer(), eyes, cfg.grid, rng_anti=True)
        mean_o, _ = mean_grid_concordance(cells)
        mean_a, _ = mean_grid_concordance(anti)
        assert mean_o > 0.65 > 0.5 > mean_a

    def test_untrained_model_scorer_runs(self, cohort):
        cfg_model = ModelConfig(kind="longitudinal", embed_dim=16, n_layers=1,
                                n_heads=2, j_max=27, step_months=6,
                                image_size=32, conv_widths=(4, 8, 8))
        params = init_params(cfg_model, seed=0)
        cohort_cfg = CohortConfig(n_patients=8, seed=5)
        eyes = generate_cohort(cohort_cfg)
        record = {"model": cfg_model.to_dict(), "pixel_mean": [0.2], "pixel_std": [0.2]}
        scorer = ModelScorer(params, record)
        cells = build_risk_cells(scorer, eyes, cohort_cfg.grid,
                                 t_years=(1.0,), dt_years=(2.0,))
        cell = cells[(1.0, 2.0)]
        assert cell is not None
        assert np.all((cell.risks > 0) & (cell.risks < 1))


def test_report_round_trip(tmp_path):
    rows = [ReportRow(model="longitudinal", metric="concordance", t_years=1.0,
                      dt_years=2.0, estimate=0.91, boot_mean=0.9, ci_lo=0.85,
                      ci_hi=0.95, p_adjusted=0.01, significance="**",
                      n_pairs=120, n_risk_set=60)]
    path = tmp_path / "report.tsv"
    write_report(str(path), rows)
    text = path.read_text().splitlines()
    assert text[0].startswith("model\tmetric")
    assert text[1].split("\t")[0] == "longitudinal"
    write_report(str(tmp_path / "again.tsv"), rows)
    assert (tmp_path / "again.tsv").read_bytes() == path.read_bytes()
