"""Verification metrics, the variational oracle, and the diagnostic experiments.

The metric tests pit the vectorized implementations against naive double-loop
transcriptions of the defining formulas; the oracle tests use closed-form
scalar solutions. Experiment mechanics run on a small cycling rig.
"""

import csv

import numpy as np
import pytest

import cyclecast.cycler as C
import cyclecast.damodel as D
import cyclecast.evalx as E
import cyclecast.fcmodel as F
import cyclecast.obsproc as OP
import cyclecast.satsim as S
import cyclecast.state as ST
import cyclecast.world as W
from cyclecast.grid import GridSpec
from cyclecast.state import StateCube, StateNorm


# ---- naive transcriptions of the metric formulas ----

def loop_metrics(fc, tr, weights):
    """All four metrics for one (channel, lead) slab, (D, H, W) inputs.

    Plain Python loops, 1/(H*W) normalization with mean-one latitude
    weights. Returns dict with per-set aggregates (RMSE/STD average the
    per-sample roots, MBE averages the signed means).
    """
    nd, nh, nw = fc.shape
    mbe = 0.0
    for s in range(nd):
        acc = 0.0
        for i in range(nh):
            for j in range(nw):
                acc += weights[i] * (fc[s, i, j] - tr[s, i, j])
        mbe += acc / (nh * nw)
    mbe /= nd
    rmse = 0.0
    std = 0.0
    for s in range(nd):
        sq = 0.0
        dv = 0.0
        for i in range(nh):
            for j in range(nw):
                e = fc[s, i, j] - tr[s, i, j]
                sq += weights[i] * e * e
                dv += weights[i] * (e - mbe) ** 2
        rmse += np.sqrt(sq / (nh * nw))
        std += np.sqrt(dv / (nh * nw))
    return {"RMSE": rmse / nd, "MBE": mbe, "STD_ERROR": std / nd}


def loop_acc(fc, tr, clim, weights):
    nd, nh, nw = fc.shape
    total = 0.0
    for s in range(nd):
        num = 0.0
        d1 = 0.0
        d2 = 0.0
        for i in range(nh):
            for j in range(nw):
                fa = fc[s, i, j] - clim[s, i, j]
                ta = tr[s, i, j] - clim[s, i, j]
                num += weights[i] * fa * ta
                d1 += weights[i] * fa * fa
                d2 += weights[i] * ta * ta
        total += num / np.sqrt(d1 * d2)
    return total / nd


def make_clim(grid, fields, t_start, t_end, year_days=12):
    return E.Climatology(grid, fields, t_start, t_end, year_days)


def zero_clim(grid, times):
    shape = (ST.n_channels(grid), grid.n_lat, grid.n_lon)
    fields = {}
    clim = E.Climatology(grid, {}, -1e6, -1e6 + 1.0, 12)
    for t in times:
        fields[clim.key_of(t)] = np.zeros(shape)
    return E.Climatology(grid, fields, -1e6, -1e6 + 1.0, 12)


@pytest.fixture(scope="module")
def metric_grid():
    return GridSpec(8, 16, (500, 850))


class TestComputeMetric:
    @pytest.fixture
    def grid(self, metric_grid):
        return metric_grid

    def rand_pair(self, grid, rng, nd=3, nl=2):
        shape = (nd, nl, ST.n_channels(grid), grid.n_lat, grid.n_lon)
        return rng.standard_normal(shape), rng.standard_normal(shape)

    def test_matches_loop_oracles(self, grid):
        rng = np.random.default_rng(7)
        fc, tr = self.rand_pair(grid, rng)
        es = E.EvalSet((24.0, 30.0, 36.0), (6.0, 12.0))
        w = grid.lat_weights()
        out = {k: E.compute_metric(k, fc, tr, es, grid)
               for k in ("RMSE", "MBE", "STD_ERROR")}
        for li, lead in enumerate(es.leads_h):
            for c in range(ST.n_channels(grid)):
                want = loop_metrics(fc[:, li, c], tr[:, li, c], w)
                var, lev = ST.channel_var_level(grid, c)
                for kind, series in out.items():
                    got = series.value(var, lev, lead)
                    assert abs(got - want[kind]) < 1e-12

    def test_acc_matches_loop_oracle(self, grid):
        rng = np.random.default_rng(8)
        fc, tr = self.rand_pair(grid, rng, nd=2)
        es = E.EvalSet((24.0, 30.0), (6.0, 12.0))
        shape = (ST.n_channels(grid), grid.n_lat, grid.n_lon)
        clim = E.Climatology(
            grid, {E.Climatology(grid, {}, 0, 1, 12).key_of(t):
                   rng.standard_normal(shape) for t in (30.0, 36.0, 42.0)},
            -100.0, -50.0, 12)
        series = E.compute_metric("ACC", fc, tr, es, grid, clim=clim)
        w = grid.lat_weights()
        for li, lead in enumerate(es.leads_h):
            for c in range(ST.n_channels(grid)):
                m = np.stack([clim.lookup(t0 + lead)[c] for t0 in es.t0s])
                want = loop_acc(fc[:, li, c], tr[:, li, c], m, w)
                var, lev = ST.channel_var_level(grid, c)
                assert abs(series.value(var, lev, lead) - want) < 1e-12

    def test_per_sample_decomposition_identity(self, grid):
        rng = np.random.default_rng(9)
        es = E.EvalSet((24.0,), (6.0,))
        for _ in range(20):
            fc, tr = self.rand_pair(grid, rng, nd=1, nl=1)
            rmse = E.compute_metric("RMSE", fc, tr, es, grid)
            mbe = E.compute_metric("MBE", fc, tr, es, grid)
            std = E.compute_metric("STD_ERROR", fc, tr, es, grid)
            for (v, l, _, _, r), (_, _, _, _, m), (_, _, _, _, s) in zip(
                    rmse.rows, mbe.rows, std.rows):
                assert abs(r * r - (m * m + s * s)) < 1e-10

    def test_perfect_forecast(self, grid):
        rng = np.random.default_rng(10)
        _, tr = self.rand_pair(grid, rng, nd=2, nl=1)
        fc = tr.copy()
        es = E.EvalSet((24.0, 30.0), (6.0,))
        clim = zero_clim(grid, [30.0, 36.0])
        for kind, want in (("RMSE", 0.0), ("MBE", 0.0), ("STD_ERROR", 0.0)):
            series = E.compute_metric(kind, fc, tr, es, grid)
            assert all(abs(r[4] - want) < 1e-12 for r in series.rows)
        acc = E.compute_metric("ACC", fc, tr, es, grid, clim=clim)
        assert all(abs(r[4] - 1.0) < 1e-12 for r in acc.rows)

    def test_constant_offset(self, grid):
        rng = np.random.default_rng(11)
        _, tr = self.rand_pair(grid, rng, nd=2, nl=1)
        delta = -0.75
        fc = tr + delta
        es = E.EvalSet((24.0, 30.0), (6.0,))
        rmse = E.compute_metric("RMSE", fc, tr, es, grid)
        mbe = E.compute_metric("MBE", fc, tr, es, grid)
        std = E.compute_metric("STD_ERROR", fc, tr, es, grid)
        assert all(abs(r[4] - abs(delta)) < 1e-12 for r in rmse.rows)
        assert all(abs(r[4] - delta) < 1e-12 for r in mbe.rows)
        assert all(abs(r[4]) < 1e-12 for r in std.rows)

    def test_anti_anomaly(self, grid):
        rng = np.random.default_rng(12)
        _, tr = self.rand_pair(grid, rng, nd=1, nl=1)
        fc = -tr
        es = E.EvalSet((24.0,), (6.0,))
        acc = E.compute_metric("ACC", fc, tr, es, grid,
                               clim=zero_clim(grid, [30.0]))
        assert all(abs(r[4] + 1.0) < 1e-12 for r in acc.rows)

    def test_acc_needs_climatology(self, grid):
        rng = np.random.default_rng(13)
        fc, tr = self.rand_pair(grid, rng, nd=1, nl=1)
        with pytest.raises(ValueError, match="climatolog"):
            E.compute_metric("ACC", fc, tr, E.EvalSet((24.0,), (6.0,)), grid)

    def test_acc_rejects_overlapping_reference(self, grid):
        rng = np.random.default_rng(14)
        fc, tr = self.rand_pair(grid, rng, nd=1, nl=1)
        es = E.EvalSet((24.0,), (6.0,))
        clim = zero_clim(grid, [30.0])
        overlapping = E.Climatology(grid, clim.fields, 0.0, 100.0, 12)
        with pytest.raises(ValueError, match="disjoint"):
            E.compute_metric("ACC", fc, tr, es, grid, clim=overlapping)

    def test_unknown_kind_and_bad_shapes(self, grid):
        rng = np.random.default_rng(15)
        fc, tr = self.rand_pair(grid, rng, nd=1, nl=1)
        es = E.EvalSet((24.0,), (6.0,))
        with pytest.raises(ValueError, match="kind"):
            E.compute_metric("MAE", fc, tr, es, grid)
        with pytest.raises(ValueError, match="shape"):
            E.compute_metric("RMSE", fc[:, :, :3], tr, es, grid)
        with pytest.raises(ValueError, match="shape"):
            E.compute_metric("RMSE", fc, tr[:1], E.EvalSet((24.0, 30.0), (6.0,)),
                             grid)

    def test_whole_globe_region_is_bitwise_default(self, grid):
        rng = np.random.default_rng(16)
        fc, tr = self.rand_pair(grid, rng)
        es = E.EvalSet((24.0, 30.0, 36.0), (6.0, 12.0))
        for kind in ("RMSE", "MBE", "STD_ERROR"):
            a = E.compute_metric(kind, fc, tr, es, grid)
            b = E.compute_metric(kind, fc, tr, es, grid, region=E.WHOLE_GLOBE)
            assert a.region == b.region == "global"
            assert a.rows == b.rows

    def test_regional_restriction(self):
        grid = GridSpec(16, 32, (500, 850))
        tr = np.zeros((1, 1, ST.n_channels(grid), grid.n_lat, grid.n_lon))
        fc = tr.copy()
        box = E.CENTRAL_AFRICA
        mask = box.mask(grid)
        fc[0, 0, :, mask] += 1.0
        es = E.EvalSet((24.0,), (6.0,))
        inside = E.compute_metric("RMSE", fc, tr, es, grid, region=box)
        outside_box = E.RegionBox("pacific", -10.0, 10.0, -150.0, -120.0)
        outside = E.compute_metric("RMSE", fc, tr, es, grid, region=outside_box)
        glob = E.compute_metric("RMSE", fc, tr, es, grid)
        assert all(abs(r[4] - 1.0) < 1e-12 for r in inside.rows)
        assert all(r[4] == 0.0 for r in outside.rows)
        assert all(0.0 < r[4] < 1.0 for r in glob.rows)
        assert inside.region == "central-africa"


class TestRegionBox:
    def test_africa_analog_cells(self):
        grid = GridSpec(16, 32, (500,))
        mask = E.CENTRAL_AFRICA.mask(grid)
        rows = np.nonzero(mask.any(axis=1))[0]
        cols = np.nonzero(mask.any(axis=0))[0]
        assert np.all(np.abs(grid.lats[rows]) <= 10.0)
        assert np.all((grid.lons[cols] >= 15.0) & (grid.lons[cols] <= 35.0))
        assert mask.sum() == len(rows) * len(cols) > 0

    def test_wraparound_longitudes(self):
        grid = GridSpec(8, 16, (500,))
        box = E.RegionBox("dateline", -90.0, 90.0, 150.0, -150.0)
        mask = box.mask(grid)
        sel = grid.lons[mask.any(axis=0)]
        assert np.all((sel >= 150.0) | (sel <= -150.0))
        assert 0 < mask.sum() < mask.size

    def test_empty_intersection_rejected(self):
        grid = GridSpec(8, 16, (500,))
        box = E.RegionBox("nowhere", 1.0, 2.0, 3.0, 4.0)
        with pytest.raises(ValueError, match="nowhere"):
            box.mask(grid)

    def test_inverted_latitudes_rejected(self):
        with pytest.raises(ValueError, match="latitude"):
            E.RegionBox("bad", 10.0, -10.0, 0.0, 20.0)


class TestEvalSet:
    def test_uniform_ladder_enforced(self):
        E.EvalSet((24.0,), (6.0, 12.0, 18.0))
        E.EvalSet((24.0,), (0.0,))
        with pytest.raises(ValueError, match="uniform"):
            E.EvalSet((24.0,), (6.0, 12.0, 24.0))
        with pytest.raises(ValueError, match="lead"):
            E.EvalSet((24.0,), (-6.0,))
        with pytest.raises(ValueError, match="empty"):
            E.EvalSet((), (6.0,))

    def test_resolvable_against_run(self):
        grid = GridSpec(16, 32, (500,))
        params = W.desk_params(3, grid=grid)
        run = W.WorldRun.generate(params, 0.0, 48.0)
        es = E.EvalSet.against(run, (24.0, 30.0), (6.0, 12.0))
        assert es.valid_times() == [30.0, 36.0, 42.0]
        with pytest.raises(ValueError, match="beyond"):
            E.EvalSet.against(run, (24.0, 42.0), (6.0, 12.0))


@pytest.fixture(scope="module")
def clim_run():
    grid = GridSpec(16, 32, (500, 850))
    return W.WorldRun.generate(W.desk_params(17, grid=grid), 0.0, 600.0)


class TestClimatology:
    @pytest.fixture
    def run(self, clim_run):
        return clim_run

    def test_keying_means_repeat_days(self, run):
        clim = E.Climatology.from_run(run)
        want = (run.get_state(6.0).data + run.get_state(294.0).data
                + run.get_state(582.0).data) / 3.0
        np.testing.assert_allclose(clim.lookup(6.0), want, rtol=0, atol=1e-12)
        np.testing.assert_allclose(clim.lookup(294.0), clim.lookup(6.0),
                                   rtol=0, atol=0)

    def test_lookup_missing_key(self, run):
        clim = E.Climatology.from_run(run)
        with pytest.raises(KeyError):
            clim.lookup(3.0)

    def test_covers(self, run):
        clim = E.Climatology.from_run(run)
        assert clim.covers(300.0)
        assert not clim.covers(601.0)

    def test_fractional_year_rejected(self):
        grid = GridSpec(16, 32, (500,))
        params = W.desk_params(18, grid=grid, year_days=10.5)
        run = W.WorldRun.generate(params, 0.0, 48.0)
        with pytest.raises(ValueError, match="year"):
            E.Climatology.from_run(run)

    def test_restricted_span(self, run):
        clim = E.Climatology.from_run(run, span=(0.0, 48.0))
        assert clim.t_start == 0.0 and clim.t_end == 48.0
        assert clim.covers(30.0) and not clim.covers(100.0)
        np.testing.assert_array_equal(clim.lookup(6.0),
                                      run.get_state(6.0).data)
        with pytest.raises(KeyError):
            clim.lookup(78.0)

    def test_span_outside_run_rejected(self, run):
        with pytest.raises(ValueError, match="span"):
            E.Climatology.from_run(run, span=(0.0, 1e9))


class TestMetricSeries:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError, match="finite"):
            E.MetricSeries("m", "global",
                           [("t", 500, 6.0, "RMSE", float("nan"))])

    def test_value_lookup(self):
        s = E.MetricSeries("m", "global", [("t", 500, 6.0, "RMSE", 1.5),
                                           ("t", 850, 6.0, "RMSE", 2.5)])
        assert s.value("t", 850, 6.0) == 2.5
        with pytest.raises(KeyError):
            s.value("z", 500, 6.0)

    def test_csv_round_trip_and_determinism(self, tmp_path):
        rows = [("t", 500, 6.0, "RMSE", 1.25), ("t2m", 0, 12.0, "ACC", 0.875)]
        series = [E.MetricSeries("ctl", "global", rows),
                  E.MetricSeries("exp", "central-africa", rows)]
        p1 = tmp_path / "a.csv"
        p2 = tmp_path / "b.csv"
        E.write_metric_csv(p1, series)
        E.write_metric_csv(p2, series)
        assert p1.read_bytes() == p2.read_bytes()
        with open(p1, newline="") as f:
            got = list(csv.reader(f))
        assert got[0] == ["model", "region", "variable", "level",
                          "lead_hours", "metric", "value"]
        assert len(got) == 1 + 4
        assert got[1] == ["ctl", "global", "t", "500", "6.0", "RMSE", "1.25"]
        assert float(got[4][6]) == 0.875


class TestNormalizedDiff:
    def test_frozen_examples(self):
        assert abs(E.normalized_diff(1.1, 1.0, "RMSE") - 0.1) < 1e-12
        assert abs(E.normalized_diff(0.8, 0.6, "ACC") - 0.5) < 1e-12

    def test_equal_models(self):
        assert E.normalized_diff(0.4, 0.4, "RMSE") == 0.0
        assert E.normalized_diff(0.4, 0.4, "ACC") == 0.0

    def test_degenerate_baselines_rejected(self):
        with pytest.raises(ValueError, match="baseline"):
            E.normalized_diff(0.1, 0.0, "RMSE")
        with pytest.raises(ValueError, match="baseline"):
            E.normalized_diff(0.9, 1.0, "ACC")
        with pytest.raises(ValueError, match="kind"):
            E.normalized_diff(1.0, 1.0, "MBE")


class TestSkillfulLeadTime:
    def test_frozen_series(self):
        assert E.skillful_lead_time([0.9, 0.7, 0.61, 0.59, 0.5]) == 0.75

    def test_never_crossing_returns_horizon(self):
        assert E.skillful_lead_time([0.9, 0.8, 0.7, 0.65]) == 1.0

    def test_immediate_crossing(self):
        assert E.skillful_lead_time([0.5, 0.4]) == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            E.skillful_lead_time([])

    def test_custom_step(self):
        assert E.skillful_lead_time([0.9, 0.3], step_h=24.0) == 1.0


class TestGreatCircle:
    def test_hand_values(self):
        assert abs(E.great_circle_deg(0.0, 0.0, 0.0, 90.0) - 90.0) < 1e-9
        assert abs(E.great_circle_deg(90.0, 0.0, -90.0, 0.0) - 180.0) < 1e-9
        assert E.great_circle_deg(10.0, 20.0, 10.0, 20.0) == 0.0

    def test_symmetry(self):
        a = E.great_circle_deg(12.0, 34.0, -56.0, 78.0)
        b = E.great_circle_deg(-56.0, 78.0, 12.0, 34.0)
        assert a == b


@pytest.fixture(scope="module")
def oracle_grid():
    return GridSpec(8, 16, (500,))


class TestVarOracle:
    @pytest.fixture
    def grid(self, oracle_grid):
        return oracle_grid

    def single_ob(self, grid, sigma_b, sigma_o, innovation, k, length=20.0):
        n = grid.n_lat * grid.n_lon
        b = E.gaussian_b(grid, sigma_b, length)
        h = np.zeros((1, n))
        h[0, k] = 1.0
        xb = np.zeros(n)
        yo = np.array([innovation])
        return E.VarOracle(b, np.array([sigma_o ** 2]), h, xb, yo)

    def test_scalar_closed_form(self, grid):
        rng = np.random.default_rng(31)
        corr = E.gaussian_correlation(grid, 20.0)
        for _ in range(5):
            k = int(rng.integers(grid.n_lat * grid.n_lon))
            sb, so, d = rng.uniform(0.5, 3.0, size=3)
            inc = E.var3d_increment(self.single_ob(grid, sb, so, d, k))
            want = sb ** 2 * corr[:, k] * d / (sb ** 2 + so ** 2)
            assert np.max(np.abs(inc - want)) < 1e-10
            assert abs(inc[k] - sb ** 2 * d / (sb ** 2 + so ** 2)) < 1e-10

    def test_decay_follows_correlation_exactly(self, grid):
        k = 40
        corr = E.gaussian_correlation(grid, 15.0)
        inc = E.var3d_increment(self.single_ob(grid, 1.3, 0.8, 2.0, k,
                                               length=15.0))
        ratio = inc / inc[k]
        assert np.max(np.abs(ratio - corr[:, k])) < 1e-12

    def test_identity_b_touches_only_observed_cell(self, grid):
        n = grid.n_lat * grid.n_lon
        k = 17
        h = np.zeros((1, n))
        h[0, k] = 1.0
        oracle = E.VarOracle(1.5 ** 2 * np.eye(n), np.array([0.5]), h,
                             np.zeros(n), np.array([1.0]))
        inc = E.var3d_increment(oracle)
        assert inc[k] != 0.0
        mask = np.ones(n, dtype=bool)
        mask[k] = False
        assert np.all(inc[mask] == 0.0)

    def test_huge_observation_error_ignores_observation(self, grid):
        inc = E.var3d_increment(self.single_ob(grid, 1.0, 1e15, 3.0, 5))
        assert np.max(np.abs(inc)) < 1e-20

    def test_monotone_decay_with_distance(self, grid):
        k = 52
        ki, kj = divmod(k, grid.n_lon)
        inc = np.abs(E.var3d_increment(self.single_ob(grid, 1.0, 1.0, 2.0, k)))
        d = E.great_circle_deg(grid.lats[ki], grid.lons[kj],
                               grid.lats[:, None], grid.lons[None, :]).ravel()
        order = np.argsort(d, kind="stable")
        assert np.all(np.diff(inc[order]) <= 1e-12)

    def test_singular_innovation_covariance_rejected(self, grid):
        n = grid.n_lat * grid.n_lon
        h = np.zeros((2, n))
        h[0, 3] = 1.0
        h[1, 3] = 1.0
        oracle = E.VarOracle(E.gaussian_b(grid, 1.0, 20.0),
                             np.zeros(2), h, np.zeros(n), np.ones(2))
        with pytest.raises(ValueError, match="singular"):
            E.var3d_increment(oracle)

    def test_validation(self, grid):
        n = grid.n_lat * grid.n_lon
        b = E.gaussian_b(grid, 1.0, 20.0)
        h = np.zeros((1, n))
        h[0, 0] = 1.0
        bad = b.copy()
        bad[0, 1] += 1.0
        with pytest.raises(ValueError, match="symmetric"):
            E.VarOracle(bad, np.ones(1), h, np.zeros(n), np.ones(1))
        with pytest.raises(ValueError, match="negative"):
            E.VarOracle(b, np.array([-1.0]), h, np.zeros(n), np.ones(1))
        with pytest.raises(ValueError, match="shape"):
            E.VarOracle(b, np.ones(2), h, np.zeros(n), np.ones(1))


class TestWeightingPeak:
    def test_hand_built_instrument(self):
        grid = GridSpec(16, 32, (300, 500, 800))
        inst = S.InstrumentSpec(
            inst_id="probe",
            orbit=S.OrbitSpec(lst_hours=6.0, period_min=100.0, phase0=0.0),
            channels=(S.ChannelSpec("t", 1, 0.6, 0.0),),
            swath_half_width=3, scan_max_deg=40.0, noise_k=0.1,
            bias_b0=0.0, bias_b1=0.0)
        assert E.weighting_peak_level(inst, grid, "t") == 500

    def test_missing_target_rejected(self):
        grid = GridSpec(16, 32, (300, 500, 800))
        em = S.desk_instruments(grid)[0]
        with pytest.raises(ValueError, match="r"):
            E.weighting_peak_level(em, grid, "r")


@pytest.fixture(scope="module")
def rig():
    """Small cycling rig shared by the experiment tests."""
    grid = GridSpec(16, 32, (400, 800))
    params = W.desk_params(21, grid=grid)
    run = W.WorldRun.generate(params, 0.0, 96.0)
    instruments = S.desk_instruments(grid)[:2]
    pp = OP.ObsProcParams()
    tables = {inst.inst_id: [S.simulate_hour_block(inst, run, h, None)
                             for h in range(21, 37)]
              for inst in instruments}
    stats = OP.compute_norm_stats(tables, {i.inst_id: i for i in instruments},
                                  pp)
    cfg = D.DaNetConfig(grid=grid,
                        instruments=tuple((i.inst_id, len(i.channels))
                                          for i in instruments),
                        ro=None, c1=2, c2=4)
    net = D.DaNet(cfg, seed=5)
    rng = np.random.default_rng(6)
    wname = "head.out.w"
    net.params[wname].data[:] = 0.01 * rng.standard_normal(
        net.params[wname].data.shape)
    norm = StateNorm.from_samples([run.get_state(t)
                                   for t in (0.0, 24.0, 48.0, 72.0)])
    fcfg = F.FcConfig(grid=grid, width=6, n_blocks=1,
                      year_days=params.year_days)
    cascade = F.CascadeConfig(short=F.FcModel(fcfg, seed=8),
                              medium=F.FcModel(fcfg, seed=9), k_handoff=4)
    source = C.ObsSource(run, instruments, None, pp, None, stats)
    return {"grid": grid, "run": run, "instruments": instruments,
            "pp": pp, "stats": stats, "net": net, "norm": norm,
            "cascade": cascade, "source": source}


class TestSingleObsTest:
    def covered_cell(self, rig, inst_id):
        gridded, _ = rig["source"].window(24.0)
        occ = gridded[inst_id].mask.any(axis=0)
        i, j = np.argwhere(occ)[0]
        return float(rig["grid"].lats[i]), float(rig["grid"].lons[j])

    def test_zero_magnitude_zero_increment(self, rig):
        lat, lon = self.covered_cell(rig, "em_tsound")
        state = C.cold_start(rig["grid"], 24.0)
        pert = E.ObsPerturbation("em_tsound", 0, lat, lon, 0.0)
        inc = E.single_obs_test(state, rig["source"], rig["net"],
                                rig["norm"], pert)
        assert np.all(inc.data == 0.0)

    def test_perturbation_moves_analysis(self, rig):
        lat, lon = self.covered_cell(rig, "em_tsound")
        state = C.cold_start(rig["grid"], 24.0)
        pert = E.ObsPerturbation("em_tsound", 0, lat, lon, 5.0)
        inc = E.single_obs_test(state, rig["source"], rig["net"],
                                rig["norm"], pert)
        assert inc.time_h == 24.0
        assert np.any(inc.data != 0.0)
        r = E.energy_radius(inc, lat, lon)
        assert np.isfinite(r) and r >= 0.0

    def test_uncovered_patch_is_inert(self, rig):
        gridded, _ = rig["source"].window(24.0)
        occ = gridded["em_tsound"].mask.any(axis=0)
        i, j = np.argwhere(~occ)[0]
        state = C.cold_start(rig["grid"], 24.0)
        pert = E.ObsPerturbation("em_tsound", 0, float(rig["grid"].lats[i]),
                                 float(rig["grid"].lons[j]), 5.0, patch=1)
        inc = E.single_obs_test(state, rig["source"], rig["net"],
                                rig["norm"], pert)
        assert np.all(inc.data == 0.0)

    def test_bad_channel_and_instrument(self, rig):
        state = C.cold_start(rig["grid"], 24.0)
        with pytest.raises(ValueError, match="channel"):
            E.single_obs_test(state, rig["source"], rig["net"], rig["norm"],
                              E.ObsPerturbation("em_tsound", 99, 0.0, 0.0, 5.0))
        with pytest.raises(ValueError, match="instrument"):
            E.single_obs_test(state, rig["source"], rig["net"], rig["norm"],
                              E.ObsPerturbation("nope", 0, 0.0, 0.0, 5.0))
        with pytest.raises(ValueError, match="patch"):
            E.ObsPerturbation("em_tsound", 0, 0.0, 0.0, 5.0, patch=2)


class TestEnergyRadius:
    def test_point_increment_zero_radius(self):
        grid = GridSpec(16, 32, (400, 800))
        cube = StateCube.zeros(grid, 0.0)
        i, j = grid.cell_of(5.0, 20.0)
        cube.data[3, int(i), int(j)] = 2.0
        lat, lon = float(grid.lats[int(i)]), float(grid.lons[int(j)])
        assert E.energy_radius(cube, lat, lon) == 0.0

    def test_two_cell_split(self):
        grid = GridSpec(16, 32, (400, 800))
        cube = StateCube.zeros(grid, 0.0)
        i, j = grid.cell_of(5.0, 20.0)
        i2, j2 = grid.cell_of(5.0, 120.0)
        cube.data[0, int(i), int(j)] = np.sqrt(0.97)
        cube.data[0, int(i2), int(j2)] = np.sqrt(0.03)
        lat, lon = float(grid.lats[int(i)]), float(grid.lons[int(j)])
        far = E.great_circle_deg(lat, lon, float(grid.lats[int(i2)]),
                                 float(grid.lons[int(j2)]))
        assert E.energy_radius(cube, lat, lon) == pytest.approx(far)
        assert E.energy_radius(cube, lat, lon, frac=0.9) == 0.0

    def test_zero_field(self):
        grid = GridSpec(16, 32, (400, 800))
        cube = StateCube.zeros(grid, 0.0)
        assert E.energy_radius(cube, 0.0, 0.0) == 0.0


@pytest.fixture(scope="module")
def denial_control(rig):
    state0 = C.cold_start(rig["grid"], 24.0)
    _, analyses, _ = C.run_cycles(state0, 10, rig["source"], rig["net"],
                                  rig["cascade"], rig["norm"])
    return E.ControlRun(state0, analyses)


class TestDenial:
    @pytest.fixture
    def control(self, denial_control):
        return denial_control

    def test_denying_nothing_is_exact_zero(self, rig, control):
        for protocol in E.DENIAL_PROTOCOLS:
            series = E.denial_experiment(protocol, None, control,
                                         rig["source"], rig["net"],
                                         rig["cascade"], rig["norm"])
            assert all(r[4] == 0.0 for r in series.rows)
            assert all(r[3] == "RMSE_PCT_CHANGE" for r in series.rows)

    def test_denial_output_shape_and_effect(self, rig, control):
        series = E.denial_experiment("fixed-background", "em_tsound", control,
                                     rig["source"], rig["net"],
                                     rig["cascade"], rig["norm"])
        assert len(series.rows) == ST.n_channels(rig["grid"])
        assert "em_tsound" in series.model and "fixed-background" in series.model
        assert any(r[4] != 0.0 for r in series.rows)

    def test_unknown_instrument_rejected(self, rig, control):
        with pytest.raises(ValueError, match="unknown instrument"):
            E.denial_experiment("fully-cycled", "zz_sound", control,
                                rig["source"], rig["net"], rig["cascade"],
                                rig["norm"])
        with pytest.raises(ValueError, match="protocol"):
            E.denial_experiment("protocol-c", None, control, rig["source"],
                                rig["net"], rig["cascade"], rig["norm"])

    def test_needs_post_spinup_cycles(self, rig):
        state0 = C.cold_start(rig["grid"], 24.0)
        _, analyses, _ = C.run_cycles(state0, 4, rig["source"], rig["net"],
                                      rig["cascade"], rig["norm"])
        short = E.ControlRun(state0, analyses)
        with pytest.raises(ValueError, match="spin-up"):
            E.denial_experiment("fixed-background", None, short, rig["source"],
                                rig["net"], rig["cascade"], rig["norm"])


class TestAblation:
    def test_setting_flags_matrix(self):
        assert E.ABLATION_SETTINGS == {
            1: {"incremental": True, "finetune": True},
            2: {"incremental": False, "finetune": True},
            3: {"incremental": True, "finetune": False},
            4: {"incremental": False, "finetune": False},
        }

    def test_runner_calls_and_shape(self):
        calls = []

        def run_setting(incremental, finetune):
            calls.append((incremental, finetune))
            rows = [(v, 500, lead, "RMSE", 1.0 + len(calls))
                    for v in ("t", "r") for lead in (0.0, 6.0)]
            return E.MetricSeries(f"setting-{len(calls)}", "global", rows)

        out = E.ablation_matrix(run_setting)
        assert sorted(out) == [1, 2, 3, 4]
        assert calls == [(True, True), (False, True), (True, False),
                         (False, False)]
        assert sum(len(s.rows) for s in out.values()) == 4 * 2 * 2

    def test_inconsistent_rows_rejected(self):
        def run_setting(incremental, finetune):
            rows = [("t", 500, 0.0, "RMSE", 1.0)]
            if incremental:
                rows.append(("r", 500, 0.0, "RMSE", 1.0))
            return E.MetricSeries("x", "global", rows)

        with pytest.raises(ValueError, match="rows"):
            E.ablation_matrix(run_setting)

    def test_unknown_setting_rejected(self):
        with pytest.raises(ValueError, match="setting"):
            E.ablation_matrix(lambda incremental, finetune: None,
                              settings=(5,))
