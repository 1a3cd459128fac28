import csv
import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from denscoint.errors import ConfigError, FormatError, PipelineError
from denscoint.grid_space import integrate
from denscoint.logdensity import CrossSection
from denscoint.pipeline import (
    PipelineConfig,
    deflate,
    emit_outputs,
    ingest,
    percentile_truncate,
    read_deflator,
    read_matrix,
    run_pipeline,
    shared_grid,
    split_periods,
)
from denscoint.simulate import RngSeed, paper_ar1_config, sample_panel, simulate_arp, stationary_config


def write_samples(path, t, x, w=None):
    cols = [t, x] if w is None else [t, x, w]
    header = "t,x" if w is None else "t,x,w"
    fmt = ["%d"] + ["%.17g"] * (len(cols) - 1)
    np.savetxt(path, np.column_stack(cols), delimiter=",", fmt=fmt, header=header, comments="")


@pytest.fixture(scope="module")
def panel():
    dens = simulate_arp(paper_ar1_config(T=30, grid=None), RngSeed(8))
    return sample_panel(dens, 1500, RngSeed(8, 1))


@pytest.fixture(scope="module")
def report(panel):
    cfg = PipelineConfig(bandwidth="rule", R_max=3, seed=4)
    return run_pipeline(cfg, split_periods(*panel))


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [
            {"lower": 50, "upper": 40},
            {"upper": 101},
            {"level": 0.2},
            {"cv": "table"},
            {"bandwidth": "wide"},
            {"bandwidth": -1.0},
            {"R_max": 0},
            {"grid_rule": "median"},
            {"grid_lower": 0.0},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            PipelineConfig(**kw)

    def test_numeric_bandwidth_string(self):
        assert PipelineConfig(bandwidth="0.5").bandwidth == 0.5

    def test_json_round_trip(self, tmp_path):
        cfg = PipelineConfig(level=0.1, c=2.0)
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg.to_dict()))
        assert PipelineConfig.from_json(p) == cfg

    def test_unknown_field(self):
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict({"alpha": 1})


class TestIngest:
    def test_counts(self, tmp_path):
        t = np.repeat([1, 2, 3], [10, 20, 30])
        write_samples(tmp_path / "s.csv", t, np.arange(60.0))
        secs = ingest(tmp_path / "s.csv")
        assert [cs.n for cs in secs] == [10, 20, 30]
        assert [cs.t for cs in secs] == [1, 2, 3]
        assert np.all(secs[0].w == 1)

    def test_weights_renormalized(self, tmp_path):
        t = np.repeat([0, 1], 5)
        write_samples(tmp_path / "s.csv", t, np.arange(10.0), np.full(10, 2.0))
        for cs in ingest(tmp_path / "s.csv"):
            assert cs.w.sum() == pytest.approx(cs.n, abs=1e-8)

    def test_missing_column(self, tmp_path):
        (tmp_path / "s.csv").write_text("t,y\n1,2\n")
        with pytest.raises(FormatError, match="'x'"):
            ingest(tmp_path / "s.csv")

    def test_bad_weight(self, tmp_path):
        write_samples(tmp_path / "s.csv", np.array([1, 1]), np.array([0.0, 1.0]), np.array([1.0, 0.0]))
        with pytest.raises(FormatError):
            ingest(tmp_path / "s.csv")

    def test_empty_period(self, tmp_path):
        write_samples(tmp_path / "s.csv", np.array([1, 1, 3]), np.arange(3.0))
        with pytest.raises(FormatError, match="contiguous"):
            ingest(tmp_path / "s.csv")

    def test_malformed(self, tmp_path):
        (tmp_path / "s.csv").write_text("t,x\n1,abc\n")
        with pytest.raises(FormatError):
            ingest(tmp_path / "s.csv")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError):
            ingest(tmp_path / "none.csv")


class TestDeflate:
    secs = [CrossSection([1.0, 2.0], t=1), CrossSection([3.0, 4.0], t=2)]

    def test_unit_index(self):
        out = deflate(self.secs, {1: 1.0, 2: 1.0})
        assert_allclose(out[1].x, [3.0, 4.0])

    def test_halved(self):
        out = deflate(self.secs, {1: 100.0, 2: 200.0})
        assert_allclose(out[1].x, [1.5, 2.0])

    def test_cpi_path(self, tmp_path):
        (tmp_path / "cpi.csv").write_text("t,index\n1,130.7\n2,134.2\n")
        out = deflate(self.secs, read_deflator(tmp_path / "cpi.csv"), base=2)
        assert_allclose(out[0].x, [1.0 * 134.2 / 130.7, 2.0 * 134.2 / 130.7])
        assert_allclose(out[1].x, [3.0, 4.0])

    def test_missing_period(self):
        with pytest.raises(FormatError, match="period 2"):
            deflate(self.secs, {1: 1.0})

    def test_bad_index(self, tmp_path):
        (tmp_path / "cpi.csv").write_text("t,index\n1,0\n")
        with pytest.raises(FormatError):
            read_deflator(tmp_path / "cpi.csv")


class TestTruncate:
    def test_full_band(self, rng):
        cs = CrossSection(rng.normal(size=100))
        assert_allclose(percentile_truncate(cs, 0, 100).x, cs.x)

    def test_count(self, rng):
        cs = CrossSection(rng.normal(size=1000))
        assert abs(percentile_truncate(cs, 2.5, 97.5).n - 950) <= 1

    def test_outlier(self, rng):
        cs = CrossSection(np.append(rng.normal(size=200), 1e6))
        assert percentile_truncate(cs, 2.5, 97.5).x.max() < 1e6

    def test_weights_renormalized(self, rng):
        cs = CrossSection(rng.normal(size=300), rng.uniform(1, 4, 300))
        out = percentile_truncate(cs, 5, 95)
        assert out.w.sum() == pytest.approx(out.n)

    def test_closed_band_keeps_ties(self):
        cs = CrossSection([1.0, 2.0, 2.0, 2.0, 3.0])
        assert 2.0 in percentile_truncate(cs, 40, 60).x

    def test_invalid(self):
        with pytest.raises(ConfigError):
            percentile_truncate(CrossSection([1.0]), 10, 5)


class TestSharedGrid:
    secs = [CrossSection(np.linspace(-2, 1, 50), t=1), CrossSection(np.linspace(-1, 3, 50), t=2)]

    def test_common(self):
        g = shared_grid(self.secs, n=101)
        assert (g.lower, g.upper, g.n) == (-1.0, 1.0, 101)

    def test_pooled(self):
        g = shared_grid(self.secs, 0, 100, n=51, rule="pooled")
        assert g.lower == pytest.approx(-2.05)
        assert g.upper == pytest.approx(3.05)

    def test_disjoint(self):
        with pytest.raises(FormatError):
            shared_grid([CrossSection([0.0, 1.0]), CrossSection([2.0, 3.0])])


class TestRun:
    def test_report_contents(self, report):
        assert report.densities.shape == (30, 601)
        assert_allclose(report.densities @ report.grid.weights, 1.0, atol=1e-10)
        assert np.all(report.densities > 0)
        assert_allclose(report.clr @ report.grid.weights, 0.0, atol=1e-10)
        assert report.r_hat in (0, 1, 2, 3)
        assert report.attractor_basis.shape == (report.r_hat, 601)
        assert len(report.periods) == 30
        assert len(report.scree) == 25

    def test_deterministic(self, panel, report):
        again = run_pipeline(PipelineConfig(bandwidth="rule", R_max=3, seed=4), split_periods(*panel))
        assert json.dumps(again.to_dict()) == json.dumps(report.to_dict())

    def test_stage_error(self, panel):
        t, x = panel
        t = np.append(t, [31] * 5)
        x = np.append(x, np.linspace(-0.5, 0.5, 5))
        with pytest.raises(PipelineError) as err:
            run_pipeline(PipelineConfig(bandwidth="rule"), split_periods(t, x))
        assert err.value.stage == "estimate" and err.value.period == 31
        assert err.value.exit_code == 2

    def test_too_few_periods(self):
        with pytest.raises(PipelineError) as err:
            run_pipeline(PipelineConfig(), [CrossSection([0.0, 1.0])])
        assert err.value.stage == "ingest"

    def test_simulated_cv_seeded(self, panel):
        cfg = PipelineConfig(bandwidth="rule", R_max=2, cv="simulate", cv_paths=1000, cv_steps=200, seed=9)
        a = run_pipeline(cfg, split_periods(*panel))
        b = run_pipeline(cfg, split_periods(*panel))
        assert a.critical_values == b.critical_values
        assert a.critical_values["provenance"].startswith("simulated")

    def test_builtin_needs_demeaned(self, panel):
        with pytest.raises(PipelineError) as err:
            run_pipeline(PipelineConfig(bandwidth="rule", demeaned=False), split_periods(*panel))
        assert err.value.stage == "critical values"

    def test_stationary_majority_zero(self):
        hits = 0
        for rep in range(5):
            dens = simulate_arp(stationary_config(T=200), RngSeed(300 + rep))
            secs = split_periods(*sample_panel(dens, 2000, RngSeed(300 + rep, 1)))
            hits += run_pipeline(PipelineConfig(bandwidth="rule", R_max=3), secs).r_hat == 0
        assert hits >= 3


class TestOutputs:
    def test_files(self, report, tmp_path):
        paths = emit_outputs(report, tmp_path / "out")
        assert all(p.exists() for p in paths.values())
        with open(paths["scree"]) as fh:
            assert len(list(csv.reader(fh))) - 1 == len(report.scree)
        grid, D = read_matrix(paths["density_matrix"])
        assert grid == report.grid
        assert_allclose(D, report.densities, rtol=1e-15)

    def test_json_round_trip(self, report, tmp_path):
        paths = emit_outputs(report, tmp_path)
        assert json.loads(paths["report"].read_text()) == json.loads(json.dumps(report.to_dict()))
        assert json.loads(paths["report"].read_text())["schema_version"] == "1.0"

    def test_perturbations_integrate(self, report, tmp_path):
        paths = emit_outputs(report, tmp_path)
        with open(paths["perturbations"]) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["x", "mean", "plus", "minus"]
        cols = np.array(rows[1:], dtype=float)
        for j in (1, 2, 3):
            assert integrate(cols[:, j], report.grid) == pytest.approx(1.0, abs=1e-8)

    def test_unwritable(self, report, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(PipelineError) as err:
            emit_outputs(report, blocker / "sub")
        assert err.value.stage == "output"
