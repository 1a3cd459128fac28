"""End-to-end analysis of repeated cross-sections.

The workflow is ingest, deflate, truncate, estimate one log-density per
period on a shared grid, then FPCA and the sequential rank test.  Reports
and plot-ready tables are written by :func:`emit_outputs`.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DenscointError, FormatError, PipelineError
from .fpca import ClrSeries, estimate_attractor, perturbation_curves
from .grid_space import ClrFunction, Grid, clr_inv
from .logdensity import (
    MESH,
    CrossSection,
    default_bandwidth,
    estimate_logdensity,
    select_bandwidth,
    weighted_percentile,
)
from .rank_test import LEVELS, CriticalValueTable, sequential_rank, simulate_critical_values

SCHEMA_VERSION = "1.0"
GRID_PAD = 0.01
# stream key for critical values simulated inside the pipeline
PIPELINE_CV_STREAM = 11


@dataclass
class PipelineConfig:
    """Settings of one pipeline run.

    ``bandwidth`` is ``"auto"`` (GBIC search), ``"rule"`` (the percentile
    rule) or a positive number.  ``grid_rule`` picks the shared grid (see
    :func:`shared_grid`); ``grid_lower``/``grid_upper`` override it.  ``cv`` is ``"builtin"`` or ``"simulate"``.
    """

    input: str | None = None
    deflator: str | None = None
    deflator_base: int | None = None
    lower: float = 2.5
    upper: float = 97.5
    grid_n: int = 601
    grid_rule: str = "common"
    grid_lower: float | None = None
    grid_upper: float | None = None
    mesh: int = MESH
    bandwidth: str | float = "auto"
    R_max: int = 5
    level: float = 0.05
    cv: str = "builtin"
    cv_paths: int = 20_000
    cv_steps: int = 1000
    demeaned: bool = True
    k: int = 25
    c: float = 1.0
    seed: int = 0
    threads: int = 1
    outdir: str | None = None

    def __post_init__(self):
        if not 0 <= self.lower < self.upper <= 100:
            raise ConfigError(f"need 0 <= lower < upper <= 100, got {self.lower}, {self.upper}")
        if not any(abs(self.level - lv) < 1e-12 for lv in LEVELS):
            raise ConfigError(f"level must be one of {LEVELS}, got {self.level}")
        if self.cv not in ("builtin", "simulate"):
            raise ConfigError(f"cv must be 'builtin' or 'simulate', got {self.cv!r}")
        if isinstance(self.bandwidth, str) and self.bandwidth not in ("auto", "rule"):
            try:
                self.bandwidth = float(self.bandwidth)
            except ValueError:
                raise ConfigError(f"bandwidth must be 'auto', 'rule' or a number, got {self.bandwidth!r}") from None
        if not isinstance(self.bandwidth, str) and not self.bandwidth > 0:
            raise ConfigError(f"bandwidth must be positive, got {self.bandwidth}")
        if self.R_max < 1 or self.k < self.R_max:
            raise ConfigError("need 1 <= R_max <= k")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if self.grid_rule not in ("common", "pooled"):
            raise ConfigError(f"grid_rule must be 'common' or 'pooled', got {self.grid_rule!r}")
        if (self.grid_lower is None) != (self.grid_upper is None):
            raise ConfigError("give both grid_lower and grid_upper or neither")

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        if not isinstance(d, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)


# --- preprocessing -----------------------------------------------------------


def _read_csv(path) -> tuple[list, list]:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader, [])]
            rows = [r for r in reader if r and any(c.strip() for c in r)]
    except OSError as err:
        raise FormatError(f"cannot read {path}: {err}") from err
    return header, rows


def ingest(path) -> list:
    """Read a CSV with columns ``t,x[,w]`` into one CrossSection per period.

    Periods must be contiguous integers.  Missing ``w`` means unit weights.
    """
    header, rows = _read_csv(path)
    for col in ("t", "x"):
        if col not in header:
            raise FormatError(f"{path}: missing column {col!r} (have {header})")
    it, ix = header.index("t"), header.index("x")
    iw = header.index("w") if "w" in header else None
    try:
        t = np.array([int(r[it]) for r in rows])
        x = np.array([float(r[ix]) for r in rows])
        w = np.array([float(r[iw]) for r in rows]) if iw is not None else np.ones(len(rows))
    except (ValueError, IndexError) as err:
        raise FormatError(f"{path}: malformed row: {err}") from err
    if t.size == 0:
        raise FormatError(f"{path}: no observations")
    return split_periods(t, x, w)


def split_periods(t, x, w=None) -> list:
    """Group observations by integer period; periods must be contiguous."""
    t = np.asarray(t)
    x = np.asarray(x, dtype=float)
    w = np.ones(x.size) if w is None else np.asarray(w, dtype=float)
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise FormatError("weights must be positive and finite")
    periods = np.unique(t)
    missing = sorted(set(range(int(periods[0]), int(periods[-1]) + 1)) - set(periods.tolist()))
    if missing:
        raise FormatError(f"periods must be contiguous; empty periods {missing[:10]}")
    order = np.argsort(t, kind="stable")
    t, x, w = t[order], x[order], w[order]
    cuts = np.searchsorted(t, periods, side="left").tolist() + [t.size]
    return [CrossSection(x[a:b], w[a:b], int(p)) for p, a, b in zip(periods, cuts[:-1], cuts[1:])]


def read_deflator(path) -> dict:
    """Read a CSV with columns ``t,index`` into ``{t: index}``."""
    header, rows = _read_csv(path)
    if "t" not in header or "index" not in header:
        raise FormatError(f"{path}: deflator needs columns 't' and 'index' (have {header})")
    it, ii = header.index("t"), header.index("index")
    try:
        out = {int(r[it]): float(r[ii]) for r in rows}
    except (ValueError, IndexError) as err:
        raise FormatError(f"{path}: malformed row: {err}") from err
    if any(not v > 0 for v in out.values()):
        raise FormatError(f"{path}: index values must be positive")
    return out


def deflate(sections: Sequence[CrossSection], deflator: Mapping[int, float], base: int | None = None) -> list:
    """Express values in base-period prices, ``x · index[base] / index[t]``.

    ``base`` defaults to the first period.  Periods are matched exactly.
    """
    base = sections[0].t if base is None else int(base)
    for key in [base] + [cs.t for cs in sections]:
        if key not in deflator:
            raise FormatError(f"deflator has no entry for period {key}")
    b = deflator[base]
    return [CrossSection(cs.x * (b / deflator[cs.t]), cs.w, cs.t) for cs in sections]


def percentile_truncate(cs: CrossSection, lower: float, upper: float) -> CrossSection:
    """Keep observations inside the closed weighted percentile band.

    Values equal to a cut point are kept.  Weights are renormalized to sum
    to the new count.
    """
    if not 0 <= lower < upper <= 100:
        raise ConfigError(f"need 0 <= lower < upper <= 100, got {lower}, {upper}")
    lo = cs.x[0] if lower == 0 else weighted_percentile(cs.x, cs.w, lower)
    hi = cs.x[-1] if upper == 100 else weighted_percentile(cs.x, cs.w, upper)
    keep = (cs.x >= lo) & (cs.x <= hi)
    if not keep.any():
        raise FormatError(f"period {cs.t}: truncation band [{lower}, {upper}] keeps no observations")
    return CrossSection(cs.x[keep], cs.w[keep], cs.t)


def shared_grid(
    sections: Sequence[CrossSection],
    lower: float = 2.5,
    upper: float = 97.5,
    n: int = 601,
    pad: float = GRID_PAD,
    rule: str = "common",
) -> Grid:
    """Analysis grid shared by all periods.

    ``rule="common"`` takes the intersection of the per-period data ranges,
    so no period is trimmed inside the grid.  ``rule="pooled"`` takes the
    weighted ``[lower, upper]`` percentile band of the pooled data, widened
    on each side by ``pad`` times its width.
    """
    if rule == "common":
        lo = max(cs.x[0] for cs in sections)
        hi = min(cs.x[-1] for cs in sections)
        if not hi > lo:
            raise FormatError("period data ranges do not overlap")
        return Grid(lo, hi, n)
    if rule != "pooled":
        raise ConfigError(f"grid rule must be 'common' or 'pooled', got {rule!r}")
    x = np.concatenate([cs.x for cs in sections])
    w = np.concatenate([cs.w for cs in sections])
    lo, hi = weighted_percentile(x, w, [lower, upper])
    if not hi > lo:
        raise FormatError("pooled data have no spread")
    width = hi - lo
    return Grid(lo - pad * width, hi + pad * width, n)


def restrict(cs: CrossSection, grid: Grid) -> CrossSection:
    """Observations of ``cs`` inside the grid interval."""
    keep = (cs.x >= grid.lower) & (cs.x <= grid.upper)
    if not keep.any():
        raise FormatError(f"period {cs.t} has no observations inside the grid interval")
    return CrossSection(cs.x[keep], cs.w[keep], cs.t)


# --- run ---------------------------------------------------------------------


@dataclass
class PipelineReport:
    config: dict
    grid: Grid
    periods: list
    densities: np.ndarray = field(repr=False)
    clr: np.ndarray = field(repr=False)
    scree: np.ndarray
    rank: dict
    r_hat: int
    attractor_basis: np.ndarray = field(repr=False)
    stationary_mean: np.ndarray = field(repr=False)
    plus: np.ndarray = field(repr=False)
    minus: np.ndarray = field(repr=False)
    critical_values: dict
    schema_version: str = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "config": self.config,
            "grid": self.grid.to_dict(),
            "periods": self.periods,
            "scree": [float(z) for z in self.scree],
            "rank_test": self.rank,
            "r_hat": int(self.r_hat),
            "critical_values": self.critical_values,
            "files": dict(OUTPUT_FILES),
        }


OUTPUT_FILES = {
    "density_matrix": "density_matrix.csv",
    "clr_matrix": "clr_matrix.csv",
    "scree": "scree.csv",
    "tau_table": "tau_table.csv",
    "attractor_basis": "attractor_basis.csv",
    "perturbations": "perturbations.csv",
    "report": "report.json",
}


def _estimate_one(cs: CrossSection, grid: Grid, cfg: PipelineConfig):
    if cfg.bandwidth == "auto":
        choice = select_bandwidth(cs, grid, mesh=cfg.mesh)
        h, base = choice.h, choice.base
    else:
        base = default_bandwidth(cs)
        h = base if cfg.bandwidth == "rule" else float(cfg.bandwidth)
    est = estimate_logdensity(cs, grid, h, mesh=cfg.mesh)
    summary = {
        "t": cs.t,
        "n": cs.n,
        "min": float(cs.x[0]),
        "max": float(cs.x[-1]),
        "bandwidth": float(h),
        "rule_bandwidth": float(base),
    }
    return est, summary


def _critical_values(cfg: PipelineConfig) -> CriticalValueTable | None:
    if cfg.cv == "builtin":
        if not cfg.demeaned or cfg.R_max > 7:
            raise ConfigError("the built-in table covers the demeaned variant with R_max <= 7; use cv='simulate'")
        return CriticalValueTable.builtin()
    seed = int(np.random.SeedSequence(cfg.seed, spawn_key=(PIPELINE_CV_STREAM,)).generate_state(1)[0])
    return simulate_critical_values(
        range(1, cfg.R_max + 1), cfg.cv_paths, cfg.cv_steps, cfg.demeaned, seed, cfg.threads
    )


def _stage(name, fn, *args, period=None):
    try:
        return fn(*args)
    except PipelineError:
        raise
    except DenscointError as err:
        raise PipelineError(name, err, period) from err


def run_pipeline(cfg: PipelineConfig, sections: Sequence[CrossSection] | None = None) -> PipelineReport:
    """Run every stage and return the report.

    ``sections`` replaces reading ``cfg.input``.  Errors are re-raised as
    :class:`PipelineError` naming the stage and, where relevant, the period.
    Critical values simulated here use the stream derived from ``cfg.seed``
    with spawn key ``(11,)``.
    """
    if sections is None:
        if cfg.input is None:
            raise PipelineError("ingest", ConfigError("no input file given"))
        sections = _stage("ingest", ingest, cfg.input)
    sections = list(sections)
    if len(sections) < 3:
        raise PipelineError("ingest", FormatError(f"need at least 3 periods, got {len(sections)}"))
    if cfg.deflator is not None:
        table = _stage("deflate", read_deflator, cfg.deflator)
        sections = _stage("deflate", deflate, sections, table, cfg.deflator_base)
    sections = [_stage("truncate", percentile_truncate, cs, cfg.lower, cfg.upper, period=cs.t) for cs in sections]
    if cfg.grid_lower is not None:
        grid = _stage("grid", Grid, cfg.grid_lower, cfg.grid_upper, cfg.grid_n)
    else:
        grid = _stage("grid", shared_grid, sections, cfg.lower, cfg.upper, cfg.grid_n, GRID_PAD, cfg.grid_rule)
    sections = [_stage("grid", restrict, cs, grid, period=cs.t) for cs in sections]

    def job(cs):
        return _stage("estimate", _estimate_one, cs, grid, cfg, period=cs.t)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            fits = list(pool.map(job, sections))
    else:
        fits = [job(cs) for cs in sections]
    dens = np.array([est.density.values for est, _ in fits])
    if np.any(dens <= 0):
        bad = int(np.nonzero((dens <= 0).any(axis=1))[0][0])
        raise PipelineError("estimate", FormatError("estimated density is not positive on the grid"), sections[bad].t)
    S = ClrSeries(grid, np.array([est.clr.values for est, _ in fits]))

    table = _stage("critical values", _critical_values, cfg)
    k = min(cfg.k, grid.n - 1)
    rep = _stage("rank test", sequential_rank, S, cfg.R_max, cfg.level, table, cfg.demeaned, k)
    r_hat = rep.r_hat

    def attractor():
        # leading pair for the perturbations; the attractor holds the first r̂ directions
        A = estimate_attractor(S, max(r_hat, 1), k, demean=cfg.demeaned)
        lead = A.basis[0]
        P_C = A.cointegrating_projector if r_hat > 0 else None
        m = S.mean().values
        if P_C is not None:
            m = P_C.matrix @ m
        fbar = clr_inv(ClrFunction.centered(grid, m))
        plus, minus = perturbation_curves(fbar, A.eigensystem.eigenvalues[0], lead, cfg.c)
        basis = A.basis.matrix[:r_hat]
        return basis, fbar.values, plus.values, minus.values

    basis, fbar, plus, minus = _stage("attractor", attractor)
    return PipelineReport(
        config=cfg.to_dict(),
        grid=grid,
        periods=[s for _, s in fits],
        densities=dens,
        clr=S.values,
        scree=np.asarray(rep.eigenvalues),
        rank=rep.to_dict(),
        r_hat=r_hat,
        attractor_basis=basis,
        stationary_mean=fbar,
        plus=plus,
        minus=minus,
        critical_values=table.to_dict(),
    )


# --- outputs -----------------------------------------------------------------


def write_matrix(path, nodes, rows) -> None:
    """CSV with the grid nodes as first row and one function per further row."""
    np.savetxt(path, np.vstack([nodes, rows]), delimiter=",", fmt="%.17g")


def read_matrix(path) -> tuple[Grid, np.ndarray]:
    """Inverse of :func:`write_matrix`; the node row must be a uniform grid."""
    try:
        M = np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError) as err:
        raise FormatError(f"cannot read matrix {path}: {err}") from err
    if M.shape[0] < 2 or M.shape[1] < 3:
        raise FormatError(f"{path}: need a node row and at least one function row")
    nodes = M[0]
    grid = Grid(nodes[0], nodes[-1], nodes.size)
    if np.max(np.abs(grid.nodes - nodes)) > 1e-9 * max(1.0, grid.measure):
        raise FormatError(f"{path}: first row is not a uniform grid")
    return grid, M[1:]


def _write_table(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def emit_outputs(report: PipelineReport, outdir) -> dict:
    """Write all report files into ``outdir`` and return their paths."""
    out = Path(outdir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {k: out / v for k, v in OUTPUT_FILES.items()}
        x = report.grid.nodes
        write_matrix(paths["density_matrix"], x, report.densities)
        write_matrix(paths["clr_matrix"], x, report.clr)
        total = report.scree.sum()
        _write_table(
            paths["scree"],
            ["index", "eigenvalue", "share"],
            [[i + 1, repr(float(z)), repr(float(z / total)) if total > 0 else "nan"] for i, z in enumerate(report.scree)],
        )
        lvls = [str(lv) for lv in LEVELS]
        tau_rows = []
        for test in report.rank["tests"]:
            cvs = report.rank["critical_values"].get(str(test["R"]), {})
            tau_rows.append(
                [test["R"], repr(test["tau"]), repr(test["bandwidth"])]
                + [repr(cvs.get(lv, float("nan"))) for lv in lvls]
                + [int(test["reject"][str(report.rank["level"])])]
            )
        _write_table(paths["tau_table"], ["R", "tau", "bandwidth"] + [f"cv_{lv}" for lv in lvls] + ["reject"], tau_rows)
        B = report.attractor_basis
        _write_table(
            paths["attractor_basis"],
            ["x"] + [f"v{i + 1}" for i in range(B.shape[0])],
            [[repr(float(v)) for v in row] for row in np.column_stack([x, B.T])],
        )
        _write_table(
            paths["perturbations"],
            ["x", "mean", "plus", "minus"],
            [[repr(float(v)) for v in row] for row in np.column_stack([x, report.stationary_mean, report.plus, report.minus])],
        )
        paths["report"].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as err:
        raise PipelineError("output", FormatError(f"cannot write to {out}: {err}")) from err
    return paths

