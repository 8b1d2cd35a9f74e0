"""Logit-gap statistics, tail densities, power-law fits, and an
independent i.i.d. order-statistics oracle.

The oracle draws class scores independently from a base distribution and
measures the gaps between the largest and the j-th largest score.  For an
i.i.d. base the small-gap density is analytically
C * gap^(j-2) with C = N(N-1) * binom(N-2, j-2) * integral(F^(N-j) P^j),
which doubles as a closed-form cross-check of the Monte Carlo sampler and
of the tail-fitting machinery.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import integrate, stats

from . import nn


class FitError(ValueError):
    """Not enough usable points/bins for a log-log fit."""


# ---------------------------------------------------------------------------
# Logit gaps of a trained network
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LogitRecord:
    example_id: int
    sorted_logits: np.ndarray  # descending; ties broken by class index
    deltas: np.ndarray         # deltas[j-2] = top logit - j-th logit, j=2..j_max


def logit_diffs(net, data, j_max: Optional[int] = None) -> list:
    """One record per example with descending logits and top-j gaps."""
    if j_max is None:
        j_max = net.n_classes
    if not 2 <= j_max <= net.n_classes:
        raise ValueError(f"j_max must be in [2, {net.n_classes}]")
    logits = nn.forward(net, np.asarray(data.inputs, dtype=np.float64))
    order = np.argsort(-logits, axis=1, kind="stable")
    sorted_logits = np.take_along_axis(logits, order, axis=1)
    deltas = sorted_logits[:, :1] - sorted_logits[:, 1:j_max]
    return [
        LogitRecord(i, sorted_logits[i], deltas[i]) for i in range(len(logits))
    ]


def collect_deltas(records, j: int) -> np.ndarray:
    """Gap samples for one rank j across records."""
    return np.array([r.deltas[j - 2] for r in records])


def write_deltas_csv(path, records) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["example_id", "j", "delta"])
        for r in records:
            for k, d in enumerate(r.deltas):
                w.writerow([r.example_id, k + 2, repr(float(d))])


# ---------------------------------------------------------------------------
# Tail density on log-spaced bins
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TailDensity:
    edges: np.ndarray     # log-spaced bin edges, length n_bins + 1
    density: np.ndarray   # per-bin probability density
    counts: np.ndarray
    n_samples: int        # positive samples the density is normalized to
    n_zero: int           # exact-zero samples excluded from the log bins

    @property
    def centers(self) -> np.ndarray:
        return np.sqrt(self.edges[:-1] * self.edges[1:])

    def lowest_decades_window(self, n_decades: float = 2.0):
        """Default fit window: the lowest populated decades."""
        populated = self.centers[self.counts > 0]
        if len(populated) == 0:
            raise FitError("no populated bins")
        lo = populated[0]
        return (lo, lo * 10.0 ** n_decades)


def tail_density(samples, bins: int = 40,
                 edges: Optional[np.ndarray] = None) -> TailDensity:
    """Histogram of nonnegative samples on log-spaced bins, normalized to
    a probability density over the positive samples.

    Default edges span the 0.1th percentile of the positive samples up to
    their maximum.  Exact zeros are excluded and counted.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) < 100:
        raise ValueError("need at least 100 samples for a density estimate")
    if np.any(samples < 0):
        raise ValueError("samples must be nonnegative")
    pos = samples[samples > 0.0]
    n_zero = len(samples) - len(pos)
    if len(pos) == 0:
        raise ValueError("all samples are exactly zero")
    if edges is None:
        lo = np.percentile(pos, 0.1)
        hi = pos.max()
        if lo <= 0 or lo >= hi:
            lo = pos.min()
        if lo >= hi:
            raise ValueError("degenerate sample range for log bins")
        edges = np.geomspace(lo, hi, bins + 1)
    edges = np.asarray(edges, dtype=np.float64)
    counts, _ = np.histogram(pos, bins=edges)
    widths = np.diff(edges)
    density = counts / (len(pos) * widths)
    return TailDensity(edges, density, counts, len(pos), n_zero)


# ---------------------------------------------------------------------------
# Power-law fitting (log-log least squares)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PowerLawFit:
    amplitude: float      # A in A * x^B
    exponent: float       # B
    window: tuple         # (lo, hi) actually used
    r_squared: float
    n_points: int
    n_excluded: int = 0   # nonpositive-y points dropped from the window

    def to_json_dict(self) -> dict:
        return {
            "A": self.amplitude,
            "B": self.exponent,
            "window": list(self.window),
            "r_squared": self.r_squared,
            "n_points": self.n_points,
            "n_excluded": self.n_excluded,
        }


def _loglog_fit(xs, ys):
    lx, ly = np.log(xs), np.log(ys)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 and ss_res < 1e-20 else 1.0 - ss_res / ss_tot
    return slope, intercept, r2


def fit_powerlaw(xs, ys, window) -> PowerLawFit:
    """Least-squares line on (log x, log y) inside the window; the slope is
    the exponent and exp(intercept) the amplitude.  Nonpositive y values
    are excluded (their count is reported)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    lo, hi = window
    inside = (xs >= lo) & (xs <= hi)
    usable = inside & (ys > 0.0)
    n_excluded = int(inside.sum() - usable.sum())
    if usable.sum() < 4:
        raise FitError(
            f"only {int(usable.sum())} positive points in window [{lo}, {hi}]"
        )
    x, y = xs[usable], ys[usable]
    slope, intercept, r2 = _loglog_fit(x, y)
    return PowerLawFit(
        amplitude=float(np.exp(intercept)),
        exponent=float(slope),
        window=(float(lo), float(hi)),
        r_squared=float(r2),
        n_points=int(usable.sum()),
        n_excluded=n_excluded,
    )


def small_gap_window(density: TailDensity, samples, n_decades: float = 2.0,
                     bulk_quantile: float = 0.25):
    """Fit window for the small-gap tail: the lowest populated decades,
    capped at the bulk's lower quartile so the fit never reaches into the
    turnover region of the distribution."""
    lo, hi = density.lowest_decades_window(n_decades)
    samples = np.asarray(samples)
    cap = float(np.quantile(samples[samples > 0], bulk_quantile))
    return (lo, min(hi, cap)) if cap > lo else (lo, hi)


def tail_exponent(density: TailDensity, window) -> PowerLawFit:
    """Log-log slope of a binned density inside the window (bin centers
    as x).  Requires at least 4 populated bins."""
    centers = density.centers
    lo, hi = window
    inside = (centers >= lo) & (centers <= hi) & (density.counts > 0)
    if inside.sum() < 4:
        raise FitError(f"only {int(inside.sum())} populated bins in window")
    return fit_powerlaw(centers[inside], density.density[inside], (lo, hi))


# ---------------------------------------------------------------------------
# i.i.d. order-statistics oracle
# ---------------------------------------------------------------------------

BASES = ("uniform", "gaussian")


@dataclass(frozen=True)
class OracleConfig:
    n_classes: int
    base: str = "uniform"
    n_samples: int = 1_000_000
    seed: int = 0
    j_max: int = 4

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if not 2 <= self.j_max <= self.n_classes:
            raise ValueError("j_max must be in [2, n_classes]")
        if self.base not in BASES:
            raise ValueError(f"base must be one of {BASES}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")


_CHUNK = 1_000_000


def oracle_sample(cfg: OracleConfig) -> dict:
    """Monte Carlo gap samples: draw i.i.d. score vectors, sort each, and
    record top-vs-j-th gaps.  Returns {j: samples}, deterministic by seed."""
    rng = np.random.default_rng(cfg.seed)
    out = {j: [] for j in range(2, cfg.j_max + 1)}
    remaining = cfg.n_samples
    while remaining > 0:
        m = min(_CHUNK, remaining)
        if cfg.base == "uniform":
            draws = rng.random((m, cfg.n_classes))
        else:
            draws = rng.standard_normal((m, cfg.n_classes))
        draws.sort(axis=1)
        top = draws[:, -1]
        for j in range(2, cfg.j_max + 1):
            out[j].append(top - draws[:, -j])
        remaining -= m
    return {j: np.concatenate(chunks) for j, chunks in out.items()}


def oracle_density_at_zero(cfg: OracleConfig, j: int) -> float:
    """Analytic small-gap density constant for the i.i.d. base:
    N(N-1) * binom(N-2, j-2) * integral F^(N-j)(r) P^j(r) dr.

    Uniform base uses the closed-form integral 1/(N-j+1); the Gaussian
    base is integrated numerically over +-10 standard deviations (the
    truncated tail mass is far below the 1e-8 tolerance)."""
    n = cfg.n_classes
    if not 2 <= j <= n:
        raise ValueError(f"j must be in [2, {n}]")
    comb = n * (n - 1) * math.comb(n - 2, j - 2)
    if cfg.base == "uniform":
        return comb / (n - j + 1)
    val, _ = integrate.quad(
        lambda r: stats.norm.cdf(r) ** (n - j) * stats.norm.pdf(r) ** j,
        -10.0,
        10.0,
        epsabs=1e-8,
    )
    return comb * val


def small_delta_constant(samples, j: int, window) -> float:
    """Binning-free Monte Carlo estimate of the small-gap constant C,
    assuming density ~ C * gap^(j-2) inside the window: the window count
    divided by n * integral(gap^(j-2))."""
    samples = np.asarray(samples)
    lo, hi = window
    frac = np.count_nonzero((samples >= lo) & (samples <= hi)) / len(samples)
    k = j - 1
    return frac * k / (hi**k - lo**k)


# estimator windows sit deep enough in the tail that the next-order
# truncation bias stays well below the Monte Carlo tolerance, while still
# catching enough samples; the larger-j windows must sit higher because
# the steeper tails leave the lowest bins nearly empty (and excluding
# empty bins would bias the fitted slope down)
_C_WINDOWS = {2: (3e-4, 3e-3), 3: (3e-4, 3e-3)}
_C_WINDOW_HIGH_J = (2e-3, 1.2e-2)
_SLOPE_WINDOWS = {2: (1.5e-3, 2e-2), 3: (1.5e-3, 2e-2)}
_SLOPE_WINDOW_HIGH_J = (4e-3, 3e-2)


def oracle_report(cfg: OracleConfig, samples: Optional[dict] = None) -> dict:
    """Monte Carlo vs analytic small-gap constants and tail slopes for
    every gap rank of the oracle.  Densities use fixed log-spaced edges so
    all ranks resolve the same small-gap region."""
    if samples is None:
        samples = oracle_sample(cfg)
    report = {}
    for j, s in samples.items():
        edges = np.geomspace(1e-4, max(s.max(), 1e-3), 41)
        density = tail_density(s, edges=edges)
        window = _C_WINDOWS.get(j, _C_WINDOW_HIGH_J)
        entry = {
            "analytic_C": oracle_density_at_zero(cfg, j),
            "mc_C": small_delta_constant(s, j, window),
            "c_window": list(window),
            "density": density,
        }
        try:
            fit = tail_exponent(density, _SLOPE_WINDOWS.get(j, _SLOPE_WINDOW_HIGH_J))
            entry["tail_slope"] = fit.exponent
            entry["tail_slope_r2"] = fit.r_squared
        except FitError as exc:
            entry["tail_slope_error"] = str(exc)
        report[j] = entry
    return report


def write_density_csv(path, densities: dict) -> None:
    """densities: {j: TailDensity}; schema j, bin_lo, bin_hi, density."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["j", "bin_lo", "bin_hi", "density"])
        for j in sorted(densities):
            d = densities[j]
            for k in range(len(d.density)):
                w.writerow([
                    j,
                    repr(float(d.edges[k])),
                    repr(float(d.edges[k + 1])),
                    repr(float(d.density[k])),
                ])


def write_fit_json(path, fit: PowerLawFit) -> None:
    with open(path, "w") as f:
        json.dump(fit.to_json_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def spearman(a, b) -> float:
    """Spearman rank correlation (ties get average ranks)."""
    rho = stats.spearmanr(np.asarray(a), np.asarray(b)).statistic
    return float(rho)
