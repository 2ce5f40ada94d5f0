"""Leakage statistics: cell summaries, slope, rank correlation and bootstraps."""

from __future__ import annotations

import zlib
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.stats import rankdata

N_RESAMPLES = 2000
CI_PERCENTILES = (2.5, 97.5)

BootstrapMode = Literal["cell_stratified", "design_aware"]
FactorialKey = tuple[str, int, str]  # (cell_id, variant, scaffold)


class DegenerateDesignError(ValueError):
    """The data cannot support the requested statistic."""


@dataclass(frozen=True)
class CellSummary:
    cell_id: str
    target: int
    mean_estimate: float
    mae: float
    within_25_count: int
    n: int

    @property
    def within_25_fraction(self) -> float:
        return self.within_25_count / self.n


@dataclass(frozen=True)
class SlopeResult:
    slope: float
    ci_low: float
    ci_high: float
    n_resamples: int
    seed: int
    mode: BootstrapMode

    @property
    def width(self) -> float:
        return self.ci_high - self.ci_low

    def overlaps(self, other: SlopeResult) -> bool:
        return self.ci_low <= other.ci_high and other.ci_low <= self.ci_high


def within_25(estimate: float, target: float) -> bool:
    return abs(estimate - target) <= 0.25 * target


def group_estimates(pairs: Iterable[tuple[str, float]]) -> dict[str, list[float]]:
    cells: dict[str, list[float]] = {}
    for cell_id, est in pairs:
        cells.setdefault(cell_id, []).append(float(est))
    return cells


def summarize_cells(
    estimates: Iterable[tuple[str, float]], targets: Mapping[str, int]
) -> list[CellSummary]:
    """One summary per cell in ``targets``, ordered by target then cell id."""
    cells = group_estimates(estimates)
    unknown = set(cells) - set(targets)
    if unknown:
        raise KeyError(f"estimates for cells without a target: {sorted(unknown)}")
    out = []
    for cell_id in sorted(targets, key=lambda c: (targets[c], c)):
        values = cells.get(cell_id)
        if not values:
            raise DegenerateDesignError(f"cell {cell_id} has no estimates")
        target = targets[cell_id]
        arr = np.asarray(values, dtype=float)
        out.append(
            CellSummary(
                cell_id=cell_id,
                target=target,
                mean_estimate=float(arr.mean()),
                mae=float(np.abs(arr - target).mean()),
                within_25_count=sum(within_25(v, target) for v in values),
                n=len(values),
            )
        )
    return out


def _slope_arrays(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """OLS slope along the last axis; ``x`` is shared, ``y`` may be batched."""
    xc = x - x.mean()
    yc = y - y.mean(axis=-1, keepdims=True)
    return (yc * xc).sum(axis=-1) / (xc * xc).sum()


def ols_slope(points: Sequence[tuple[float, float]]) -> float:
    if len(points) < 2:
        raise DegenerateDesignError("need at least two points for a slope")
    x = np.array([p[0] for p in points], dtype=float)
    y = np.array([p[1] for p in points], dtype=float)
    if np.all(x == x[0]):
        raise DegenerateDesignError("all targets are equal; slope is undefined")
    return float(_slope_arrays(x, y))


def spearman_rho(points: Sequence[tuple[float, float]]) -> float:
    if len(points) < 2:
        raise DegenerateDesignError("need at least two points for a rank correlation")
    rx = rankdata([p[0] for p in points])
    ry = rankdata([p[1] for p in points])
    rx, ry = rx - rx.mean(), ry - ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0:
        return float("nan")  # one side constant: no ordering to correlate
    return float((rx * ry).sum() / denom)


def trial_level_slope(estimates: Iterable[tuple[str, float]], targets: Mapping[str, int]) -> float:
    """Diagnostic regression on individual trials rather than cell means."""
    return ols_slope([(targets[c], e) for c, e in estimates])


def _cell_rng(seed: int, cell_id: str) -> np.random.Generator:
    # Keyed by cell id, so results do not depend on the order cells are visited.
    return np.random.default_rng([seed, zlib.crc32(cell_id.encode())])


def _percentile_ci(samples: np.ndarray) -> tuple[float, float]:
    lo, hi = np.percentile(samples, CI_PERCENTILES)
    return float(lo), float(hi)


def bootstrap_slope(
    trials: Mapping[str, Sequence[float]],
    targets: Mapping[str, int],
    *,
    n_resamples: int = N_RESAMPLES,
    seed: int = 0,
) -> SlopeResult:
    """Cell-stratified bootstrap of the slope of cell means on target.

    Row ``i`` of each cell's index matrix is resample ``i``; each cell draws
    from its own stream keyed by ``(seed, cell_id)``.
    """
    cells = sorted(targets, key=lambda c: (targets[c], c))
    for c in cells:
        if not trials.get(c):
            raise DegenerateDesignError(f"cell {c} has no estimates")
    x = np.array([targets[c] for c in cells], dtype=float)
    if np.all(x == x[0]):
        raise DegenerateDesignError("all targets are equal; slope is undefined")
    observed = ols_slope([(targets[c], float(np.mean(trials[c]))) for c in cells])
    means = np.empty((n_resamples, len(cells)))
    for j, c in enumerate(cells):
        values = np.asarray(trials[c], dtype=float)
        idx = _cell_rng(seed, c).integers(0, len(values), size=(n_resamples, len(values)))
        means[:, j] = values[idx].mean(axis=1)
    lo, hi = _percentile_ci(_slope_arrays(x, means))
    return SlopeResult(observed, lo, hi, n_resamples, seed, "cell_stratified")


def bootstrap_cell_means(
    trials: Mapping[str, Sequence[float]], *, n_resamples: int = N_RESAMPLES, seed: int = 0
) -> dict[str, tuple[float, float]]:
    """Percentile CI of each cell mean, from the same streams as :func:`bootstrap_slope`."""
    out = {}
    for c, values in trials.items():
        arr = np.asarray(values, dtype=float)
        if arr.size == 0:
            raise DegenerateDesignError(f"cell {c} has no estimates")
        idx = _cell_rng(seed, c).integers(0, arr.size, size=(n_resamples, arr.size))
        out[c] = _percentile_ci(arr[idx].mean(axis=1))
    return out


def _factorial_axes(factorial: Mapping[FactorialKey, Sequence[float]]):
    cells = sorted({k[0] for k in factorial})
    variants = sorted({k[1] for k in factorial})
    scaffolds = sorted({k[2] for k in factorial})
    for c in cells:
        for v in variants:
            for s in scaffolds:
                if not factorial.get((c, v, s)):
                    raise DegenerateDesignError(f"missing design cell ({c}, variant {v}, scaffold {s})")
    return cells, variants, scaffolds


def _combo_means(factorial, cells, variants, scaffolds) -> np.ndarray:
    """Array of shape (cell, variant, scaffold) holding combo means."""
    return np.array(
        [[[np.mean(factorial[(c, v, s)]) for s in scaffolds] for v in variants] for c in cells],
        dtype=float,
    )


def design_aware_bootstrap(
    factorial: Mapping[FactorialKey, Sequence[float]],
    targets: Mapping[str, int],
    *,
    n_resamples: int = N_RESAMPLES,
    seed: int = 0,
) -> SlopeResult:
    """Bootstrap over variants, scaffolds and trials.

    Each resample draws one set of variants and one set of scaffolds (with
    replacement) shared by all target cells, then redraws trials within each
    selected combo. Cell means weight every drawn combo equally.
    """
    cells, variants, scaffolds = _factorial_axes(factorial)
    if len(set(targets[c] for c in cells)) < 2:
        raise DegenerateDesignError("all targets are equal; slope is undefined")
    x = np.array([targets[c] for c in cells], dtype=float)
    observed = ols_slope([(targets[c], m) for c, m in zip(cells, _combo_means(factorial, cells, variants, scaffolds).mean(axis=(1, 2)))])

    nv, ns = len(variants), len(scaffolds)
    design = np.random.default_rng([seed, 0x5CAFF01D])
    v_pick = design.integers(0, nv, size=(n_resamples, nv))
    s_pick = design.integers(0, ns, size=(n_resamples, ns))
    slot_v = np.repeat(v_pick, ns, axis=1)  # (R, nv*ns)
    slot_s = np.tile(s_pick, (1, nv))
    means = np.empty((n_resamples, len(cells)))
    for j, c in enumerate(cells):
        combos = [np.asarray(factorial[(c, v, s)], dtype=float) for v in variants for s in scaffolds]
        sizes = np.array([len(a) for a in combos])
        width = sizes.max()
        padded = np.zeros((len(combos), width))
        for k, a in enumerate(combos):
            padded[k, : len(a)] = a
        combo = slot_v * ns + slot_s  # (R, slots)
        n = sizes[combo]
        u = _cell_rng(seed, c).random((n_resamples, nv * ns, width))
        idx = np.floor(u * n[..., None]).astype(int)
        mask = np.arange(width) < n[..., None]
        vals = padded[combo[..., None], idx] * mask
        means[:, j] = (vals.sum(axis=2) / n).mean(axis=1)
    lo, hi = _percentile_ci(_slope_arrays(x, means))
    return SlopeResult(observed, lo, hi, n_resamples, seed, "design_aware")


@dataclass(frozen=True)
class VarianceRow:
    cell_id: str
    sd_combos: float
    sd_variants: float
    sd_scaffolds: float


def variance_decomposition(factorial: Mapping[FactorialKey, Sequence[float]]) -> list[VarianceRow]:
    """Sample (n-1) SDs of combo means and of variant and scaffold marginals per cell."""
    cells, variants, scaffolds = _factorial_axes(factorial)
    if len(variants) < 2 or len(scaffolds) < 2:
        raise DegenerateDesignError("variance decomposition needs at least two variants and two scaffolds")
    combo = _combo_means(factorial, cells, variants, scaffolds)
    rows = []
    for j, c in enumerate(cells):
        m = combo[j]
        rows.append(
            VarianceRow(
                c,
                float(np.std(m.ravel(), ddof=1)),
                float(np.std(m.mean(axis=1), ddof=1)),
                float(np.std(m.mean(axis=0), ddof=1)),
            )
        )
    return rows


@dataclass(frozen=True)
class MetricsReport:
    """Summary of one (condition, inference variant) pair."""

    label: str
    cells: tuple[CellSummary, ...]
    slope: SlopeResult
    spearman: float
    mae: float
    within_25: float
    n: int

    @property
    def mean_range(self) -> tuple[float, float]:
        means = [c.mean_estimate for c in self.cells]
        return min(means), max(means)

    @property
    def grid(self) -> tuple[int, ...]:
        return tuple(c.target for c in self.cells)


def metrics_report(
    label: str,
    estimates: Sequence[tuple[str, float]],
    targets: Mapping[str, int],
    *,
    n_resamples: int = N_RESAMPLES,
    seed: int = 0,
) -> MetricsReport:
    cells = summarize_cells(estimates, targets)
    points = [(c.target, c.mean_estimate) for c in cells]
    grouped = group_estimates(estimates)
    n = sum(c.n for c in cells)
    return MetricsReport(
        label=label,
        cells=tuple(cells),
        slope=bootstrap_slope(grouped, targets, n_resamples=n_resamples, seed=seed),
        spearman=spearman_rho(points),
        mae=sum(c.mae * c.n for c in cells) / n,
        within_25=sum(c.within_25_count for c in cells) / n,
        n=n,
    )


def report_from_means(
    label: str,
    means: Sequence[float],
    targets: Sequence[int],
    ci: tuple[float, float] | None = None,
) -> MetricsReport:
    """Report built from cell means alone; without ``ci`` the interval collapses to the point slope."""
    cells = tuple(
        CellSummary(f"c{t}", t, float(m), abs(float(m) - t), int(within_25(m, t)), 1)
        for t, m in zip(targets, means)
    )
    points = [(c.target, c.mean_estimate) for c in cells]
    slope = ols_slope(points)
    return MetricsReport(
        label=label,
        cells=cells,
        slope=SlopeResult(slope, *(ci or (slope, slope)), 0, 0, "cell_stratified"),
        spearman=spearman_rho(points),
        mae=sum(c.mae for c in cells) / len(cells),
        within_25=sum(c.within_25_count for c in cells) / len(cells),
        n=len(cells),
    )


@dataclass(frozen=True)
class ComparisonRow:
    metric: str
    a: float | str
    b: float | str
    delta: float | None


@dataclass(frozen=True)
class Comparison:
    a_label: str
    b_label: str
    rows: tuple[ComparisonRow, ...]
    ci_overlap: bool


def compare_conditions(a: MetricsReport, b: MetricsReport) -> Comparison:
    if a.grid != b.grid:
        raise ValueError(f"target grids differ: {a.grid} vs {b.grid}")

    def num(metric: str, x: float, y: float) -> ComparisonRow:
        return ComparisonRow(metric, x, y, y - x)

    def fmt_ci(r: MetricsReport) -> str:
        return f"{r.slope.slope:.2f} [{r.slope.ci_low:.2f}, {r.slope.ci_high:.2f}]"

    def fmt_range(r: MetricsReport) -> str:
        lo, hi = r.mean_range
        return f"{lo:.0f}-{hi:.0f}"

    rows = (
        num("mae", a.mae, b.mae),
        num("within_25", a.within_25, b.within_25),
        num("slope", a.slope.slope, b.slope.slope),
        ComparisonRow("slope_ci", fmt_ci(a), fmt_ci(b), None),
        ComparisonRow("mean_range", fmt_range(a), fmt_range(b), None),
        num("spearman", a.spearman, b.spearman),
    )
    return Comparison(a.label, b.label, rows, a.slope.overlaps(b.slope))
