"""Forecast-necessity testing: edge ablation, loss differentials, HAC DM test.

An edge (source -> target) is forecast-necessary when zeroing its
contribution nets at evaluation time (no retraining) raises out-of-sample
squared-error loss by a statistically significant amount. Loss differentials
are pooled across units; the variance of the mean uses a Bartlett-kernel
(Newey-West) estimator whose autocovariances are computed within unit blocks
only, so lag pairs never straddle two units. The test statistic is referred
to the standard normal upper tail.

Because the masked model is nested in the full model, the test can be
conservative in small samples; every result carries that caveat as a warning
string rather than a correction (see NESTED_MODEL_WARNING).
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import stats as sps

from .model import (
    CausalScoreMatrix,
    EdgeMask,
    ModelError,
    NavarModel,
    contributions,
    predictions_from_contributions,
)
from .panel import PanelDataset, PanelError, SplitSpec, apply_normalization, enumerate_windows

NESTED_MODEL_WARNING = (
    "masked model is nested in the full model; normal-tail p-values may be "
    "conservative in small samples"
)


class NecessityError(ValueError):
    """Raised for ill-posed necessity computations."""


@dataclass(frozen=True)
class LossPanel:
    """Per-unit blocks of one-step squared-error losses on a fixed index set.

    ``values[c, k]`` is the loss for unit ``units[c]`` at time ``times[k]``;
    times are strictly increasing and shared across units (balanced panel).
    """

    target: int
    units: tuple[str, ...]
    times: tuple[int, ...]
    values: np.ndarray  # (C, Tval)

    def __post_init__(self):
        object.__setattr__(self, "units", tuple(self.units))
        object.__setattr__(self, "times", tuple(int(t) for t in self.times))
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.shape != (len(self.units), len(self.times)):
            raise NecessityError(f"loss panel shape {vals.shape} does not match labels")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise NecessityError("loss panel times must be strictly increasing")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class LossDifferentialSeries:
    """Pooled loss differentials d = masked - full for one ablated edge.

    Blocks are keyed by unit in a fixed order; within each block, entries are
    (time, full loss, masked loss, d) with strictly increasing times.
    """

    edge: EdgeMask
    units: tuple[str, ...]
    times: tuple[int, ...]
    loss_full: np.ndarray    # (C, Tval)
    loss_masked: np.ndarray  # (C, Tval)

    def __post_init__(self):
        object.__setattr__(self, "units", tuple(self.units))
        object.__setattr__(self, "times", tuple(int(t) for t in self.times))
        full = np.ascontiguousarray(self.loss_full, dtype=np.float64)
        masked = np.ascontiguousarray(self.loss_masked, dtype=np.float64)
        shape = (len(self.units), len(self.times))
        if full.shape != shape or masked.shape != shape:
            raise NecessityError(f"block shapes {full.shape}/{masked.shape} do not match labels {shape}")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise NecessityError("differential times must be strictly increasing")
        full.flags.writeable = False
        masked.flags.writeable = False
        object.__setattr__(self, "loss_full", full)
        object.__setattr__(self, "loss_masked", masked)

    @property
    def diffs(self) -> np.ndarray:
        """(C, Tval) array of d = masked - full, exact per entry."""
        return self.loss_masked - self.loss_full

    @property
    def n_obs(self) -> int:
        return self.loss_full.size

    @classmethod
    def from_blocks(cls, edge: EdgeMask, units, times, diffs: np.ndarray) -> "LossDifferentialSeries":
        """Build a series directly from differentials (full losses set to 0)."""
        d = np.asarray(diffs, dtype=np.float64)
        return cls(edge=edge, units=units, times=times, loss_full=np.zeros_like(d), loss_masked=d)


def forecast_losses(
    model: NavarModel,
    data: PanelDataset,
    split: SplitSpec,
    target: int,
    mask: Optional[EdgeMask] = None,
) -> LossPanel:
    """One-step-ahead squared errors on the validation range, per unit.

    ``data`` is the panel in original units; the model's stored normalization
    is applied, so losses are in normalized units. With a mask, the edge is
    zeroed at evaluation time without touching parameters. Lagged inputs may
    reach back into training years. Dropout never applies at evaluation.
    """
    if not (0 <= target < model.n_variables):
        raise NecessityError(f"target {target} outside variable range")
    if mask is not None and mask.target != target:
        raise NecessityError(f"mask targets variable {mask.target}, losses requested for {target}")
    windows, contrib = _validation_contributions(model, data, split)
    yhat = predictions_from_contributions(model, contrib, mask=mask)[:, target]
    sq = (windows.targets[:, target] - yhat) ** 2
    C = data.n_units
    Tval = len(windows) // C
    times = tuple(int(t) for t in windows.time_labels[:Tval])
    return LossPanel(target=target, units=data.units, times=times, values=sq.reshape(C, Tval))


def _validation_contributions(model: NavarModel, data: PanelDataset, split: SplitSpec):
    if model.norm_stats is None:
        raise ModelError("model has no normalization stats; train() attaches them")
    normalized = apply_normalization(data, model.norm_stats)
    windows = enumerate_windows(normalized, model.lags, split.validation_range)
    if len(windows) == 0:
        raise PanelError(f"validation range {split.validation_range} yields no usable windows")
    return windows, contributions(model, windows.inputs)


def build_differential(full: LossPanel, masked: LossPanel, edge: EdgeMask) -> LossDifferentialSeries:
    """Pair full/masked loss panels into a differential series, blockwise."""
    if full.units != masked.units or full.times != masked.times:
        raise NecessityError("full and masked loss panels must share the same (unit, time) index")
    if full.target != masked.target:
        raise NecessityError("full and masked loss panels are for different targets")
    return LossDifferentialSeries(
        edge=edge, units=full.units, times=full.times,
        loss_full=full.values, loss_masked=masked.values,
    )


# ---------------------------------------------------------------------------
# HAC variance and the DM test
# ---------------------------------------------------------------------------


def newey_west_bandwidth(block_length: int) -> int:
    """Plug-in bandwidth floor(4 (T/100)^{2/9}), capped at T - 1."""
    if block_length < 1:
        raise NecessityError("block length must be >= 1")
    return min(int(math.floor(4.0 * (block_length / 100.0) ** (2.0 / 9.0))), block_length - 1)


def hac_variance_of_mean(
    series: Union[LossDifferentialSeries, np.ndarray],
    bandwidth: Union[str, int] = "auto",
) -> float:
    """Bartlett-kernel (Newey-West) variance of the pooled mean differential.

    Autocovariances are estimated within unit blocks only and pooled:

        gamma_k = (1/n) * sum_c sum_t (d_{c,t} - dbar)(d_{c,t+k} - dbar)
        Var(dbar) = (gamma_0 + 2 * sum_{k=1}^{B} (1 - k/(B+1)) gamma_k) / n

    with dbar the pooled mean and n the pooled count. ``bandwidth="auto"``
    uses floor(4 (T_block/100)^{2/9}) where T_block is the per-unit block
    length; an integer fixes it (capped at T_block - 1).
    """
    d = _series_blocks(series)
    C, T = d.shape
    n = d.size
    if n < 2:
        raise NecessityError(f"need at least 2 pooled observations, got {n}")
    if bandwidth == "auto":
        bw = newey_west_bandwidth(T)
    else:
        bw = int(bandwidth)
        if bw < 0:
            raise NecessityError(f"bandwidth must be >= 0, got {bandwidth}")
        bw = min(bw, T - 1)
    e = d - d.mean()
    gamma0 = float(np.einsum("ct,ct->", e, e)) / n
    lrv = gamma0
    for k in range(1, bw + 1):
        gamma_k = float(np.einsum("ct,ct->", e[:, k:], e[:, :-k])) / n
        lrv += 2.0 * (1.0 - k / (bw + 1.0)) * gamma_k
    return lrv / n


def _series_blocks(series: Union[LossDifferentialSeries, np.ndarray]) -> np.ndarray:
    if isinstance(series, LossDifferentialSeries):
        return series.diffs
    d = np.asarray(series, dtype=np.float64)
    if d.ndim == 1:
        d = d[None, :]  # single block
    if d.ndim != 2 or d.size == 0:
        raise NecessityError(f"differential array must be 1- or 2-dimensional and non-empty, got shape {d.shape}")
    return d


@dataclass(frozen=True)
class DMTestResult:
    """One-sided Diebold-Mariano forecast-necessity verdict for one edge.

    H0: E[d] = 0 against H1: E[d] > 0, where d = masked loss - full loss.
    ``degenerate`` is set (and dm_stat/p_value are None) exactly when the HAC
    variance is zero; a degenerate edge is never judged necessary.
    """

    edge: EdgeMask
    mean_diff: float
    hac_variance_of_mean: float
    dm_stat: Optional[float]
    p_value: Optional[float]
    n_obs: int
    bandwidth: int
    alpha: float
    degenerate: bool
    necessary: bool
    warning: str = NESTED_MODEL_WARNING


def dm_test(
    series: Union[LossDifferentialSeries, np.ndarray],
    alpha: float = 0.05,
    bandwidth: Union[str, int] = "auto",
    edge: Optional[EdgeMask] = None,
) -> DMTestResult:
    """One-sided DM test of the pooled loss differential.

    DM = dbar / sqrt(Var_HAC(dbar)); the p-value is the standard normal
    upper-tail probability. A zero HAC variance yields a degenerate,
    non-necessary result rather than a division by zero.
    """
    if not (0.0 < alpha < 1.0):
        raise NecessityError(f"alpha must be in (0, 1), got {alpha}")
    d = _series_blocks(series)
    if isinstance(series, LossDifferentialSeries) and edge is None:
        edge = series.edge
    if edge is None:
        edge = EdgeMask(target=-1, source=-1)
    var = hac_variance_of_mean(d, bandwidth=bandwidth)
    bw = newey_west_bandwidth(d.shape[1]) if bandwidth == "auto" else min(int(bandwidth), d.shape[1] - 1)
    mean = float(d.mean())
    if var <= 0.0:
        return DMTestResult(
            edge=edge, mean_diff=mean, hac_variance_of_mean=max(var, 0.0),
            dm_stat=None, p_value=None, n_obs=d.size, bandwidth=bw, alpha=alpha,
            degenerate=True, necessary=False,
        )
    stat = mean / math.sqrt(var)
    p = float(sps.norm.sf(stat))
    return DMTestResult(
        edge=edge, mean_diff=mean, hac_variance_of_mean=var,
        dm_stat=stat, p_value=p, n_obs=d.size, bandwidth=bw, alpha=alpha,
        degenerate=False, necessary=bool(p < alpha),
    )


# ---------------------------------------------------------------------------
# multiple-testing corrections
# ---------------------------------------------------------------------------


def adjust_pvalues(raw: Sequence[float], method: str) -> np.ndarray:
    """Multiplicity-adjusted p-values, order-preserving with the input.

    ``bonferroni``: min(1, m*p). ``benjamini_hochberg``: standard step-up
    adjustment with monotonicity enforcement (adjusted values are
    non-decreasing in raw-p order). ``none`` returns the input unchanged.
    """
    p = np.asarray(raw, dtype=np.float64)
    if p.ndim != 1:
        raise NecessityError("raw p-values must be a 1-d sequence")
    if p.size and ((p < 0).any() or (p > 1).any()):
        raise NecessityError("raw p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        return p.copy()
    if method == "none":
        return p.copy()
    if method == "bonferroni":
        return np.minimum(1.0, m * p)
    if method == "benjamini_hochberg":
        order = np.argsort(p, kind="stable")
        ranked = p[order] * m / np.arange(1, m + 1)
        adjusted_sorted = np.minimum(1.0, np.minimum.accumulate(ranked[::-1])[::-1])
        out = np.empty(m)
        out[order] = adjusted_sorted
        return out
    raise NecessityError(f"unknown correction method {method!r}")


# ---------------------------------------------------------------------------
# whole-graph screening
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EdgeScreenRow:
    """One screened edge: score, DM outcome, and corrected verdict."""

    target: int
    source: int
    target_name: str
    source_name: str
    score: float
    mean_loss_full: float
    mean_loss_masked: float
    mean_diff: float
    dm_stat: Optional[float]
    p_value: Optional[float]
    p_adjusted: Optional[float]
    necessary: bool
    degenerate: bool
    n_obs: int
    warning: str


@dataclass(frozen=True)
class EdgeScreenReport:
    """All N(N-1) directed edges screened, sorted by adjusted p ascending.

    Degenerate edges (zero HAC variance) carry no p-values, sort last, and
    are excluded from the correction multiplicity m; ties break by
    (target, source). ``necessary`` on each row is the post-correction
    verdict at ``alpha`` (with correction="none" it equals the raw verdict).
    """

    rows: tuple[EdgeScreenRow, ...]
    correction: str
    alpha: float
    bandwidth: Union[str, int]

    def to_csv(self, path) -> None:
        header = (
            "target,source,navar_score,mean_loss_full,mean_loss_masked,mean_diff,"
            "dm_stat,p_value,p_adjusted,necessary,degenerate,warning"
        )
        lines = [header]
        for r in self.rows:
            lines.append(
                ",".join(
                    [
                        r.target_name,
                        r.source_name,
                        _num(r.score),
                        _num(r.mean_loss_full),
                        _num(r.mean_loss_masked),
                        _num(r.mean_diff),
                        _num(r.dm_stat),
                        _num(r.p_value),
                        _num(r.p_adjusted),
                        str(r.necessary).lower(),
                        str(r.degenerate).lower(),
                        '"' + r.warning + '"',
                    ]
                )
            )
        Path(path).write_text("\n".join(lines) + "\n")

    def to_json_dict(self) -> dict:
        return {
            "correction": self.correction,
            "alpha": self.alpha,
            "bandwidth": self.bandwidth,
            "rows": [
                {
                    "target": r.target_name,
                    "source": r.source_name,
                    "target_index": r.target,
                    "source_index": r.source,
                    "navar_score": r.score,
                    "mean_loss_full": r.mean_loss_full,
                    "mean_loss_masked": r.mean_loss_masked,
                    "mean_diff": r.mean_diff,
                    "dm_stat": r.dm_stat,
                    "p_value": r.p_value,
                    "p_adjusted": r.p_adjusted,
                    "necessary": r.necessary,
                    "degenerate": r.degenerate,
                    "n_obs": r.n_obs,
                    "warning": r.warning,
                }
                for r in self.rows
            ],
        }

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")


def _num(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def screen_all_edges(
    model: NavarModel,
    data: PanelDataset,
    split: SplitSpec,
    scores: Optional[CausalScoreMatrix] = None,
    correction: str = "benjamini_hochberg",
    alpha: float = 0.05,
    bandwidth: Union[str, int] = "auto",
    workers: int = 1,
) -> EdgeScreenReport:
    """Ablate and DM-test every ordered pair (target, source), target != source.

    The validation contribution tensor is computed once and sliced per edge,
    so no retraining or re-evaluation occurs. Degenerate edges yield flagged
    rows, not failures. Results are merged in deterministic edge order
    regardless of ``workers``.
    """
    if correction not in ("none", "bonferroni", "benjamini_hochberg"):
        raise NecessityError(f"unknown correction method {correction!r}")
    N = model.n_variables
    if N < 2:
        raise NecessityError("need at least 2 variables to screen edges")
    windows, contrib = _validation_contributions(model, data, split)
    C = data.n_units
    Tval = len(windows) // C
    times = tuple(int(t) for t in windows.time_labels[:Tval])

    yhat = predictions_from_contributions(model, contrib)  # (W, N)
    truth = windows.targets
    full_sq = (truth - yhat) ** 2  # (W, N)

    edges = [(i, j) for i in range(N) for j in range(N) if i != j]

    def run_edge(edge_idx: int):
        i, j = edges[edge_idx]
        masked_yhat = yhat[:, i] - contrib[:, i, j, :].sum(axis=1)
        masked_sq = (truth[:, i] - masked_yhat) ** 2
        series = LossDifferentialSeries(
            edge=EdgeMask(target=i, source=j),
            units=data.units,
            times=times,
            loss_full=full_sq[:, i].reshape(C, Tval),
            loss_masked=masked_sq.reshape(C, Tval),
        )
        return dm_test(series, alpha=alpha, bandwidth=bandwidth), float(masked_sq.mean())

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_edge, range(len(edges))))
    else:
        results = [run_edge(k) for k in range(len(edges))]

    tested = [k for k, (r, _) in enumerate(results) if not r.degenerate]
    raw = [results[k][0].p_value for k in tested]
    adjusted = adjust_pvalues(raw, correction)
    adj_by_edge: dict[int, float] = {k: float(a) for k, a in zip(tested, adjusted)}

    rows = []
    for k, (i, j) in enumerate(edges):
        r, mean_masked = results[k]
        p_adj = adj_by_edge.get(k)
        rows.append(
            EdgeScreenRow(
                target=i,
                source=j,
                target_name=model.variables[i],
                source_name=model.variables[j],
                score=float(scores.scores[i, j]) if scores is not None else float("nan"),
                mean_loss_full=float(full_sq[:, i].mean()),
                mean_loss_masked=mean_masked,
                mean_diff=r.mean_diff,
                dm_stat=r.dm_stat,
                p_value=r.p_value,
                p_adjusted=p_adj,
                necessary=bool(p_adj is not None and p_adj < alpha),
                degenerate=r.degenerate,
                n_obs=r.n_obs,
                warning=r.warning,
            )
        )
    rows.sort(key=lambda r: (r.p_adjusted if r.p_adjusted is not None else math.inf, r.target, r.source))
    return EdgeScreenReport(rows=tuple(rows), correction=correction, alpha=alpha, bandwidth=bandwidth)
