"""Neural additive VAR model: per-(target, source, lag) univariate nets.

A trained model maps the p lagged values of all N variables to N one-step
predictions. Each target i is an exact sum ``bias_i + sum_{j,l} f_ijl(x_jl)``
of N*N*p independent scalar-input shallow ReLU networks, so per-edge
contributions, causal scores and evaluation-time edge masking are exact
algebraic operations rather than approximations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .panel import LagWindow, NormalizationStats, WindowSet

CHECKPOINT_FORMAT = "navarcast-model"
CHECKPOINT_VERSION = 1

#: Windows processed per chunk when building contribution tensors; bounds
#: peak memory at roughly chunk * N^2 * p * H floats.
_EVAL_CHUNK = 256


class ModelError(ValueError):
    """Raised for malformed models, checkpoints, or mismatched shapes."""


@dataclass(frozen=True)
class ContributionNet:
    """Scalar-input, scalar-output shallow net: x -> w2 . relu(w1*x + b1) + b2."""

    w1: np.ndarray  # (H,)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (H,)
    b2: float

    def __post_init__(self):
        w1 = np.asarray(self.w1, dtype=np.float64)
        b1 = np.asarray(self.b1, dtype=np.float64)
        w2 = np.asarray(self.w2, dtype=np.float64)
        if not (w1.shape == b1.shape == w2.shape) or w1.ndim != 1:
            raise ModelError(f"inconsistent net shapes: {w1.shape}, {b1.shape}, {w2.shape}")
        for name, arr in (("w1", w1), ("b1", b1), ("w2", w2)):
            if not np.isfinite(arr).all():
                raise ModelError(f"non-finite parameter in {name}")
        if not np.isfinite(self.b2):
            raise ModelError("non-finite parameter in b2")
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "b1", b1)
        object.__setattr__(self, "w2", w2)
        object.__setattr__(self, "b2", float(self.b2))

    @property
    def hidden(self) -> int:
        return len(self.w1)


def eval_contribution(net: ContributionNet, x: float) -> float:
    """Evaluate one contribution net at a scalar input (inference: no dropout)."""
    if not np.isfinite(x):
        raise ModelError(f"non-finite input {x!r}")
    h = np.maximum(net.w1 * float(x) + net.b1, 0.0)
    return float(net.w2 @ h + net.b2)


@dataclass(frozen=True)
class EdgeMask:
    """Ablate source -> target: all p lags of nets[target][source][:] read as zero."""

    target: int
    source: int


@dataclass(frozen=True)
class NavarModel:
    """Grid of contribution nets plus per-target bias.

    Parameter arrays are indexed ``[target i, source j, lag l, hidden h]``;
    lag index l = 0 corresponds to time t-1. Instances are immutable; the
    trainer builds new arrays and freezes them here.
    """

    variables: tuple[str, ...]
    lags: int
    hidden: int
    w1: np.ndarray          # (N, N, p, H)
    b1: np.ndarray          # (N, N, p, H)
    w2: np.ndarray          # (N, N, p, H)
    b2: np.ndarray          # (N, N, p)
    target_bias: np.ndarray  # (N,)
    norm_stats: Optional[NormalizationStats] = None

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        N, p, H = len(self.variables), int(self.lags), int(self.hidden)
        shapes = {"w1": (N, N, p, H), "b1": (N, N, p, H), "w2": (N, N, p, H), "b2": (N, N, p), "target_bias": (N,)}
        for name, want in shapes.items():
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != want:
                raise ModelError(f"{name} has shape {arr.shape}, expected {want}")
            if not np.isfinite(arr).all():
                raise ModelError(f"non-finite parameters in {name}")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def n_variables(self) -> int:
        return len(self.variables)

    def net(self, target: int, source: int, lag: int) -> ContributionNet:
        """The univariate net for (target, source) at lag l (1-based lag)."""
        l = lag - 1
        return ContributionNet(
            w1=self.w1[target, source, l],
            b1=self.b1[target, source, l],
            w2=self.w2[target, source, l],
            b2=float(self.b2[target, source, l]),
        )

    def with_norm_stats(self, stats: NormalizationStats) -> "NavarModel":
        return replace(self, norm_stats=stats)


def contributions(model: NavarModel, inputs: np.ndarray) -> np.ndarray:
    """Contribution tensor f_ijl evaluated on a batch of lag windows.

    Parameters
    ----------
    model : NavarModel
    inputs : np.ndarray
        (W, p, N) lagged inputs in normalized units, ``inputs[w, l-1, j]``.

    Returns
    -------
    np.ndarray
        (W, N, N, p): entry [w, i, j, l] is the net (i, j, l+1) evaluated at
        ``inputs[w, l, j]``. Summing over (j, l) and adding ``target_bias``
        reproduces :func:`predict_batch` exactly.
    """
    X = np.asarray(inputs, dtype=np.float64)
    if X.ndim != 3 or X.shape[1:] != (model.lags, model.n_variables):
        raise ModelError(f"inputs shape {X.shape} does not match (W, p={model.lags}, N={model.n_variables})")
    W = X.shape[0]
    N, p, H = model.n_variables, model.lags, model.hidden
    out = np.empty((W, N, N, p))
    for s in range(0, W, _EVAL_CHUNK):
        e = min(s + _EVAL_CHUNK, W)
        x = X[s:e].transpose(2, 1, 0)  # (N, p, B) indexed [j, l, b]
        # pre[i, j, l, b, h] = w1[i,j,l,h] * x[j,l,b] + b1
        pre = model.w1[:, :, :, None, :] * x[None, :, :, :, None] + model.b1[:, :, :, None, :]
        np.maximum(pre, 0.0, out=pre)
        c = np.einsum("ijlbh,ijlh->ijlb", pre, model.w2) + model.b2[:, :, :, None]
        out[s:e] = c.transpose(3, 0, 1, 2)
    return out


def predict_batch(model: NavarModel, inputs: np.ndarray, mask: Optional[EdgeMask] = None) -> np.ndarray:
    """One-step predictions (W, N) for a batch of lag windows.

    With a mask, the (target, source) pair's contributions at every lag are
    treated as identically zero; all other components are untouched, so the
    masked prediction differs from the full one only in the masked target's
    coordinate, by exactly the summed masked contributions.
    """
    contrib = contributions(model, inputs)
    return predictions_from_contributions(model, contrib, mask=mask)


def predictions_from_contributions(
    model: NavarModel, contrib: np.ndarray, mask: Optional[EdgeMask] = None
) -> np.ndarray:
    """Reduce a (W, N, N, p) contribution tensor to (W, N) predictions."""
    yhat = contrib.sum(axis=(2, 3)) + model.target_bias[None, :]
    if mask is not None:
        _check_edge(model, mask)
        yhat[:, mask.target] -= contrib[:, mask.target, mask.source, :].sum(axis=1)
    return yhat


def predict(model: NavarModel, window: LagWindow, mask: Optional[EdgeMask] = None) -> np.ndarray:
    """One-step prediction (N,) for a single lag window, optionally edge-masked."""
    return predict_batch(model, window.inputs[None, :, :], mask=mask)[0]


def _check_edge(model: NavarModel, mask: EdgeMask) -> None:
    N = model.n_variables
    if not (0 <= mask.target < N and 0 <= mask.source < N):
        raise ModelError(f"edge ({mask.target}, {mask.source}) outside variable range 0..{N - 1}")


@dataclass(frozen=True)
class ContributionTable:
    """Per-(source, lag) contribution series for one target over a window set.

    ``values[w, j, l]`` is source j's lag-(l+1) contribution to the target in
    window w. Row sums plus the target bias reproduce the prediction.
    """

    target: int
    unit_indices: np.ndarray
    time_labels: np.ndarray
    values: np.ndarray  # (W, N, p)
    bias: float

    def row_sums(self) -> np.ndarray:
        return self.values.sum(axis=(1, 2)) + self.bias


def contribution_series(
    model: NavarModel,
    windows: Union[WindowSet, Sequence[LagWindow]],
    target: int,
) -> ContributionTable:
    """Exact additive decomposition of the target's predictions over windows.

    For an additive model this is the canonical per-feature attribution: each
    (source, lag) cell is the value of that net at the window's lagged input.
    """
    inputs, unit_idx, labels = _windows_arrays(windows)
    if len(inputs) == 0:
        raise ModelError("windows must be non-empty")
    if not (0 <= target < model.n_variables):
        raise ModelError(f"target {target} outside variable range")
    contrib = contributions(model, inputs)
    return ContributionTable(
        target=int(target),
        unit_indices=unit_idx,
        time_labels=labels,
        values=np.ascontiguousarray(contrib[:, target, :, :]),
        bias=float(model.target_bias[target]),
    )


@dataclass(frozen=True)
class CausalScoreMatrix:
    """N x N matrix of per-edge contribution variability scores.

    ``scores[i, j]`` aggregates over lags the temporal variance (or standard
    deviation) of source j's learned contribution to target i; rows are
    targets, columns are sources. Always >= 0.
    """

    variables: tuple[str, ...]
    scores: np.ndarray
    statistic: str = "variance"   # "variance" | "std"
    diagonal_policy: str = "raw"  # "raw" | "zeroed"

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        scores = np.ascontiguousarray(self.scores, dtype=np.float64)
        N = len(self.variables)
        if scores.shape != (N, N):
            raise ModelError(f"scores shape {scores.shape}, expected ({N}, {N})")
        if self.statistic not in ("variance", "std"):
            raise ModelError(f"unknown statistic {self.statistic!r}")
        if self.diagonal_policy not in ("raw", "zeroed"):
            raise ModelError(f"unknown diagonal policy {self.diagonal_policy!r}")
        if (scores < 0).any():
            raise ModelError("negative causal score")
        scores.flags.writeable = False
        object.__setattr__(self, "scores", scores)

    def to_csv(self, path) -> None:
        N = len(self.variables)
        lines = ["target," + ",".join(self.variables)]
        for i in range(N):
            lines.append(self.variables[i] + "," + ",".join(repr(float(x)) for x in self.scores[i]))
        Path(path).write_text("\n".join(lines) + "\n")

    def to_json_dict(self) -> dict:
        return {
            "variables": list(self.variables),
            "statistic": self.statistic,
            "diagonal_policy": self.diagonal_policy,
            "rows": "target",
            "columns": "source",
            "scores": [[float(x) for x in row] for row in self.scores],
        }

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")


def causal_scores(
    model: NavarModel,
    windows: Union[WindowSet, Sequence[LagWindow]],
    statistic: str = "variance",
    diagonal_policy: str = "raw",
) -> CausalScoreMatrix:
    """Score every directed pair by summed per-lag contribution variability.

    With ``statistic="variance"`` the (i, j) score is the sum over lags of the
    population variance across windows of net (i, j, l)'s contribution;
    ``"std"`` sums standard deviations instead. Needs >= 2 windows.
    """
    inputs, _, _ = _windows_arrays(windows)
    if len(inputs) < 2:
        raise ModelError(f"need >= 2 windows for a variance, got {len(inputs)}")
    contrib = contributions(model, inputs)  # (W, N, N, p)
    per_lag_var = contrib.var(axis=0)       # population variance across windows
    if statistic == "variance":
        scores = per_lag_var.sum(axis=2)
    elif statistic == "std":
        scores = np.sqrt(per_lag_var).sum(axis=2)
    else:
        raise ModelError(f"unknown statistic {statistic!r}")
    if diagonal_policy == "zeroed":
        scores = scores.copy()
        np.fill_diagonal(scores, 0.0)
    elif diagonal_policy != "raw":
        raise ModelError(f"unknown diagonal policy {diagonal_policy!r}")
    return CausalScoreMatrix(
        variables=model.variables, scores=scores, statistic=statistic, diagonal_policy=diagonal_policy
    )


def _windows_arrays(windows: Union[WindowSet, Sequence[LagWindow]]):
    if isinstance(windows, WindowSet):
        return windows.inputs, windows.unit_indices, windows.time_labels
    wins = list(windows)
    if not wins:
        return np.empty((0, 0, 0)), np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp)
    inputs = np.stack([w.inputs for w in wins])
    units = np.array([w.unit for w in wins], dtype=np.intp)
    labels = np.array([w.target_time for w in wins], dtype=np.intp)
    return inputs, units, labels


def save_checkpoint(model: NavarModel, path, extra: Optional[dict] = None) -> None:
    """Serialize a model to a self-describing JSON document.

    Floats are written in shortest round-trip decimal form, so saving and
    reloading reproduces every parameter bit-exactly and identical models
    produce byte-identical files.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "variables": list(model.variables),
        "lags": model.lags,
        "hidden": model.hidden,
        "target_bias": model.target_bias.tolist(),
        "w1": model.w1.tolist(),
        "b1": model.b1.tolist(),
        "w2": model.w2.tolist(),
        "b2": model.b2.tolist(),
        "normalization": model.norm_stats.to_json_dict() if model.norm_stats is not None else None,
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path) -> NavarModel:
    """Load a model checkpoint written by :func:`save_checkpoint`."""
    path = Path(path)
    if not path.exists():
        raise ModelError(f"checkpoint not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"unreadable checkpoint {path}: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ModelError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {doc.get('format_version')}")
    stats = doc.get("normalization")
    return NavarModel(
        variables=tuple(doc["variables"]),
        lags=int(doc["lags"]),
        hidden=int(doc["hidden"]),
        w1=np.array(doc["w1"]),
        b1=np.array(doc["b1"]),
        w2=np.array(doc["w2"]),
        b2=np.array(doc["b2"]),
        target_bias=np.array(doc["target_bias"]),
        norm_stats=NormalizationStats.from_json_dict(stats) if stats is not None else None,
    )
