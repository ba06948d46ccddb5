"""Training for the additive VAR model: manual backprop, Adam, dropout, sparsity.

The objective is mean-over-batch, summed-over-targets squared error plus an
l1 penalty on the *outputs* of the contribution nets (batch mean of |f(x)|
per net, summed over nets, scaled by lambda). Gradients are computed by hand;
:func:`gradient_check` verifies them against central finite differences.

The hot loop runs all N*N*p nets as one (M, B, H) tensor problem. Master
weights, Adam state and every reported number are float64; the per-batch
workspace defaults to float32, which changes nothing observable beyond
rounding in the learned weights (inference is always float64).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .model import ModelError, NavarModel, contributions
from .panel import (
    LagWindow,
    NormalizationStats,
    PanelDataset,
    PanelError,
    SplitSpec,
    WindowSet,
    apply_normalization,
    enumerate_windows,
    fit_normalization,
)


class DivergenceError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters; defaults are the reference values used everywhere.

    ``precision`` selects the minibatch workspace dtype only; master weights,
    Adam state, loss reports and all inference stay float64.
    """

    seed: int
    lags: int = 8
    hidden: int = 32
    dropout: float = 0.10
    weight_decay: float = 1e-3
    lambda_sparsity: float = 0.15
    learning_rate: float = 3e-4
    batch_size: int = 128
    epochs: int = 600
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    precision: str = "float32"  # workspace dtype: "float32" | "float64"

    def __post_init__(self):
        if self.lags < 1:
            raise ValueError(f"lags must be >= 1, got {self.lags}")
        if self.hidden < 1:
            raise ValueError(f"hidden must be >= 1, got {self.hidden}")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        for name in ("weight_decay", "lambda_sparsity"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("learning_rate", "batch_size", "epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.seed is None:
            raise ValueError("seed is mandatory (no wall-clock default)")

    @property
    def workspace_dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


@dataclass(frozen=True)
class LossReport:
    """Per-epoch training diagnostics.

    ``train_mse`` is mean over windows, summed over targets; ``total_loss``
    equals ``train_mse + lambda * sparsity_term`` exactly. Residual stats are
    accumulated from the minibatch forward passes (dropout active, as seen
    by the optimizer), per target.
    """

    epoch: int
    train_mse: float
    sparsity_term: float
    total_loss: float
    residual_mean: np.ndarray
    residual_var: np.ndarray


@dataclass
class Gradients:
    """Gradients in model-parameter layout."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    target_bias: np.ndarray


def init_model(
    config: TrainConfig,
    n_variables: int,
    rng_seed: int,
    variables: Optional[Sequence[str]] = None,
    norm_stats: Optional[NormalizationStats] = None,
) -> NavarModel:
    """Freshly initialized model: He-uniform w1 (fan-in 1), uniform w2 scaled
    by fan-in H, all biases zero. Fully reproducible from the seed."""
    N, p, H = int(n_variables), config.lags, config.hidden
    if N < 2:
        raise ModelError(f"need at least 2 variables, got {N}")
    if variables is None:
        variables = tuple(f"x{i}" for i in range(N))
    rng = np.random.default_rng(rng_seed)
    lim1 = np.sqrt(6.0)       # sqrt(6 / fan_in), scalar input
    lim2 = np.sqrt(6.0 / H)
    w1 = rng.uniform(-lim1, lim1, size=(N, N, p, H))
    w2 = rng.uniform(-lim2, lim2, size=(N, N, p, H))
    return NavarModel(
        variables=tuple(variables),
        lags=p,
        hidden=H,
        w1=w1,
        b1=np.zeros((N, N, p, H)),
        w2=w2,
        b2=np.zeros((N, N, p)),
        target_bias=np.zeros(N),
        norm_stats=norm_stats,
    )


# ---------------------------------------------------------------------------
# batched forward/backward kernel
# ---------------------------------------------------------------------------


class _Workspace:
    """Reusable per-batch buffers, keyed by (M, B, H, dtype)."""

    def __init__(self):
        self._cache: dict = {}

    def get(self, M: int, B: int, H: int, dtype) -> dict:
        key = (M, B, H, np.dtype(dtype).name)
        buf = self._cache.get(key)
        if buf is None:
            buf = {
                "pre": np.empty((M, B, H), dtype=dtype),
                "dhid": np.empty((M, B, H), dtype=dtype),
                "kept": np.empty((M, B, H), dtype=bool),
                "contrib": np.empty((M, B), dtype=dtype),
                "contrib3": np.empty((M, B, 1), dtype=dtype),
                "gc": np.empty((M, B), dtype=dtype),
                "xmb1": np.empty((M, 2, B), dtype=dtype),
                "dw12": np.empty((M, 2, H), dtype=dtype),
                "dw2": np.empty((M, 1, H), dtype=dtype),
            }
            buf["xmb1"][:, 1, :] = 1.0  # constant ones row folds db1 into the dw1 matmul
            self._cache[key] = buf
        return buf


@dataclass
class _Params:
    """Mutable float64 master parameters (trainer-internal)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    target_bias: np.ndarray

    @classmethod
    def from_model(cls, model: NavarModel) -> "_Params":
        return cls(
            w1=model.w1.copy(),
            b1=model.b1.copy(),
            w2=model.w2.copy(),
            b2=model.b2.copy(),
            target_bias=model.target_bias.copy(),
        )


def _kernel(
    params: _Params,
    N: int,
    p: int,
    H: int,
    X: np.ndarray,  # (B, p, N) float64
    Y: np.ndarray,  # (B, N) float64
    lam: float,
    dropout: float,
    dropout_rng: Optional[np.random.Generator],
    dtype,
    ws: _Workspace,
    want_grads: bool = True,
):
    """One batch forward (and optionally backward) pass.

    Returns (mse, sparsity, residuals (N, B) float64, grads or None); the
    loss pieces are reduced in float64 regardless of workspace dtype.
    """
    B = X.shape[0]
    M = N * N * p
    buf = ws.get(M, B, H, dtype)
    drop_on = dropout > 0.0 and dropout_rng is not None
    keep = 1.0 - dropout
    n_units = M * B * H

    w1 = params.w1.reshape(M, H).astype(dtype, copy=False)
    b1 = params.b1.reshape(M, H).astype(dtype, copy=False)
    w2 = params.w2.reshape(M, H).astype(dtype, copy=False)
    b2 = params.b2.reshape(M).astype(dtype, copy=False)
    bias = params.target_bias.astype(dtype, copy=False)

    # xmb[m, b] = X[b, lag(m), source(m)]; the target axis replicates (j, l).
    xt = np.ascontiguousarray(X.transpose(2, 1, 0), dtype=dtype)  # (N, p, B)
    xmb = buf["xmb1"][:, 0, :]
    xmb[...] = np.broadcast_to(xt[None], (N, N, p, B)).reshape(M, B)

    pre = buf["pre"]
    np.multiply(w1[:, None, :], xmb[:, :, None], out=pre)
    pre += b1[:, None, :]
    np.maximum(pre, 0.0, out=pre)  # pre now holds the hidden activations
    if drop_on:
        # Inverted dropout; the 1/keep scale is folded into the small tensors
        # (w2 on the forward side, gc on the backward side), never into the
        # (M, B, H) workspace. Masks come from raw 16-bit generator words
        # (drop probability quantized to 1/65536, ~6e-5 relative at 0.10),
        # which is several times cheaper than float conversion.
        words = dropout_rng.bit_generator.random_raw((n_units + 3) // 4)
        u16 = words.view(np.uint16)[:n_units].reshape(M, B, H)
        np.greater_equal(u16, np.uint16(round(dropout * 65536.0)), out=buf["kept"])
        pre *= buf["kept"]

    w2_eff = w2 * dtype(1.0 / keep) if drop_on else w2
    np.matmul(pre, w2_eff[:, :, None], out=buf["contrib3"])
    contrib = buf["contrib"]
    np.add(buf["contrib3"][:, :, 0], b2[:, None], out=contrib)

    yhat = contrib.reshape(N, N * p, B).sum(axis=1)
    yhat += bias[:, None]
    resid = (yhat.astype(np.float64) - Y.T)  # (N, B) float64
    mse = float(np.einsum("ib,ib->", resid, resid)) / B
    sparsity = float(np.abs(contrib).mean(axis=1, dtype=np.float64).sum())
    if not (np.isfinite(mse) and np.isfinite(sparsity)):
        raise DivergenceError("non-finite loss")
    if not want_grads:
        return mse, sparsity, resid, None

    g = ((2.0 / B) * resid).astype(dtype)  # dL/dyhat, (N, B)
    gc = buf["gc"]
    gc[...] = np.broadcast_to(g[:, None, :], (N, N * p, B)).reshape(M, B)
    if lam != 0.0:
        # d/dcontrib of lam * mean_b |contrib|; sign(0) = 0 keeps exact zeros stationary.
        gc += dtype(lam / B) * np.sign(contrib)

    db2 = gc.sum(axis=1, dtype=np.float64)
    np.matmul(gc[:, None, :], pre, out=buf["dw2"])
    scale = 1.0 / keep if drop_on else 1.0
    dw2 = buf["dw2"][:, 0, :].astype(np.float64) * scale
    if drop_on:
        gc *= dtype(scale)

    dhid = buf["dhid"]
    np.multiply(gc[:, :, None], w2[:, None, :], out=dhid)
    # Backward mask: hidden > 0 already encodes relu'(pre) and the dropout
    # mask jointly (activations are zero exactly where either gate closed).
    np.greater(pre, 0.0, out=buf["kept"])
    dhid *= buf["kept"]
    np.matmul(buf["xmb1"], dhid, out=buf["dw12"])

    grads = Gradients(
        w1=buf["dw12"][:, 0, :].astype(np.float64).reshape(N, N, p, H),
        b1=buf["dw12"][:, 1, :].astype(np.float64).reshape(N, N, p, H),
        w2=dw2.reshape(N, N, p, H),
        b2=db2.reshape(N, N, p),
        target_bias=g.sum(axis=1, dtype=np.float64),
    )
    return mse, sparsity, resid, grads


def _batch_arrays(batch: Union[WindowSet, Sequence[LagWindow]]):
    if isinstance(batch, WindowSet):
        return batch.inputs, batch.targets
    wins = list(batch)
    if not wins:
        raise ValueError("batch must be non-empty")
    return np.stack([w.inputs for w in wins]), np.stack([w.target for w in wins])


def batch_loss_and_grads(
    model: NavarModel,
    batch: Union[WindowSet, Sequence[LagWindow]],
    config: TrainConfig,
    dropout_rng: Optional[np.random.Generator] = None,
    dtype=np.float64,
) -> tuple[float, Gradients]:
    """Loss and full manual gradients for one batch of windows.

    Dropout is applied only when a ``dropout_rng`` is supplied and
    ``config.dropout > 0``; pass None for the deterministic loss used in
    gradient checks. Loss = (1/B) sum_{b,i} resid^2 + lambda * sum_nets
    mean_b |f(x)|; the weight-decay term is an optimizer-side update, not
    part of this loss.
    """
    X, Y = _batch_arrays(batch)
    if X.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    N, p, H = model.n_variables, model.lags, model.hidden
    if X.shape[1:] != (p, N):
        raise ModelError(f"batch inputs shape {X.shape} does not match model (p={p}, N={N})")
    mse, sparsity, _, grads = _kernel(
        _Params.from_model(model), N, p, H,
        np.asarray(X, dtype=np.float64), np.asarray(Y, dtype=np.float64),
        config.lambda_sparsity, config.dropout, dropout_rng, dtype, _Workspace(),
    )
    return mse + config.lambda_sparsity * sparsity, grads


def batch_loss(
    model: NavarModel,
    batch: Union[WindowSet, Sequence[LagWindow]],
    config: TrainConfig,
) -> float:
    """Deterministic (dropout-off) loss only; used by the finite-difference check."""
    X, Y = _batch_arrays(batch)
    mse, sparsity, _, _ = _kernel(
        _Params.from_model(model), model.n_variables, model.lags, model.hidden,
        np.asarray(X, dtype=np.float64), np.asarray(Y, dtype=np.float64),
        config.lambda_sparsity, 0.0, None, np.float64, _Workspace(), want_grads=False,
    )
    return mse + config.lambda_sparsity * sparsity


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay
# ---------------------------------------------------------------------------


class _Adam:
    """Adam on the float64 master parameters; decoupled weight decay touches
    w1/w2 only, never b1/b2/target_bias."""

    def __init__(self, params: _Params, config: TrainConfig):
        self.cfg = config
        self.t = 0
        self.m = {k: np.zeros_like(getattr(params, k)) for k in ("w1", "b1", "w2", "b2", "target_bias")}
        self.v = {k: np.zeros_like(getattr(params, k)) for k in ("w1", "b1", "w2", "b2", "target_bias")}

    def step(self, params: _Params, grads: Gradients) -> None:
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for name in ("w1", "b1", "w2", "b2", "target_bias"):
            p = getattr(params, name)
            g = getattr(grads, name)
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            if name in ("w1", "w2") and cfg.weight_decay > 0.0:
                update = update + cfg.weight_decay * p
            p -= cfg.learning_rate * update


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def train(
    data: PanelDataset,
    split: SplitSpec,
    config: TrainConfig,
    on_epoch: Optional[Callable[[LossReport], None]] = None,
) -> tuple[NavarModel, list[LossReport]]:
    """Fit a model on the pooled panel, train range only.

    Normalization stats are fit on the train range and applied everywhere;
    windows are shuffled uniformly across units each epoch (seeded). Returns
    the final model (with stats attached) and one LossReport per epoch.
    Raises DivergenceError with the epoch/batch if the loss goes non-finite.
    """
    stats = fit_normalization(data, split)
    normalized = apply_normalization(data, stats)
    windows = enumerate_windows(normalized, config.lags, split.train_range)
    W = len(windows)
    if W < 1:
        raise PanelError(
            f"train range {split.train_range} with p={config.lags} yields no usable windows"
        )
    seeds = np.random.SeedSequence(config.seed).generate_state(3)
    model0 = init_model(config, data.n_variables, int(seeds[0]), variables=data.variables)
    params = _Params.from_model(model0)
    shuffle_rng = np.random.default_rng(int(seeds[1]))
    dropout_rng = np.random.default_rng(int(seeds[2])) if config.dropout > 0 else None

    N, p, H = data.n_variables, config.lags, config.hidden
    dtype = config.workspace_dtype
    ws = _Workspace()
    adam = _Adam(params, config)
    X_all = windows.inputs
    Y_all = windows.targets
    B = min(config.batch_size, W)

    reports: list[LossReport] = []
    for epoch in range(1, config.epochs + 1):
        perm = shuffle_rng.permutation(W)
        mse_sum = 0.0
        sp_sum = 0.0
        r_sum = np.zeros(N)
        r_sq = np.zeros(N)
        for start in range(0, W, B):
            idx = perm[start : start + B]
            try:
                mse, sp, resid, grads = _kernel(
                    params, N, p, H, X_all[idx], Y_all[idx],
                    config.lambda_sparsity, config.dropout, dropout_rng, dtype, ws,
                )
            except DivergenceError as exc:
                raise DivergenceError(
                    f"training diverged at epoch {epoch}, batch {start // B}: {exc}"
                ) from None
            adam.step(params, grads)
            nb = len(idx)
            mse_sum += mse * nb
            sp_sum += sp * nb
            r_sum += resid.sum(axis=1)
            r_sq += (resid * resid).sum(axis=1)
        train_mse = mse_sum / W
        sparsity = sp_sum / W
        r_mean = r_sum / W
        report = LossReport(
            epoch=epoch,
            train_mse=train_mse,
            sparsity_term=sparsity,
            total_loss=train_mse + config.lambda_sparsity * sparsity,
            residual_mean=r_mean,
            residual_var=r_sq / W - r_mean**2,
        )
        reports.append(report)
        if on_epoch is not None:
            on_epoch(report)

    model = NavarModel(
        variables=data.variables,
        lags=p,
        hidden=H,
        w1=params.w1,
        b1=params.b1,
        w2=params.w2,
        b2=params.b2,
        target_bias=params.target_bias,
        norm_stats=stats,
    )
    model = center_contributions(model, X_all)
    return model, reports


def center_contributions(model: NavarModel, inputs: np.ndarray) -> NavarModel:
    """Canonicalize the additive decomposition against a reference window set.

    Constants are not identified across the components of an additive model:
    any net can trade a level against the target bias without changing
    predictions. This moves each net's mean contribution over ``inputs`` into
    ``target_bias`` (the bias absorbs the offsets), so every net is centered
    there. Predictions and causal scores are unchanged; edge masking then
    removes only the edge's variation, not a share of the global intercept.
    """
    means = contributions(model, inputs).mean(axis=0)  # (N, N, p)
    return NavarModel(
        variables=model.variables,
        lags=model.lags,
        hidden=model.hidden,
        w1=model.w1,
        b1=model.b1,
        w2=model.w2,
        b2=model.b2 - means,
        target_bias=model.target_bias + means.sum(axis=(1, 2)),
        norm_stats=model.norm_stats,
    )


def write_loss_csv(reports: Sequence[LossReport], path) -> None:
    """Loss history as ``epoch,train_mse,sparsity,total`` rows."""
    lines = ["epoch,train_mse,sparsity,total"]
    for r in reports:
        lines.append(f"{r.epoch},{r.train_mse!r},{r.sparsity_term!r},{r.total_loss!r}")
    from pathlib import Path

    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradientCheckReport:
    """Analytic-vs-numeric gradient comparison over every parameter."""

    max_rel_error: float
    mean_rel_error: float
    n_checked: int
    n_excluded_kink: int
    worst_param: str


def gradient_check(
    model: NavarModel,
    windows: Union[WindowSet, Sequence[LagWindow]],
    config: TrainConfig,
    step: float = 1e-5,
) -> GradientCheckReport:
    """Compare analytic gradients to central finite differences, parameter-wise.

    Dropout is disabled (the loss must be deterministic for differencing).
    Parameters whose loss is non-smooth at the evaluation point are excluded
    and counted: w1/b1 entries with a hidden pre-activation within
    ``10 * step * (1 + max|x|)`` of a ReLU kink, and (when lambda > 0) all
    parameters of nets whose output comes within ``50 * step`` of the
    absolute-value kink.
    """
    X, Y = _batch_arrays(windows)
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    N, p, H = model.n_variables, model.lags, model.hidden
    M = N * N * p
    params = _Params.from_model(model)
    ws = _Workspace()
    lam = config.lambda_sparsity

    def loss_at(pp: _Params) -> float:
        mse, sp, _, _ = _kernel(pp, N, p, H, X, Y, lam, 0.0, None, np.float64, ws, want_grads=False)
        return mse + lam * sp

    _, _, _, grads = _kernel(params, N, p, H, X, Y, lam, 0.0, None, np.float64, ws)

    # Locate kinks at the unperturbed point.
    B = X.shape[0]
    xt = np.ascontiguousarray(X.transpose(2, 1, 0))
    xmb = np.broadcast_to(xt[None], (N, N, p, B)).reshape(M, B)
    pre = params.w1.reshape(M, H)[:, None, :] * xmb[:, :, None] + params.b1.reshape(M, H)[:, None, :]
    hid = np.maximum(pre, 0.0)
    contrib = np.einsum("mbh,mh->mb", hid, params.w2.reshape(M, H)) + params.b2.reshape(M)[:, None]
    pre_margin = 10.0 * step * (1.0 + float(np.abs(X).max(initial=0.0)))
    near_relu = (np.abs(pre) < pre_margin).any(axis=1)  # (M, H)
    near_abs = lam > 0 and (np.abs(contrib) < 50.0 * step).any(axis=1)  # (M,) or False

    rel_errors = []
    n_excluded = 0
    worst = ("", 0.0)

    def check(name: str, arr: np.ndarray, grad: np.ndarray, flat_index: int, excluded: bool):
        nonlocal n_excluded, worst
        if excluded:
            n_excluded += 1
            return
        flat = arr.reshape(-1)
        orig = flat[flat_index]
        flat[flat_index] = orig + step
        up = loss_at(params)
        flat[flat_index] = orig - step
        down = loss_at(params)
        flat[flat_index] = orig
        numeric = (up - down) / (2.0 * step)
        analytic = grad.reshape(-1)[flat_index]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        rel_errors.append(rel)
        if rel > worst[1]:
            worst = (f"{name}[{flat_index}]", rel)

    near_abs_m = near_abs if lam > 0 else np.zeros(M, dtype=bool)
    for name in ("w1", "b1", "w2", "b2", "target_bias"):
        arr = getattr(params, name)
        grad = getattr(grads, name)
        n_items = arr.size
        for k in range(n_items):
            if name in ("w1", "b1"):
                m, h = divmod(k, H)
                excluded = bool(near_relu[m, h]) or bool(near_abs_m[m])
            elif name in ("w2", "b2"):
                m = k // H if name == "w2" else k
                excluded = bool(near_abs_m[m])
            else:
                excluded = False
            check(name, arr, grad, k, excluded)

    rel_arr = np.array(rel_errors) if rel_errors else np.zeros(1)
    return GradientCheckReport(
        max_rel_error=float(rel_arr.max()),
        mean_rel_error=float(rel_arr.mean()),
        n_checked=len(rel_errors),
        n_excluded_kink=n_excluded,
        worst_param=worst[0],
    )
