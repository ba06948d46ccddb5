"""Batch command-line interface: train, scores, test, synth, report.

Every subcommand is non-interactive and idempotent: identical inputs and
seed produce byte-identical outputs. Each written file gains a ``.meta.json``
sidecar recording the resolved-config hash, seed and format version (never a
timestamp). Exit codes: 0 ok, 2 data error, 3 numeric error, 4 config error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
from pathlib import Path
from typing import Optional

from . import __version__
from .model import (
    EdgeMask,
    ModelError,
    causal_scores,
    load_checkpoint,
    save_checkpoint,
)
from .necessity import (
    NecessityError,
    build_differential,
    dm_test,
    forecast_losses,
    screen_all_edges,
    EdgeScreenReport,
    EdgeScreenRow,
)
from .panel import (
    PanelError,
    PanelSchema,
    SplitSpec,
    apply_normalization,
    enumerate_windows,
    load_panel_csv,
    write_panel_csv,
)
from .synth import DGPConfig, GroundTruthGraph, SynthError, evaluate_recovery, generate, oracle_necessity
from .training import DivergenceError, TrainConfig, train, write_loss_csv

EXIT_OK = 0
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_CONFIG = 4

SIDECAR_FORMAT_VERSION = 1

DEFAULT_CONFIG = {
    "data": {"path": None, "unit_column": "unit", "time_column": "time", "variables": None},
    "split": {"train": None, "validation": None},
    "train": {
        "lags": 8,
        "hidden": 32,
        "dropout": 0.10,
        "weight_decay": 1e-3,
        "lambda_sparsity": 0.15,
        "learning_rate": 3e-4,
        "batch_size": 128,
        "epochs": 600,
        "precision": "float32",
    },
    "scores": {"statistic": "variance", "diagonal": "zeroed", "window_range": "train"},
    "test": {"alpha": 0.05, "bandwidth": "auto", "correction": "benjamini_hochberg", "workers": 1},
    "seed": None,
    "output_dir": ".",
}


class ConfigError(ValueError):
    """Raised for unusable configuration (exit code 4)."""


def _load_config_file(path: Optional[str]) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        return cfg
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        user = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError(f"config file {p} must contain a JSON object")
    for section, value in user.items():
        if section not in cfg:
            raise ConfigError(f"unknown config section {section!r}")
        if isinstance(cfg[section], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {section!r} must be an object")
            for key, v in value.items():
                if key not in cfg[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                cfg[section][key] = v
        else:
            cfg[section] = value
    return cfg


def _apply_overrides(cfg: dict, args: argparse.Namespace) -> dict:
    """Per-field CLI flags win over the config file."""
    amap = vars(args)

    def override(section, key, flag, transform=lambda x: x):
        val = amap.get(flag)
        if val is not None:
            if section is None:
                cfg[key] = transform(val)
            else:
                cfg[section][key] = transform(val)

    override("data", "path", "data")
    override("data", "unit_column", "unit_column")
    override("data", "time_column", "time_column")
    override("data", "variables", "variables", lambda s: [v.strip() for v in s.split(",")])
    override("split", "train", "train_range", lambda v: [int(v[0]), int(v[1])])
    override("split", "validation", "validation_range", lambda v: [int(v[0]), int(v[1])])
    for key in ("lags", "hidden", "dropout", "weight_decay", "lambda_sparsity",
                "learning_rate", "batch_size", "epochs", "precision"):
        override("train", key, key)
    override("scores", "statistic", "statistic")
    override("scores", "diagonal", "diagonal")
    override("scores", "window_range", "score_range")
    override("test", "alpha", "alpha")
    override("test", "bandwidth", "bandwidth", _parse_bandwidth)
    override("test", "correction", "correction")
    override("test", "workers", "workers")
    override(None, "seed", "seed")
    override(None, "output_dir", "output_dir")
    return cfg


def _parse_bandwidth(v):
    if isinstance(v, int):
        return v
    if v == "auto":
        return "auto"
    try:
        return int(v)
    except (TypeError, ValueError):
        raise ConfigError(f"bandwidth must be 'auto' or an integer, got {v!r}") from None


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _require(cfg: dict, dotted: str):
    section, _, key = dotted.partition(".")
    value = cfg[section][key] if key else cfg[section]
    if value is None:
        raise ConfigError(f"missing required setting {dotted!r} (config file or CLI flag)")
    return value


def _write_sidecar(path: Path, cfg: dict, command: str) -> None:
    meta = {
        "format_version": SIDECAR_FORMAT_VERSION,
        "tool": "navarcast",
        "tool_version": __version__,
        "command": command,
        "seed": cfg.get("seed"),
        "config_sha256": _config_hash(cfg),
    }
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _schema(cfg: dict) -> PanelSchema:
    d = cfg["data"]
    variables = tuple(d["variables"]) if d["variables"] else None
    return PanelSchema(unit_column=d["unit_column"], time_column=d["time_column"], variables=variables)


def _split(cfg: dict) -> SplitSpec:
    tr = _require(cfg, "split.train")
    va = _require(cfg, "split.validation")
    return SplitSpec(train_range=(int(tr[0]), int(tr[1])), validation_range=(int(va[0]), int(va[1])))


def _train_config(cfg: dict) -> TrainConfig:
    seed = _require(cfg, "seed")
    t = cfg["train"]
    try:
        return TrainConfig(
            seed=int(seed),
            lags=int(t["lags"]),
            hidden=int(t["hidden"]),
            dropout=float(t["dropout"]),
            weight_decay=float(t["weight_decay"]),
            lambda_sparsity=float(t["lambda_sparsity"]),
            learning_rate=float(t["learning_rate"]),
            batch_size=int(t["batch_size"]),
            epochs=int(t["epochs"]),
            precision=str(t["precision"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _score_windows(model, data, split, cfg):
    normalized = apply_normalization(data, model.norm_stats)
    which = cfg["scores"]["window_range"]
    if which == "train":
        rng = split.train_range
    elif which == "validation":
        rng = split.validation_range
    elif which == "all":
        rng = None
    else:
        raise ConfigError(f"scores.window_range must be train|validation|all, got {which!r}")
    return enumerate_windows(normalized, model.lags, rng)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(cfg: dict, out_dir: Path) -> int:
    data = load_panel_csv(_require(cfg, "data.path"), _schema(cfg))
    split = _split(cfg)
    tc = _train_config(cfg)
    loss_path = out_dir / "loss.csv"
    ckpt_path = out_dir / "checkpoint.json"
    model, reports = train(data, split, tc)
    write_loss_csv(reports, loss_path)
    save_checkpoint(model, ckpt_path, extra={"config_sha256": _config_hash(cfg)})
    _write_sidecar(ckpt_path, cfg, "train")
    _write_sidecar(loss_path, cfg, "train")
    final = reports[-1]
    print(f"trained {tc.epochs} epochs; final mse {final.train_mse:.6g}, total {final.total_loss:.6g}")
    print(f"checkpoint: {ckpt_path}")
    return EXIT_OK


def cmd_scores(cfg: dict, out_dir: Path, checkpoint: str) -> int:
    model = load_checkpoint(checkpoint)
    data = load_panel_csv(_require(cfg, "data.path"), _schema(cfg))
    split = _split(cfg)
    windows = _score_windows(model, data, split, cfg)
    matrix = causal_scores(
        model, windows,
        statistic=cfg["scores"]["statistic"],
        diagonal_policy=cfg["scores"]["diagonal"],
    )
    csv_path = out_dir / "scores.csv"
    json_path = out_dir / "scores.json"
    matrix.to_csv(csv_path)
    matrix.save_json(json_path)
    _write_sidecar(csv_path, cfg, "scores")
    _write_sidecar(json_path, cfg, "scores")
    print(f"score matrix ({matrix.statistic}, diagonal {matrix.diagonal_policy}): {csv_path}")
    return EXIT_OK


def cmd_test(cfg: dict, out_dir: Path, checkpoint: str, edge: Optional[tuple[str, str]], all_edges: bool) -> int:
    model = load_checkpoint(checkpoint)
    data = load_panel_csv(_require(cfg, "data.path"), _schema(cfg))
    split = _split(cfg)
    tcfg = cfg["test"]
    windows = _score_windows(model, data, split, cfg)
    matrix = causal_scores(
        model, windows,
        statistic=cfg["scores"]["statistic"],
        diagonal_policy=cfg["scores"]["diagonal"],
    )
    if all_edges:
        report = screen_all_edges(
            model, data, split, scores=matrix,
            correction=tcfg["correction"], alpha=float(tcfg["alpha"]),
            bandwidth=_parse_bandwidth(tcfg["bandwidth"]), workers=int(tcfg["workers"]),
        )
    else:
        ti = model.variables.index(edge[0]) if edge[0] in model.variables else None
        si = model.variables.index(edge[1]) if edge[1] in model.variables else None
        if ti is None or si is None:
            raise ConfigError(f"--edge names must be among {list(model.variables)}")
        if ti == si:
            raise ConfigError("self-edges are not tested")
        mask = EdgeMask(target=ti, source=si)
        full = forecast_losses(model, data, split, target=ti)
        masked = forecast_losses(model, data, split, target=ti, mask=mask)
        series = build_differential(full, masked, mask)
        result = dm_test(series, alpha=float(tcfg["alpha"]), bandwidth=_parse_bandwidth(tcfg["bandwidth"]))
        row = EdgeScreenRow(
            target=ti, source=si,
            target_name=model.variables[ti], source_name=model.variables[si],
            score=float(matrix.scores[ti, si]),
            mean_loss_full=float(full.values.mean()),
            mean_loss_masked=float(masked.values.mean()),
            mean_diff=result.mean_diff,
            dm_stat=result.dm_stat,
            p_value=result.p_value,
            p_adjusted=result.p_value if not result.degenerate else None,  # m = 1
            necessary=result.necessary,
            degenerate=result.degenerate,
            n_obs=result.n_obs,
            warning=result.warning,
        )
        report = EdgeScreenReport(
            rows=(row,), correction="none", alpha=float(tcfg["alpha"]),
            bandwidth=_parse_bandwidth(tcfg["bandwidth"]),
        )
    csv_path = out_dir / "necessity.csv"
    json_path = out_dir / "necessity.json"
    report.to_csv(csv_path)
    report.save_json(json_path)
    _write_sidecar(csv_path, cfg, "test")
    _write_sidecar(json_path, cfg, "test")
    n_nec = sum(r.necessary for r in report.rows)
    print(f"tested {len(report.rows)} edge(s); {n_nec} forecast-necessary at alpha={tcfg['alpha']}")
    print(f"report: {csv_path}")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace, cfg: dict, out_dir: Path) -> int:
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None:
        raise ConfigError("synth requires --seed")
    try:
        dgp = DGPConfig(
            regime=args.regime,
            n_variables=args.n_variables,
            n_units=args.n_units,
            n_periods=args.n_periods,
            noise_std=args.noise_std,
            persistence=args.persistence,
            redundancy_corr=args.redundancy_corr,
            seed=int(seed),
            n_cross_edges=args.n_cross_edges,
            max_lag=args.max_lag,
            cross_coef=args.cross_coef,
            burn_in=args.burn_in,
        )
    except SynthError as exc:
        raise ConfigError(str(exc)) from exc
    cfg = dict(cfg)
    cfg["seed"] = int(seed)
    cfg["dgp"] = {k: getattr(dgp, k) for k in dgp.__dataclass_fields__}
    data, graph = generate(dgp)
    panel_path = out_dir / "panel.csv"
    graph_path = out_dir / "graph.json"
    write_panel_csv(data, panel_path)
    graph.save_json(graph_path)
    _write_sidecar(panel_path, cfg, "synth")
    _write_sidecar(graph_path, cfg, "synth")
    print(f"generated {dgp.regime} panel: {data.n_units} units x {data.n_periods} periods x {data.n_variables} vars")
    print(f"panel: {panel_path}\ngraph: {graph_path}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace, cfg: dict, out_dir: Path) -> int:
    path = Path(args.necessity)
    if not path.exists():
        raise PanelError(f"necessity report not found: {path}")
    doc = json.loads(path.read_text())
    rows = doc["rows"]
    top = rows[: args.top] if args.top else rows
    fmt = "{:<14} {:<14} {:>12} {:>12} {:>10} {:>12} {:>12} {:>6}"
    print(fmt.format("target", "source", "score", "mean_diff", "dm_stat", "p_value", "p_adjusted", "nec?"))
    for r in top:
        print(
            fmt.format(
                str(r["target"])[:14],
                str(r["source"])[:14],
                _fmt_num(r["navar_score"]),
                _fmt_num(r["mean_diff"]),
                _fmt_num(r["dm_stat"], "{:.4f}"),
                _fmt_num(r["p_value"]),
                _fmt_num(r["p_adjusted"]),
                "Yes" if r["necessary"] else ("deg" if r.get("degenerate") else "No"),
            )
        )
    n_nec = sum(1 for r in rows if r["necessary"])
    print(f"\n{len(rows)} edges, {n_nec} forecast-necessary "
          f"(correction={doc.get('correction')}, alpha={doc.get('alpha')})")
    if args.oracle:
        graph = GroundTruthGraph.load_json(args.oracle)
        report = _report_from_json(doc)
        metrics = evaluate_recovery(report, oracle_necessity(graph))
        print(
            f"recovery vs oracle: AUROC {metrics.auroc:.4f}, "
            f"precision {metrics.precision:.4f}, recall {metrics.recall:.4f}"
        )
        if args.metrics_out:
            out = Path(args.metrics_out)
            out.write_text(json.dumps(metrics.to_json_dict(), indent=2, sort_keys=True) + "\n")
            _write_sidecar(out, cfg, "report")
            print(f"metrics: {out}")
    return EXIT_OK


def _report_from_json(doc: dict) -> EdgeScreenReport:
    rows = tuple(
        EdgeScreenRow(
            target=r["target_index"],
            source=r["source_index"],
            target_name=r["target"],
            source_name=r["source"],
            score=r["navar_score"] if r["navar_score"] is not None else float("nan"),
            mean_loss_full=r["mean_loss_full"],
            mean_loss_masked=r["mean_loss_masked"],
            mean_diff=r["mean_diff"],
            dm_stat=r["dm_stat"],
            p_value=r["p_value"],
            p_adjusted=r["p_adjusted"],
            necessary=r["necessary"],
            degenerate=r["degenerate"],
            n_obs=r["n_obs"],
            warning=r.get("warning", ""),
        )
        for r in doc["rows"]
    )
    return EdgeScreenReport(
        rows=rows, correction=doc.get("correction", "none"),
        alpha=doc.get("alpha", 0.05), bandwidth=doc.get("bandwidth", "auto"),
    )


def _fmt_num(x, spec="{:.4g}") -> str:
    if x is None:
        return "-"
    if isinstance(x, float) and 0 < abs(x) < 1e-3:
        return f"{x:.3e}"
    return spec.format(x)


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------


def _add_common(sp: argparse.ArgumentParser, needs_data: bool = True) -> None:
    sp.add_argument("--config", help="JSON config file; CLI flags override its fields")
    sp.add_argument("--seed", type=int, help="base seed (mandatory for reproducibility)")
    sp.add_argument("--output-dir", help="directory for output files")
    if needs_data:
        sp.add_argument("--data", help="panel CSV path")
        sp.add_argument("--unit-column")
        sp.add_argument("--time-column")
        sp.add_argument("--variables", help="comma-separated variable columns (default: all non-key columns)")
        sp.add_argument("--train-range", nargs=2, metavar=("LO", "HI"), help="inclusive train time labels")
        sp.add_argument("--validation-range", nargs=2, metavar=("LO", "HI"), help="inclusive validation time labels")


def _add_train_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--lags", type=int)
    sp.add_argument("--hidden", type=int)
    sp.add_argument("--dropout", type=float)
    sp.add_argument("--weight-decay", type=float, dest="weight_decay")
    sp.add_argument("--lambda-sparsity", type=float, dest="lambda_sparsity")
    sp.add_argument("--learning-rate", type=float, dest="learning_rate")
    sp.add_argument("--batch-size", type=int, dest="batch_size")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--precision", choices=("float32", "float64"))


def _add_score_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--statistic", choices=("variance", "std"))
    sp.add_argument("--diagonal", choices=("raw", "zeroed"))
    sp.add_argument("--score-range", choices=("train", "validation", "all"), dest="score_range")


def _add_test_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--bandwidth", help="'auto' or a non-negative integer")
    sp.add_argument("--correction", choices=("none", "bonferroni", "benjamini_hochberg"))
    sp.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="navarcast",
        description="Additive neural VAR causal discovery with forecast-necessity testing",
    )
    parser.add_argument("--version", action="version", version=f"navarcast {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("train", help="fit a model and write checkpoint + loss CSV")
    _add_common(sp)
    _add_train_flags(sp)

    sp = sub.add_parser("scores", help="causal score matrix from a checkpoint")
    _add_common(sp)
    _add_score_flags(sp)
    sp.add_argument("--checkpoint", required=True)

    sp = sub.add_parser("test", help="forecast-necessity DM test for one edge or all edges")
    _add_common(sp)
    _add_score_flags(sp)
    _add_test_flags(sp)
    sp.add_argument("--checkpoint", required=True)
    group = sp.add_mutually_exclusive_group(required=True)
    group.add_argument("--edge", nargs=2, metavar=("TARGET", "SOURCE"))
    group.add_argument("--all", action="store_true", dest="all_edges")

    sp = sub.add_parser("synth", help="generate a synthetic panel with known ground truth")
    _add_common(sp, needs_data=False)
    sp.add_argument("--regime", choices=("basic", "persistent", "redundant_pair"), default="basic")
    sp.add_argument("--n-variables", type=int, default=5)
    sp.add_argument("--n-units", type=int, default=20)
    sp.add_argument("--n-periods", type=int, default=60)
    sp.add_argument("--noise-std", type=float, default=0.5)
    sp.add_argument("--persistence", type=float, default=0.5)
    sp.add_argument("--redundancy-corr", type=float, default=0.9)
    sp.add_argument("--n-cross-edges", type=int, default=3)
    sp.add_argument("--max-lag", type=int, default=2)
    sp.add_argument("--cross-coef", type=float, default=0.8)
    sp.add_argument("--burn-in", type=int, default=100)

    sp = sub.add_parser("report", help="render a necessity report; optional recovery metrics vs oracle")
    _add_common(sp, needs_data=False)
    sp.add_argument("--necessity", required=True, help="necessity.json produced by `test`")
    sp.add_argument("--oracle", help="ground-truth graph JSON (from `synth`)")
    sp.add_argument("--metrics-out", help="write recovery metrics JSON here")
    sp.add_argument("--top", type=int, help="show only the first K rows")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config_file(getattr(args, "config", None))
        cfg = _apply_overrides(cfg, args)
        out_dir = Path(cfg["output_dir"] or ".")
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "train":
            return cmd_train(cfg, out_dir)
        if args.command == "scores":
            return cmd_scores(cfg, out_dir, args.checkpoint)
        if args.command == "test":
            edge = tuple(args.edge) if args.edge else None
            return cmd_test(cfg, out_dir, args.checkpoint, edge, args.all_edges)
        if args.command == "synth":
            return cmd_synth(args, cfg, out_dir)
        if args.command == "report":
            return cmd_report(args, cfg, out_dir)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PanelError, ModelError, NecessityError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, SynthError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
