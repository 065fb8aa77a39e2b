"""Command-line pipeline: synth, ingest, sample, train, predict, backtest, report, run.

Every stage reads the artifacts of the stage before it from the output
directory and writes its own, so stages can be re-run one at a time. Exit
codes: 0 success, 1 configuration error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import glob
import hashlib
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .backtest import PredictionSet, SizingError, run_backtest
from .bayes import (
    BayesianMultiOutputRegressor,
    NumericalConditioningError,
    VarianceUndefinedError,
    load_posterior,
    save_posterior,
)
from .config import ConfigError, RunConfig
from .density import DensityNetworkRegressor, save_checkpoint
from .market_data import (
    SchemaError,
    build_microprice_series,
    dump_microprice_series,
    generate_synthetic_market,
    load_microprice_dump,
    merge_streams,
    parse_quote_stream,
    write_quote_stream,
    _contract_mapping,
)
from .sampling import (
    align_and_downsample,
    build_windows,
    load_dataset,
    make_dataset,
    save_dataset,
)
from .uncertainty import EpistemicUndefinedError
from .walkforward import (
    dataset_months,
    derive_seed,
    dropout_sweep_rows,
    evaluate,
    fit_fold,
    make_folds,
    predict_fold,
    table_month_labels,
)

logger = logging.getLogger("curvecast")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
STAGES = ("synth", "ingest", "sample", "train", "predict", "backtest", "report")
MANIFEST = "manifest.json"

QUOTES = "raw/quotes.csv.gz"
MICROPRICES = "ingest/microprices.csv"
INGEST_ERRORS = "ingest/errors.csv"
INGEST_INFO = "ingest/ingest.json"
CURVE = "sample/curve.csv"
DATASET = "sample/dataset"
MODELS = "models"
PREDICTIONS = "predictions"
LEDGERS = "ledgers"
REPORTS = "reports"


class DataError(Exception):
    """Missing upstream artifact, unreadable input or inconsistent shapes."""


class NumericalFailure(Exception):
    pass


def _need(out: Path, rel: str) -> Path:
    p = out / rel
    if not p.exists():
        raise DataError(f"missing upstream artifact {p}; run the stage that produces it first")
    return p


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path: Path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "-" if math.isnan(v) else repr(v)
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _rate_dir(rate: float) -> str:
    return f"dropout_{rate!r}"


# ---------------------------------------------------------------------------
# stages


def stage_synth(cfg: RunConfig, out: Path) -> None:
    if cfg.tree["data"]["source"] != "synthetic":
        raise ConfigError("synth needs data.source = synthetic")
    syn = cfg.synthetic()
    streams = generate_synthetic_market(syn)
    path = out / QUOTES
    path.parent.mkdir(parents=True, exist_ok=True)
    write_quote_stream(merge_streams(streams), path)
    logger.info("synth: %d contracts, %d days -> %s", syn.contracts, syn.days, path)


def _input_files(cfg: RunConfig, out: Path) -> list[Path]:
    if cfg.tree["data"]["source"] == "synthetic":
        return [_need(out, QUOTES)]
    pattern = cfg.files["glob"]
    paths = sorted(Path(p) for p in glob.glob(str(pattern)))
    if not paths:
        raise DataError(f"data.files.glob {pattern!r} matches no files")
    return paths


def stage_ingest(cfg: RunConfig, out: Path) -> None:
    files = _input_files(cfg, out)
    opts = cfg.files
    ids = opts["contract_ids"]
    if cfg.tree["data"]["source"] == "synthetic":
        ids = None
    results = []
    for p in files:
        try:
            results.append(parse_quote_stream(p, opts["schema"], opts["delimiter"], ids))
        except SchemaError as exc:
            raise DataError(f"{p}: {exc}") from None
        except OSError as exc:
            raise DataError(f"cannot read {p}: {exc}") from None
    if ids is None and len(results) > 1:
        # number contracts consistently across files
        union = set().union(*(r.contract_names for r in results))
        ids = _contract_mapping(union, None)
        results = [r if r.contract_names == {k: ids[k] for k in r.contract_names}
                   else parse_quote_stream(p, opts["schema"], opts["delimiter"], ids)
                   for p, r in zip(files, results)]
    names: dict[str, int] = {}
    events, errors = [], []
    for p, r in zip(files, results):
        names.update(r.contract_names)
        events.extend(r.events)
        errors.extend((p.name, e.line, e.reason, e.raw) for e in r.errors)
    events.sort(key=lambda e: (e.timestamp, e.contract_id))
    if cfg.tree["data"]["source"] == "synthetic":
        C = cfg.synthetic().contracts
    else:
        C = (max(names.values()) + 1) if names else 0
    if C == 0:
        raise DataError("no contracts found in the input")
    series, degenerate = build_microprice_series(events, C)
    errors.extend(("-", e.line, e.reason, e.raw) for e in degenerate)
    (out / MICROPRICES).parent.mkdir(parents=True, exist_ok=True)
    dump_microprice_series(series, out / MICROPRICES)
    _write_csv(out / INGEST_ERRORS, ("file", "line", "reason", "raw"), errors)
    _write_json(out / INGEST_INFO, {"contracts": C, "contract_names": names, "events": len(events),
                                    "rejected_rows": len(errors)})
    logger.info("ingest: %d events, %d rejected rows, C=%d", len(events), len(errors), C)


def stage_sample(cfg: RunConfig, out: Path) -> None:
    info = _read_json(_need(out, INGEST_INFO))
    dump = load_microprice_dump(_need(out, MICROPRICES))
    C = int(info["contracts"])
    for c in range(C):
        dump.setdefault(c, build_microprice_series([], C)[0][c])
    if len(dump) != C:
        raise DataError(f"shape mismatch: ingest reports C={C} contracts, microprice dump has C={len(dump)}")
    s = cfg.sampling
    curve = align_and_downsample(dump, cutoff=float(s["cutoff"]),
                                 day_offset_hours=float(cfg.files["day_offset_hours"]))
    for w in curve.warnings:
        logger.warning("sample: %s", w)
    (out / CURVE).parent.mkdir(parents=True, exist_ok=True)
    curve.to_csv(out / CURVE)
    raw = build_windows(curve, int(s["window"]))
    ds = make_dataset(raw, ddof=int(s["ddof"]))
    if len(ds) == 0:
        logger.warning("sample: no windows; every day is shorter than %d observations", int(s["window"]) + 1)
    if ds.skipped:
        logger.warning("sample: skipped %d degenerate windows", ds.skipped)
    target = out / DATASET
    for old in target.glob("*.npz") if target.exists() else ():
        old.unlink()
    save_dataset(ds, target, window_len=int(s["window"]), contracts=C)
    logger.info("sample: %d curve observations, %d samples", len(curve.timestamps), len(ds))


def _load_dataset(out: Path):
    _need(out, DATASET + "/index.json")
    ds, index = load_dataset(out / DATASET)
    return ds, index


def _folds(cfg: RunConfig, ds):
    months = dataset_months(ds)
    try:
        return make_folds(months, cfg.validation_months)
    except ValueError as exc:
        raise DataError(str(exc)) from None


def _fold_file(M: int) -> str:
    return f"fold_M{M:02d}.npz"


def stage_train(cfg: RunConfig, out: Path) -> None:
    ds, _ = _load_dataset(out)
    if len(ds) == 0:
        raise DataError("dataset has no samples; nothing to train on")
    settings = cfg.model()
    rates = [None] + ([float(r) for r in cfg.sweeps().dropout_rates] if settings.kind != "bayes" else [])
    entries = []
    for fold in _folds(cfg, ds):
        if fold.test_month is None or not np.any(ds.months == fold.test_month):
            continue
        seed = derive_seed(cfg.seed, f"train.M{fold.M}")
        for rate in rates:
            try:
                model = fit_fold(ds, fold, settings, seed, dropout_rate=rate)
            except ValueError as exc:
                raise DataError(str(exc)) from None
            sub = MODELS if rate is None else f"{MODELS}/{_rate_dir(rate)}"
            path = out / sub / _fold_file(fold.M)
            path.parent.mkdir(parents=True, exist_ok=True)
            if settings.kind == "bayes":
                save_posterior(path, model.posterior_)
            else:
                save_checkpoint(path, model.params_, {"train": seed}, model.history_)
            entries.append({"M": fold.M, "train_months": list(fold.train_months),
                            "val_month": fold.val_month, "test_month": fold.test_month,
                            "dropout_rate": rate, "file": f"{sub}/{_fold_file(fold.M)}"})
            logger.info("train: fold M=%d%s done", fold.M, "" if rate is None else f" (dropout {rate})")
    if not entries:
        raise DataError("no fold has a non-empty test month")
    _write_json(out / MODELS / "index.json",
                {"kind": settings.kind, "contracts": ds.contracts, "window_len": ds.window_len,
                 "folds": entries})


def _load_model(kind: str, path: Path):
    if kind == "bayes":
        est = BayesianMultiOutputRegressor()
        est.posterior_ = load_posterior(path)
        est.n_outputs_ = est.posterior_.prior.n_outputs
        est.n_features_in_ = est.posterior_.prior.n_features - 1
        return est, est.n_outputs_
    est = DensityNetworkRegressor.from_checkpoint(path)
    return est, est.n_outputs_


def stage_predict(cfg: RunConfig, out: Path) -> None:
    ds, _ = _load_dataset(out)
    index = _read_json(_need(out, MODELS + "/index.json"))
    settings = cfg.model()
    if index["kind"] != settings.kind:
        raise ConfigError(f"models were trained as {index['kind']!r}, config says {settings.kind!r}")
    entries = []
    for e in index["folds"]:
        path = _need(out, e["file"])
        model, C = _load_model(index["kind"], path)
        if C != ds.contracts:
            raise DataError(f"shape mismatch: {e['file']} expects C={C} contracts, dataset has C={ds.contracts}")
        if model.n_features_in_ != ds.window_len * ds.contracts:
            raise DataError(f"shape mismatch: {e['file']} expects {model.n_features_in_} inputs, "
                            f"dataset windows have {ds.window_len * ds.contracts}")
        test = ds.subset(ds.months == e["test_month"])
        preds = predict_fold(model, test, settings, derive_seed(cfg.seed, f"mc.M{e['M']}"))
        rate = e["dropout_rate"]
        sub = PREDICTIONS if rate is None else f"{PREDICTIONS}/{_rate_dir(rate)}"
        name = f"M{e['M'] + 1:02d}.npz"
        (out / sub).mkdir(parents=True, exist_ok=True)
        preds.save(out / sub / name)
        entries.append({"month": e["M"] + 1, "calendar_month": e["test_month"], "dropout_rate": rate,
                        "file": f"{sub}/{name}", "samples": len(preds)})
    _write_json(out / PREDICTIONS / "index.json", {"kind": settings.kind, "predictions": entries})
    logger.info("predict: %d prediction sets", len(entries))


def _load_predictions(out: Path):
    index = _read_json(_need(out, PREDICTIONS + "/index.json"))
    main, by_rate = {}, {}
    for e in index["predictions"]:
        p = PredictionSet.load(_need(out, e["file"]))
        if e["dropout_rate"] is None:
            main[e["month"]] = p
        else:
            by_rate.setdefault(float(e["dropout_rate"]), []).append(p)
    return index["kind"], main, by_rate


def stage_backtest(cfg: RunConfig, out: Path) -> None:
    _, preds, _ = _load_predictions(out)
    if not preds:
        raise DataError("no predictions to trade")
    pooled = PredictionSet.concatenate([preds[m] for m in sorted(preds)])
    bt = cfg.backtest()
    daily = []
    for name in bt.strategies:
        ledger = run_backtest(pooled, bt.spec(name), bt.cost_element, bt.cost_multiple)
        _write_csv(out / LEDGERS / f"{name}.csv", ledger.ROW_HEADER, ledger.to_rows())
        days, rets = ledger.daily_returns()
        vol = ledger.daily_volume()
        daily.extend((name, int(d), float(r), float(v)) for d, r, v in zip(days, rets, vol))
        logger.info("backtest: %s net pnl %.4f bps over %d days", name, ledger.net_pnl, len(days))
    _write_csv(out / LEDGERS / "daily_returns.csv", ("strategy", "day", "net_return_bps", "volume"), daily)


def stage_report(cfg: RunConfig, out: Path) -> None:
    _need(out, LEDGERS + "/daily_returns.csv")
    kind, preds, by_rate = _load_predictions(out)
    report = evaluate(preds, table_month_labels(cfg.validation_months), cfg.backtest(), cfg.sweeps(), kind)
    if by_rate:
        report.dropout_sweep = dropout_sweep_rows(dict(sorted(by_rate.items())), cfg.backtest())
    report.write(out / REPORTS)
    for row in report.table_rows():
        logger.info("report: %s", "  ".join(f"{c:>12}" for c in row))


STAGE_FUNCS = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "sample": stage_sample,
    "train": stage_train,
    "predict": stage_predict,
    "backtest": stage_backtest,
    "report": stage_report,
}


# ---------------------------------------------------------------------------
# manifest


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def artifact_hashes(out: Path) -> dict[str, str]:
    return {p.relative_to(out).as_posix(): _sha256(p)
            for p in sorted(out.rglob("*")) if p.is_file() and p.name != MANIFEST}


def write_manifest(cfg: RunConfig, out: Path, stage: str, status: str, error: str | None = None) -> None:
    path = out / MANIFEST
    manifest = _read_json(path) if path.exists() else {}
    tree = dict(cfg.tree)
    tree.pop("output", None)  # where the run lives is not part of what it computes
    stages = manifest.get("stages", {})
    stages[stage] = {"status": status} if error is None else {"status": status, "error": error}
    failed = [s for s in STAGES if stages.get(s, {}).get("status") == "failed"]
    manifest = {
        "config": tree,
        "seed": cfg.seed,
        "seeds": cfg.seeds(),
        "stages": stages,
        "failed_stage": failed[0] if failed else None,
        "artifacts": artifact_hashes(out),
    }
    _write_json(path, manifest)


# ---------------------------------------------------------------------------
# entry point


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, SchemaError, FileNotFoundError)):
        return EXIT_DATA
    if isinstance(exc, (FloatingPointError, ArithmeticError, NumericalConditioningError, NumericalFailure,
                        VarianceUndefinedError, EpistemicUndefinedError, SizingError, np.linalg.LinAlgError)):
        return EXIT_NUMERIC
    return -1


def run_stage(name: str, cfg: RunConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    logger.info("stage %s", name)
    try:
        with np.errstate(over="raise", invalid="ignore", divide="ignore"):
            STAGE_FUNCS[name](cfg, out)
    except Exception as exc:  # noqa: BLE001 - mapped to an exit code below
        code = _exit_code(exc)
        if code < 0:
            raise
        logger.error("%s failed: %s", name, exc)
        write_manifest(cfg, out, name, "failed", f"{type(exc).__name__}: {exc}")
        return code
    write_manifest(cfg, out, name, "ok")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="curvecast", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("run",):
        p = sub.add_parser(name, help="all stages in order" if name == "run" else f"{name} stage")
        p.add_argument("--config", type=Path, help="YAML run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value by dotted key, e.g. model.kind=bayes")
        p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.load(args.config, args.overrides, seed=args.seed, output=args.out)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    out = cfg.output
    if args.command != "run":
        return run_stage(args.command, cfg, out)
    stages = STAGES if cfg.tree["data"]["source"] == "synthetic" else STAGES[1:]
    for name in stages:
        code = run_stage(name, cfg, out)
        if code:
            return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
