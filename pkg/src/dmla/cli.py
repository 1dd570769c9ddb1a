"""Command-line driver: ingest, predict, fit, simulate, report."""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from dmla import __version__
from dmla.data_model import EstimatorConfig
from dmla.datafiles import (
    bundled_path,
    dump_json,
    read_dataset,
    read_guesses,
    read_listings,
    write_dataset,
    write_guesses,
    write_json,
    write_listings,
)
from dmla.dml import TABLE_COLUMNS, DmlResult, compare_runs, run_dml
from dmla.errors import (
    ConfigurationError,
    DataValidationError,
    DegenerateTreatmentError,
    DmlaError,
    EstimationError,
    IncomparableRunsError,
)
from dmla.llm_client import DEFAULT_MODEL_ID, HttpTransport, MockTransport, RetryPolicy, predict_batch
from dmla.preprocess import TransformOptions, build_table, feature_dims

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ESTIMATION, EXIT_PREDICTION = 0, 1, 2, 3, 4

DEFAULTS = {
    "estimator": EstimatorConfig().to_dict(),
    "transform": {"max_images": 12},
    "transport": {
        "kind": "mock",
        "mock_dir": None,
        "endpoint": None,
        "model_id": DEFAULT_MODEL_ID,
        "parallelism": 1,
        "rate_limit": None,
        "retries": 2,
    },
    "workers": 1,
}

# Named DGP settings; "flagship" mirrors the outcome/treatment guess
# correlations observed on the auction data.
SIM_PRESETS = {
    "null": dict(n=500, p=50, theta0=0.0, g_form="sparse_linear:5:1", m_form="sparse_linear:5:1"),
    "validity": dict(n=500, p=50, theta0=1.0, g_form="sparse_linear:5:1", m_form="sparse_linear:5:1"),
    "flagship": dict(
        n=333,
        p=200,
        theta0=0.0,
        g_form="index_nonlinear:5:1",
        m_form="mixed:5:1:0.15",
        noise_sd_u=0.7,
        noise_sd_v=1.0,
        rho_y=0.669,
        rho_d=0.5,
        guess_calibration="observed",
        seed=1000,
    ),
}
SIM_ESTIMATOR_DEFAULTS = {
    "null": {"cv_mode": "kfold:5"},
    "validity": {"cv_mode": "kfold:5"},
    "flagship": {"cv_mode": "kfold:5", "lambda_grid_size": 30, "lambda_min_ratio": 0.05},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--cv", help="loocv or kfold:N")
    p.add_argument("--grid", type=int, help="lambda grid size")
    p.add_argument("--min-ratio", type=float, help="smallest lambda as a fraction of lambda_max")
    p.add_argument("--penalize-guess", action="store_true", default=None, help="penalize the guess column too")
    p.add_argument("--workers", type=int)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = _Parser(prog="dmla", description=__doc__)
    parser.add_argument("--version", action="version", version=f"dmla {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[common], help="raw listings NDJSON -> dataset directory")
    p.add_argument("raw", type=Path)
    p.add_argument("out", type=Path)
    p.add_argument("--price-guesses", type=Path, help="guesses CSV (kind price) to merge by id")
    p.add_argument("--score-guesses", type=Path, help="guesses CSV (kind feedback_score) to merge by id")
    p.add_argument("--max-images", type=int)

    p = sub.add_parser("predict", parents=[common], help="query the prediction service for guesses")
    p.add_argument("raw", type=Path)
    p.add_argument("kind", choices=["price", "feedback_score"])
    p.add_argument("out", type=Path, help="guesses CSV; records and failures sidecars are written next to it")
    p.add_argument("--transport", help="live or mock:DIR")
    p.add_argument("--parallelism", type=int)
    p.add_argument("--rate-limit", type=float, help="requests per second")
    p.add_argument("--no-mask", action="store_true", help="send seller fields unmasked")

    p = sub.add_parser("fit", parents=[common], help="cross-fitted estimate with and without guesses")
    p.add_argument("dataset", type=Path)
    p.add_argument("--out", type=Path, help="result JSON path")
    p.add_argument("--only-one", choices=["with", "without"])

    p = sub.add_parser("simulate", parents=[common], help="Monte Carlo on synthetic data")
    p.add_argument("--preset", choices=sorted(SIM_PRESETS), default="validity")
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--n", type=int)
    p.add_argument("--p", type=int)
    p.add_argument("--theta0", type=float)
    p.add_argument("--g-form")
    p.add_argument("--m-form")
    p.add_argument("--noise-u", type=float)
    p.add_argument("--noise-v", type=float)
    p.add_argument("--rho-y", type=float)
    p.add_argument("--rho-d", type=float)
    p.add_argument("--guess-target", choices=["w", "wd"])
    p.add_argument("--guess-calibration", choices=["observed", "target"])
    p.add_argument("--data-seed", type=int, help="seed of the first replication's data (default: preset)")
    p.add_argument("--out", type=Path, help="summary JSON path")
    p.add_argument("--emit-dataset", type=Path, help="also write the first replication's data as a dataset")

    p = sub.add_parser("report", help="render a fit result or MC summary")
    p.add_argument("result", type=Path)
    p.add_argument("--format", choices=["text", "csv", "tsv"], default="text")
    p.add_argument("--out", type=Path, help="write the rendering here instead of stdout")
    return parser


def resolve_config(args, extra_estimator: dict | None = None) -> dict:
    """Defaults, then command defaults, then config file, then flags."""
    cfg = copy.deepcopy(DEFAULTS)
    if extra_estimator:
        cfg["estimator"].update(extra_estimator)
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(args.config.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc
        for key, val in file_cfg.items():
            if key not in cfg:
                raise ConfigurationError(f"unknown config section {key!r}")
            if isinstance(cfg[key], dict):
                if not isinstance(val, dict):
                    raise ConfigurationError(f"config section {key!r} must be an object")
                cfg[key].update(val)
            else:
                cfg[key] = val
    est = cfg["estimator"]
    overrides = {
        "seed": "seed",
        "folds": "k_folds",
        "cv": "cv_mode",
        "grid": "lambda_grid_size",
        "min_ratio": "lambda_min_ratio",
        "penalize_guess": "penalize_guess",
    }
    for flag, key in overrides.items():
        val = getattr(args, flag, None)
        if val is not None:
            est[key] = val
    if getattr(args, "workers", None) is not None:
        cfg["workers"] = args.workers
    if getattr(args, "max_images", None) is not None:
        cfg["transform"]["max_images"] = args.max_images
    tr = cfg["transport"]
    if getattr(args, "transport", None):
        if args.transport == "live":
            tr["kind"] = "live"
        elif args.transport.startswith("mock:"):
            tr["kind"], tr["mock_dir"] = "mock", args.transport[len("mock:") :]
        else:
            raise ConfigurationError("--transport must be 'live' or 'mock:DIR'")
    if getattr(args, "parallelism", None) is not None:
        tr["parallelism"] = args.parallelism
    if getattr(args, "rate_limit", None) is not None:
        tr["rate_limit"] = args.rate_limit
    # Validate early so bad values are reported as configuration errors.
    EstimatorConfig.from_dict(est)
    if cfg["workers"] < 1:
        raise ConfigurationError("workers must be >= 1")
    return cfg


def config_fingerprint(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _envelope(command: str, cfg: dict, inputs: dict, body: dict) -> dict:
    return {
        "tool": "dmla",
        "tool_version": __version__,
        "command": command,
        "config": cfg,
        "config_fingerprint": config_fingerprint(cfg),
        "inputs": inputs,
        **body,
    }


SUMMARY_STATS = ("Mean", "St. Dev.", "Min", "Pctl(25)", "Median", "Pctl(75)", "Max")


def summary_statistics(listings) -> list[tuple]:
    """Rows of (label, mean, sd, min, q25, median, q75, max) for the raw variables."""
    cols = {
        "price": [l.price for l in listings],
        "log price": list(np.log([l.price for l in listings])),
        "feedback score": [l.feedback_score for l in listings],
    }
    if all(l.n_bids is not None for l in listings):
        cols["# bids"] = [l.n_bids for l in listings]
    cols["# images"] = [len(l.image_embeddings) for l in listings]
    if all(l.text is not None for l in listings):
        cols["# chars. in text"] = [len(l.text) for l in listings]
    if all(l.price_guess is not None for l in listings):
        cols["price guess"] = [l.price_guess for l in listings]
    if all(l.score_guess is not None for l in listings):
        cols["score guess"] = [l.score_guess for l in listings]
    rows = []
    for label, vals in cols.items():
        a = np.asarray(vals, dtype=float)
        sd = float(a.std(ddof=1)) if a.size > 1 else 0.0
        q25, med, q75 = np.percentile(a, [25, 50, 75])
        rows.append((label, float(a.mean()), sd, float(a.min()), float(q25), float(med), float(q75), float(a.max())))
    return rows


def format_summary(rows) -> str:
    head = f"{'Statistic':<18}" + "".join(f"{s:>15}" for s in SUMMARY_STATS)
    lines = [head, "-" * len(head)]
    for label, *vals in rows:
        lines.append(f"{label:<18}" + "".join(f"{v:>15,.2f}" for v in vals))
    return "\n".join(lines)


def _merge_guesses(listings, price_path, score_path):
    price = read_guesses(price_path) if price_path else None
    score = read_guesses(score_path) if score_path else None
    out = []
    for i, lst in enumerate(listings):
        kw = {}
        for name, mapping, cast in (("price_guess", price, float), ("score_guess", score, int)):
            if mapping is None:
                continue
            if lst.id not in mapping:
                raise DataValidationError(f"row {i} (id {lst.id}): no {name} in guesses file")
            kw[name] = cast(mapping[lst.id])
        out.append(replace(lst, **kw) if kw else lst)
    return out


def cmd_ingest(args, out=None) -> int:
    out = out or sys.stdout
    cfg = resolve_config(args)
    listings = read_listings(args.raw)
    listings = _merge_guesses(listings, args.price_guesses, args.score_guesses)
    opts = TransformOptions(**cfg["transform"])
    table = build_table(listings, opts)
    p_img, p_txt = feature_dims(listings)
    write_dataset(
        args.out,
        table,
        {
            "p_img": p_img,
            "p_txt": p_txt,
            "transform": cfg["transform"],
            "config_fingerprint": config_fingerprint(cfg),
            "source": str(args.raw),
        },
    )
    print(f"wrote {args.out}: n={table.n}, p={table.p} (image {p_img} + text {p_txt})", file=out)
    print(format_summary(summary_statistics(listings)), file=out)
    return EXIT_OK


def _make_transport(tr: dict):
    if tr["kind"] == "live":
        if not tr.get("endpoint"):
            raise ConfigurationError("live transport needs transport.endpoint in the config file")
        return HttpTransport(tr["endpoint"])
    if not tr.get("mock_dir"):
        raise ConfigurationError("mock transport needs a transcript directory (--transport mock:DIR)")
    return MockTransport.from_dir(tr["mock_dir"])


def cmd_predict(args, out=None) -> int:
    out = out or sys.stdout
    cfg = resolve_config(args)
    tr = cfg["transport"]
    listings = read_listings(args.raw)
    missing = [i for i, l in enumerate(listings) if not l.text]
    if missing:
        raise DataValidationError(f"row {missing[0]} (id {listings[missing[0]].id}): listing has no text")
    batch = predict_batch(
        listings,
        args.kind,
        _make_transport(tr),
        parallelism=tr["parallelism"],
        rate_limit=tr["rate_limit"],
        retry_policy=RetryPolicy(max=tr["retries"]),
        model_id=tr["model_id"],
        mask=not args.no_mask,
    )
    write_guesses(args.out, batch.records)
    records_path = args.out.with_suffix(".records.jsonl")
    with records_path.open("w", encoding="utf-8") as fh:
        for rec in batch.records:
            fh.write(json.dumps(rec.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
    failures_path = args.out.with_suffix(".failures.json")
    inputs = {"raw": str(args.raw), "kind": args.kind, "n_listings": len(listings)}
    body = {"n_records": len(batch.records), "failures": [f.to_dict() for f in batch.failures]}
    write_json(failures_path, _envelope("predict", cfg, inputs, body))
    print(f"{len(batch.records)} predictions written to {args.out}; {len(batch.failures)} failures", file=out)
    return EXIT_PREDICTION if batch.failures else EXIT_OK


def cmd_fit(args, out=None) -> int:
    out = out or sys.stdout
    cfg = resolve_config(args)
    est = EstimatorConfig.from_dict(cfg["estimator"])
    table, meta = read_dataset(args.dataset)
    want = ["with", "without"] if args.only_one is None else [args.only_one]
    if "with" in want and not table.has_guesses:
        raise DataValidationError(f"{args.dataset}: guesses requested but the dataset has no guess columns")
    results = {}
    for arm in want:
        results[arm] = run_dml(table, est, use_guesses=(arm == "with"), workers=cfg["workers"])
    body = {"results": {arm: res.to_dict() for arm, res in results.items()}}
    if len(results) == 2:
        comp = compare_runs(results["with"], results["without"])
        body["comparison"] = comp.to_dict()
        print(comp.format_table(), file=out)
    else:
        print(_format_rows([(_arm_label(a), *_row(r)) for a, r in results.items()]), file=out)
    for arm, res in results.items():
        if res.guess_correlations is not None:
            cy, cd = res.guess_correlations
            print(f"guess-truth correlation: outcome {cy:.4f}, treatment {cd:.4f}", file=out)
            break
    inputs = {"dataset": str(args.dataset), "data_fingerprint": meta.get("data_fingerprint")}
    if args.out:
        write_json(args.out, _envelope("fit", cfg, inputs, body))
    return EXIT_OK


def _arm_label(arm: str) -> str:
    return "With LLM" if arm == "with" else "Embeddings only"


def _row(res: DmlResult) -> tuple:
    return (res.rmse_y, res.rmse_d, res.theta_hat, res.robust_se)


def _format_rows(rows) -> str:
    head = f"{'':>16} | " + " ".join(f"{c:>14}" for c in TABLE_COLUMNS)
    lines = [head, "-" * len(head)]
    for label, *vals in rows:
        lines.append(f"{label:>16} | " + " ".join(f"{v:>14.6g}" for v in vals))
    return "\n".join(lines)


def _sim_spec(args):
    from dmla.synth import DgpSpec

    params = dict(SIM_PRESETS[args.preset])
    flag_map = {
        "n": "n",
        "p": "p",
        "theta0": "theta0",
        "g_form": "g_form",
        "m_form": "m_form",
        "noise_u": "noise_sd_u",
        "noise_v": "noise_sd_v",
        "rho_y": "rho_y",
        "rho_d": "rho_d",
        "guess_target": "guess_target",
        "guess_calibration": "guess_calibration",
    }
    for flag, key in flag_map.items():
        val = getattr(args, flag)
        if val is not None:
            params[key] = val
    if args.data_seed is not None:
        params["seed"] = args.data_seed
    return DgpSpec(**params)


def cmd_simulate(args, out=None) -> int:
    out = out or sys.stdout
    from dmla.synth import generate, monte_carlo

    if args.reps < 1:
        raise ConfigurationError("--reps must be >= 1")
    cfg = resolve_config(args, extra_estimator=SIM_ESTIMATOR_DEFAULTS[args.preset])
    est = EstimatorConfig.from_dict(cfg["estimator"])
    spec = _sim_spec(args)
    if args.emit_dataset:
        write_dataset(args.emit_dataset, generate(spec).table, {"dgp": spec.to_dict()})
    summary = monte_carlo(spec, est, args.reps, workers=cfg["workers"])
    for label, arm in (("with guesses", summary.with_guess), ("embeddings only", summary.without_guess)):
        print(
            f"{label:>16}: mean theta {arm.theta_mean:.4f} (sd {arm.theta_sd:.4f}), coverage {arm.coverage:.3f}, "
            f"mean SE {arm.se_mean:.4f}, mean RMSE_y {arm.rmse_y_mean:.4f}, mean RMSE_d {arm.rmse_d_mean:.4f}",
            file=out,
        )
    print(f"coverage: {summary.with_guess.coverage:.3f}", file=out)
    print(f"improvement fraction (RMSE_y): {summary.frac_rmse_y_improved:.3f}", file=out)
    print(f"improvement fraction (robust SE): {summary.frac_se_improved:.3f}", file=out)
    print(f"mean delta RMSE_d: {summary.delta_rmse_d_mean:.5f} (sd {summary.delta_rmse_d_sd:.5f})", file=out)
    if args.out:
        body = {"summary": summary.to_dict()}
        write_json(args.out, _envelope("simulate", {**cfg, "dgp": spec.to_dict(), "reps": args.reps}, {}, body))
    return EXIT_OK


def render_report(doc: dict, fmt: str = "text") -> str:
    """Render a ``fit`` result or a ``simulate`` summary as a comparison table."""
    if "results" in doc:
        rows = [(_arm_label(arm), *_row(DmlResult.from_dict(res))) for arm, res in _ordered(doc["results"])]
        header = ["model", *TABLE_COLUMNS]
    elif "summary" in doc:
        s = doc["summary"]
        rows = []
        for arm in ("without_guess", "with_guess"):
            a = s[arm]
            rows.append((_arm_label("with" if arm == "with_guess" else "without"), a["rmse_y_mean"],
                         a["rmse_d_mean"], a["theta_mean"], a["se_mean"], a["coverage"]))
        header = ["model", "mean RMSE (E[Y|W])", "mean RMSE (E[D|W])", "mean theta_hat", "mean Robust SE", "coverage"]
    else:
        raise DataValidationError("file is neither a fit result nor a simulate summary")
    if fmt == "text":
        if "results" in doc:
            text = _format_rows(rows)
        else:
            lines = [" | ".join(f"{h:>18}" for h in header)]
            lines += [" | ".join([f"{label:>18}"] + [f"{v:>18.6g}" for v in vals]) for label, *vals in rows]
            text = "\n".join(lines)
        return text + "\n"
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter="," if fmt == "csv" else "\t", lineterminator="\n")
    writer.writerow(header)
    for label, *vals in rows:
        writer.writerow([label, *(repr(float(v)) for v in vals)])
    return buf.getvalue()


def _ordered(results: dict):
    return [(arm, results[arm]) for arm in ("without", "with") if arm in results]


def cmd_report(args, out=None) -> int:
    out = out or sys.stdout
    try:
        doc = json.loads(args.result.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataValidationError(f"cannot read {args.result}: {exc}") from exc
    text = render_report(doc, args.format)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text, encoding="utf-8")
    else:
        out.write(text)
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "predict": cmd_predict,
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"dmla: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataValidationError as exc:
        print(f"dmla: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EstimationError, DegenerateTreatmentError, IncomparableRunsError) as exc:
        print(f"dmla: estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except DmlaError as exc:
        print(f"dmla: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
