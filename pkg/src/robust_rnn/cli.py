"""Command-line entry point: dataset generation, training, evaluation,
robustness attacks, certification, embeddings, and plot-table export.

Configuration comes from JSON files with strict schemas (unknown keys are
rejected); command-line flags override file values. One master seed drives
every run and is logged into the output manifests. Environment:
ROBUST_RNN_SEED overrides the master seed, ROBUST_RNN_THREADS sets the
worker count for parallel dataset generation and evaluation.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from . import benchmark, certificates, evaluation, models, training


class CliError(Exception):
    """Validation problem (bad config, missing file): exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _workers():
    raw = os.environ.get("ROBUST_RNN_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise CliError(f"ROBUST_RNN_THREADS must be an integer, got {raw!r}")


def _env_seed():
    raw = os.environ.get("ROBUST_RNN_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"ROBUST_RNN_SEED must be an integer, got {raw!r}")


def _load_json(path, what):
    if not os.path.exists(path):
        raise CliError(f"{what} file not found: {path}")
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise CliError(f"{what} file {path} is not valid JSON: {e}")


def _build(cls, data, source):
    """Construct a config dataclass, rejecting unknown keys by name."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise CliError(f"unknown key {sorted(unknown)[0]!r} for "
                       f"{cls.__name__} in {source}")
    coerced = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            v = data[f.name]
            coerced[f.name] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid {cls.__name__} in {source}: {e}")


def _load_model(path):
    if not os.path.exists(path):
        raise CliError(f"model file not found: {path}")
    try:
        return models.load_model(path)
    except (KeyError, ValueError) as e:
        raise CliError(f"cannot parse model file {path}: {e}")


def _progress_logger(quiet):
    if quiet:
        return None

    def log(r):
        print(f"epoch {r.epoch:4d}  loss {r.mean_batch_loss:.6g}  "
              f"val_nse {r.val_nse:.6g}  alpha {r.alpha:.3g}  "
              f"lr {r.lr:.3g}  margin {r.lmi_margin:.3g}")
        sys.stdout.flush()

    return log


# ---------------------------------------------------------------------------
# Subcommands.

def _cmd_datagen(args):
    cfg = _load_json(args.config, "datagen config") if args.config else {}
    known = {"msd", "splits", "noise_snr_db", "seed"}
    unknown = set(cfg) - known
    if unknown:
        raise CliError(f"unknown key {sorted(unknown)[0]!r} in datagen "
                       f"config {args.config}")
    msd = _build(benchmark.MsdConfig, cfg.get("msd", {}), args.config or "<defaults>")
    splits = _build(benchmark.SplitConfig, cfg.get("splits", {}),
                    args.config or "<defaults>")
    snr = cfg.get("noise_snr_db", 30.0)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    seed = _env_seed() if _env_seed() is not None else seed
    ds = benchmark.make_dataset(msd, splits, noise_snr_db=snr, seed=seed,
                                workers=_workers())
    benchmark.save_dataset(ds, args.out, msd=msd, splits=splits,
                           noise_snr_db=snr, seed=seed)
    if not args.quiet:
        n_tests = sum(len(v) for v in ds.tests.values())
        print(f"wrote {len(ds.train)} train / 1 val / {n_tests} test "
              f"sequences to {args.out}")
    return 0


_MODEL_KINDS = ("rnn", "lstm", "srnn", "cirnn", "robust-star", "robust-gamma")


def _cmd_train(args):
    if args.model not in _MODEL_KINDS:
        raise CliError(f"unknown model kind {args.model!r}; "
                       f"choose from {_MODEL_KINDS}")
    if args.model == "robust-gamma" and args.gamma is None:
        raise CliError("robust-gamma training needs --gamma")
    if not os.path.isdir(args.data):
        raise CliError(f"dataset directory not found: {args.data}")
    ds = benchmark.load_dataset(args.data)
    cfg_data = _load_json(args.config, "train config") if args.config else {}
    for flag in ("lr0", "alpha0", "patience", "max_epochs", "seed"):
        v = getattr(args, flag)
        if v is not None:
            cfg_data[flag] = v
    if _env_seed() is not None:
        cfg_data["seed"] = _env_seed()
    config = _build(training.TrainConfig, cfg_data, args.config or "<flags>")

    m = ds.train[0].u.shape[1]
    p = ds.train[0].y.shape[1]
    dims = {"n": args.n, "q": args.q if args.q else args.n, "m": m, "p": p}
    init = models.init_feasible(args.model, dims, gamma=args.gamma,
                                seed=config.seed)
    best, history = training.train(init, ds, config,
                                   log=_progress_logger(args.quiet))
    os.makedirs(args.out, exist_ok=True)
    models.save_model(best, os.path.join(args.out, "model.json"))
    history.to_csv(os.path.join(args.out, "history.csv"))
    if isinstance(best, certificates.CertifiedBundle):
        cert = certificates.export_certificate(best)
        with open(os.path.join(args.out, "certificate.json"), "w") as fh:
            json.dump(cert, fh, indent=1)
            fh.write("\n")
    with open(os.path.join(args.out, "run.json"), "w") as fh:
        json.dump({"command": "train", "model": args.model,
                   "gamma": args.gamma, "dims": dims,
                   "config": dataclasses.asdict(config),
                   "seed": config.seed, "data": args.data}, fh, indent=1)
        fh.write("\n")
    if not args.quiet:
        print(f"best validation NSE {min(r.val_nse for r in history.records):.6g}; "
              f"artifacts in {args.out}")
    return 0


def _parse_sigmas(text):
    try:
        return [float(s) for s in text.split(",") if s]
    except ValueError:
        raise CliError(f"--sigmas must be comma-separated numbers, got {text!r}")


def _model_name(path):
    return os.path.splitext(os.path.basename(path))[0]


def _cmd_eval(args):
    named = {}
    for path in args.models:
        named[_model_name(path)] = _load_model(path)
    sigmas = _parse_sigmas(args.sigmas)
    seed = _env_seed() if _env_seed() is not None else args.seed
    rows = evaluation.nse_sweep(named, sigmas, args.realizations,
                                length=args.length, seed=seed,
                                workers=_workers())
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "sigma_u", "realization", "nse"])
        for name, s, r, val in rows:
            writer.writerow([name, "%g" % s, r, "%.17g" % val])
    if not args.quiet:
        print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def _cmd_attack(args):
    model = _load_model(args.model)
    cfg_data = _load_json(args.config, "attack config") if args.config else {}
    for flag in ("iterations", "restarts", "horizon", "seed", "step_size"):
        v = getattr(args, flag)
        if v is not None:
            cfg_data[flag] = v
    if _env_seed() is not None:
        cfg_data["seed"] = _env_seed()
    cfg = _build(evaluation.AttackConfig, cfg_data, args.config or "<flags>")
    report = evaluation.lipschitz_attack(model, cfg)
    if isinstance(model, certificates.CertifiedBundle) and model.gamma:
        report.gamma_cert = float(model.gamma)
        if report.gamma_hat > report.gamma_cert + 1e-6:
            raise RuntimeError(
                f"attack found gain {report.gamma_hat} above the certificate "
                f"{report.gamma_cert}: certificate violated")
    doc = report.to_dict()
    doc["model"] = args.model
    doc["seed"] = cfg.seed
    with open(args.out, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    if not args.quiet:
        print(f"gamma_hat {report.gamma_hat:.6g}"
              + (f" (certified {report.gamma_cert:.6g})"
                 if report.gamma_cert else ""))
    return 0


def _cmd_certify(args):
    model = _load_model(args.model)
    if not isinstance(model, certificates.CertifiedBundle):
        raise CliError(f"model file {args.model} holds an unconstrained model; "
                       "nothing to certify")
    rep = certificates.feasibility_margin(model)
    if not rep.feasible:
        raise CliError(f"checkpoint {args.model} is infeasible "
                       f"(lmi_margin={rep.lmi_margin:g})")
    if model.kind == "cirnn-contraction":
        model = certificates.embed_cirnn(model.theta, model.P)
    try:
        gamma_cert = certificates.bisect_gamma(model, lo=args.lo, hi=args.hi,
                                               tol=args.tol)
    except ValueError as e:
        raise CliError(str(e))
    doc = certificates.export_certificate(model)
    doc["gamma_cert"] = gamma_cert
    doc["model"] = args.model
    with open(args.out, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    if not args.quiet:
        print(f"certified incremental gain bound {gamma_cert:.6g} "
              f"(lmi_margin {doc['margins']['lmi_margin']:.3g})")
    return 0


def _cmd_embed(args):
    sysdoc = _load_json(args.system, "system")
    try:
        if args.kind == "lti":
            bundle = certificates.embed_lti(
                np.array(sysdoc["A"], float), np.array(sysdoc["B"], float),
                np.array(sysdoc["C"], float), np.array(sysdoc["D"], float))
        else:
            cirnn = models.CiRnn(
                E=np.array(sysdoc["E"], float), F=np.array(sysdoc["F"], float),
                B=np.array(sysdoc["B"], float),
                b=np.array(sysdoc["b"], float),
                C=np.array(sysdoc["C"], float), D=np.array(sysdoc["D"], float),
                activation=sysdoc.get("activation", "relu"))
            bundle = certificates.embed_cirnn(cirnn, np.array(sysdoc["P"], float))
    except KeyError as e:
        raise CliError(f"system file {args.system} is missing field {e}")
    except ValueError as e:
        raise CliError(f"embedding failed for {args.system}: {e}")
    models.save_model(bundle, args.out)
    cert_path = os.path.splitext(args.out)[0] + ".certificate.json"
    with open(cert_path, "w") as fh:
        json.dump(certificates.export_certificate(bundle), fh, indent=1)
        fh.write("\n")
    if not args.quiet:
        rep = certificates.feasibility_margin(bundle)
        print(f"embedded {args.kind} system -> {args.out} "
              f"(lmi_margin {rep.lmi_margin:.3g})")
    return 0


def _read_eval_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append((row["model"], float(row["sigma_u"]),
                         int(row["realization"]), float(row["nse"])))
    return rows


def _cmd_export_plots(args):
    os.makedirs(args.out, exist_ok=True)
    written = []

    if args.runs:
        with open(os.path.join(args.out, "fig2_validation.csv"), "w",
                  newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model", "epoch", "loss", "val_nse", "alpha",
                             "lr", "lmi_margin", "seconds"])
            for run_dir in args.runs:
                hist_path = os.path.join(run_dir, "history.csv")
                if not os.path.exists(hist_path):
                    raise CliError(f"no history.csv under {run_dir}")
                name = os.path.basename(os.path.normpath(run_dir))
                for r in training.TrainHistory.from_csv(hist_path).records:
                    writer.writerow([name, r.epoch, "%.17g" % r.mean_batch_loss,
                                     "%.17g" % r.val_nse, "%.17g" % r.alpha,
                                     "%.17g" % r.lr, "%.17g" % r.lmi_margin,
                                     "%.17g" % r.seconds])
        written.append("fig2_validation.csv")

    if args.eval:
        rows = _read_eval_csv(args.eval)
        by_key = {}
        for name, s, _, v in rows:
            by_key.setdefault((name, s), []).append(v)
        with open(os.path.join(args.out, "fig3_nse_quartiles.csv"), "w",
                  newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model", "sigma_u", "nse_q1", "nse_median",
                             "nse_q3", "nse_min", "nse_max"])
            for (name, s), vals in sorted(by_key.items()):
                q1, med, q3 = np.percentile(vals, [25, 50, 75])
                writer.writerow([name, "%g" % s] +
                                ["%.17g" % v for v in
                                 (q1, med, q3, min(vals), max(vals))])
        written.append("fig3_nse_quartiles.csv")

        if args.attacks:
            gamma_hat = {}
            gamma_cert = {}
            for path in args.attacks:
                doc = _load_json(path, "attack report")
                name = _model_name(doc.get("model", path))
                gamma_hat[name] = doc["gamma_hat"]
                if doc.get("gamma_cert"):
                    gamma_cert[name] = doc["gamma_cert"]
            for path in args.certs or []:
                doc = _load_json(path, "certificate")
                name = _model_name(doc.get("model", path))
                gamma_cert[name] = doc.get("gamma_cert")
            sigma_ref = args.nominal_sigma
            with open(os.path.join(args.out, "fig4_tradeoff.csv"), "w",
                      newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["model", "nse_median", "gamma_hat",
                                 "gamma_cert"])
                for name in sorted(gamma_hat):
                    vals = by_key.get((name, sigma_ref))
                    if vals is None:
                        raise CliError(
                            f"eval CSV has no rows for model {name!r} at "
                            f"sigma_u={sigma_ref:g}")
                    med = float(np.median(vals))
                    gc = gamma_cert.get(name)
                    writer.writerow([name, "%.17g" % med,
                                     "%.17g" % gamma_hat[name],
                                     "" if gc is None else "%.17g" % gc])
            written.append("fig4_tradeoff.csv")

    if args.data and args.models:
        ds = benchmark.load_dataset(args.data)
        sigma = args.trajectory_sigma
        if sigma not in ds.tests:
            raise CliError(f"dataset has no test split at sigma_u={sigma:g}")
        batch = ds.tests[sigma][0]
        named = {_model_name(p): _load_model(p) for p in args.models}
        cols = {"t": [(k + 1) * batch.dt for k in range(batch.T)],
                "u": batch.u[:, 0], "y_measured": batch.y[:, 0]}
        for name, model in named.items():
            y, _ = models.simulate(model, batch.u)
            cols[f"y_{name}"] = y[:, 0]
        with open(os.path.join(args.out, "fig6_trajectories.csv"), "w",
                  newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(list(cols))
            for k in range(batch.T):
                writer.writerow(["%.17g" % cols[c][k] for c in cols])
        written.append("fig6_trajectories.csv")

    if not written:
        raise CliError("nothing to export: pass --runs, --eval and/or "
                       "--data with --models")
    if not args.quiet:
        print("wrote " + ", ".join(written) + f" to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Argument wiring.

def _build_parser():
    parser = _Parser(prog="robust-rnn",
                     description="Train and evaluate recurrent models with "
                                 "incremental-stability certificates.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate the benchmark dataset")
    p.add_argument("--config", help="JSON with msd/splits/noise_snr_db/seed")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=_cmd_datagen)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--model", required=True,
                   help="one of " + ", ".join(_MODEL_KINDS))
    p.add_argument("--gamma", type=float, default=None,
                   help="gain bound for robust-gamma")
    p.add_argument("--n", type=int, default=10, help="state dimension")
    p.add_argument("--q", type=int, default=None,
                   help="nonlinearity channels (default: n)")
    p.add_argument("--config", help="JSON with TrainConfig fields")
    p.add_argument("--lr0", type=float, default=None)
    p.add_argument("--alpha0", type=float, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output run directory")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="NSE sweep over excitation levels")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--sigmas", default="1,3,10")
    p.add_argument("--realizations", type=int, default=30)
    p.add_argument("--length", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("attack", help="gradient-ascent gain lower bound")
    p.add_argument("--model", required=True)
    p.add_argument("--config", help="JSON with AttackConfig fields")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--restarts", type=int, default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--step-size", dest="step_size", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output report JSON")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=_cmd_attack)

    p = sub.add_parser("certify", help="tightest certifiable gain bound")
    p.add_argument("--model", required=True)
    p.add_argument("--lo", type=float, default=1e-6)
    p.add_argument("--hi", type=float, default=1e6)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--out", required=True, help="output certificate JSON")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=_cmd_certify)

    p = sub.add_parser("embed", help="embed an LTI system or a ci-RNN")
    p.add_argument("--kind", choices=("lti", "cirnn"), required=True)
    p.add_argument("--system", required=True, help="JSON system description")
    p.add_argument("--out", required=True, help="output model JSON")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=_cmd_embed)

    p = sub.add_parser("export-plots", help="aggregate artifacts into "
                                            "figure-shaped CSV tables")
    p.add_argument("--runs", nargs="*", default=[],
                   help="training run directories (validation curves)")
    p.add_argument("--eval", default=None, help="eval sweep CSV")
    p.add_argument("--attacks", nargs="*", default=[],
                   help="attack report JSONs")
    p.add_argument("--certs", nargs="*", default=[],
                   help="certify report JSONs")
    p.add_argument("--data", default=None, help="dataset directory")
    p.add_argument("--models", nargs="*", default=[],
                   help="model JSONs for the trajectory table")
    p.add_argument("--nominal-sigma", dest="nominal_sigma", type=float,
                   default=3.0)
    p.add_argument("--trajectory-sigma", dest="trajectory_sigma", type=float,
                   default=10.0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=_cmd_export_plots)
    return parser


def run(argv=None):
    """Parse argv and execute one subcommand. Exit codes: 0 success,
    1 validation error, 2 runtime failure."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except (FloatingPointError, RuntimeError, OSError, ValueError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


def main():
    return run()


if __name__ == "__main__":
    sys.exit(main())
