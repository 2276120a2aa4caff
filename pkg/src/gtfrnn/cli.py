"""Experiment command line: dataset generation, training, evaluation,
alpha line search, gradient-norm diagnostics, and run aggregation.

Configuration is a flat key=value text file; command-line --set
overrides win. Unknown keys are rejected. Exit codes: 0 success,
2 configuration error, 3 numeric divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import benchmarks, data_io, gtf, metrics, model, trainer
from .errors import ConfigError, DivergenceError, FormatError

log = logging.getLogger(__name__)

# key -> (parser, default). One flat namespace shared by all commands;
# each command reads the subset it needs.
CONFIG_SCHEMA = {
    "system": (str, "lorenz63"),
    "dt": (float, 0.01),
    "transient_steps": (int, 10_000),
    "train_steps": (int, 100_000),
    "test_steps": (int, 10_000),
    "noise_frac": (float, 0.05),
    "standardize": (lambda s: s.lower() in ("1", "true", "yes"), True),
    "observe_slow_only": (lambda s: s.lower() in ("1", "true", "yes"), False),
    "seed": (int, 0),
    "runs": (int, 1),

    "M": (int, 3),
    "L": (int, 50),
    "clipped": (lambda s: s.lower() in ("1", "true", "yes"), False),
    "obs_mode": (str, "identity"),          # identity | trainable

    "profile": (str, "desk"),               # desk | paper | custom
    "epochs": (int, None),
    "batches_per_epoch": (int, None),
    "batch_size": (int, 16),
    "seq_len": (int, 200),
    "lr_start": (float, 1e-3),
    "lr_end": (float, 1e-6),
    "gtf_mode": (str, "fixed"),              # fixed | adaptive | sparse
    "alpha": (float, 0.15),
    "tau": (int, 5),
    "gamma": (float, 0.999),
    "update_interval": (int, 5),
    "alpha_method": (str, "arithmetic"),
    "lambda_reg": (float, 0.0),
    "lambda_cn": (float, 0.0),

    "dstsp_method": (str, "auto"),           # auto | binning | gmm
    "bins_per_dim": (int, 30),
    "sigma2": (float, 1.0),
    "gmm_samples": (int, 10_000),
    "pe_steps": (lambda s: tuple(int(v) for v in s.split("/")), (20,)),
    "lyap_steps": (int, 10_000),
}

PROFILES = {
    "desk": {"epochs": 500, "batches_per_epoch": 20},
    "paper": {"epochs": 5000, "batches_per_epoch": 50},
}


def parse_config_file(path) -> dict:
    """Flat key=value lines; '#' comments and blank lines ignored."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def resolve_config(raw: dict) -> dict:
    """Validate against the schema, apply types, profiles then defaults."""
    cfg = {}
    for key, value in raw.items():
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key: {key!r}")
        parse, _ = CONFIG_SCHEMA[key]
        if isinstance(value, str):
            try:
                cfg[key] = parse(value)
            except (ValueError, TypeError):
                raise ConfigError(f"bad value for {key!r}: {value!r}") from None
        else:
            cfg[key] = value
    for key, (_, default) in CONFIG_SCHEMA.items():
        cfg.setdefault(key, default)
    profile = cfg["profile"]
    if profile not in PROFILES and profile != "custom":
        raise ConfigError(f"unknown profile {profile!r}")
    for key, value in PROFILES.get(profile, {}).items():
        if cfg[key] is None:
            cfg[key] = value
    if cfg["epochs"] is None or cfg["batches_per_epoch"] is None:
        raise ConfigError("custom profile requires epochs and "
                          "batches_per_epoch")
    return cfg


def load_config(args) -> dict:
    raw = parse_config_file(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        raw[key.strip()] = value.strip()
    return resolve_config(raw)


def config_hash(cfg: dict) -> str:
    blob = json.dumps({k: repr(v) for k, v in sorted(cfg.items())})
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _training_config(cfg: dict, seed: int | None = None) -> trainer.TrainingConfig:
    mode = cfg["gtf_mode"]
    if mode not in ("fixed", "adaptive", "sparse"):
        raise ConfigError(f"unknown gtf_mode {mode!r}")
    alpha = 1.0 if mode == "adaptive" else cfg["alpha"]
    state = gtf.GtfState(alpha=alpha, mode=mode, tau=cfg["tau"],
                         gamma=cfg["gamma"],
                         update_interval=cfg["update_interval"])
    reg = trainer.RegularizationConfig(lambda_reg=cfg["lambda_reg"],
                                       lambda_cn=cfg["lambda_cn"])
    return trainer.TrainingConfig(
        epochs=cfg["epochs"], batches_per_epoch=cfg["batches_per_epoch"],
        batch_size=cfg["batch_size"], seq_len=cfg["seq_len"],
        lr_start=cfg["lr_start"], lr_end=cfg["lr_end"],
        seed=cfg["seed"] if seed is None else seed,
        gtf=state, reg=reg, alpha_method=cfg["alpha_method"])


def _metric_configs(cfg: dict):
    method = cfg["dstsp_method"]
    if method not in ("auto", "binning", "gmm"):
        raise ConfigError(f"unknown dstsp_method {method!r}")
    dstsp = metrics.DstspConfig(
        method="binning" if method == "auto" else method,
        bins_per_dim=cfg["bins_per_dim"], sigma2=cfg["sigma2"],
        n_samples=cfg["gmm_samples"], seed=cfg["seed"],
        binning_max_dim=0 if method == "gmm" else
        (10**9 if method == "binning" else 5))
    return dstsp


def write_csv(path, rows, fieldnames=None) -> None:
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def _new_model(cfg: dict, dataset, seed: int):
    params = model.init_params(cfg["M"], cfg["L"], cfg["clipped"], seed=seed)
    obs = model.init_observation(dataset.N, cfg["M"],
                                 trainable=cfg["obs_mode"] == "trainable")
    return params, obs


# --------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = load_config(args)
    spec = benchmarks.OdeSystemSpec(cfg["system"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    total = cfg["train_steps"] + cfg["test_steps"]
    icfg = benchmarks.IntegratorConfig(
        dt=cfg["dt"], readout_interval=cfg["dt"],
        transient_steps=cfg["transient_steps"], total_steps=total,
        seed=cfg["seed"])
    # one orbit; noise goes on the training portion only, and the
    # standardization is fit on the clean full orbit
    clean = benchmarks.make_dataset(spec, icfg, noise_frac=0.0,
                                    standardize=cfg["standardize"],
                                    seed=cfg["seed"],
                                    observe_slow_only=cfg["observe_slow_only"])
    train_data = clean.data[:cfg["train_steps"]].copy()
    test_data = clean.data[cfg["train_steps"]:]
    if cfg["noise_frac"] > 0:
        rng = np.random.default_rng(cfg["seed"] + 1)
        train_data += rng.standard_normal(train_data.shape) * (
            cfg["noise_frac"] * train_data.std(axis=0))
    train = benchmarks.TrajectoryDataset(
        train_data, clean.dt, clean.per_dim_mean, clean.per_dim_std,
        clean.source + " split=train")
    test = benchmarks.TrajectoryDataset(
        test_data, clean.dt, clean.per_dim_mean, clean.per_dim_std,
        clean.source + " split=test")
    data_io.save_dataset(train, out / "train.dsds")
    data_io.save_dataset(test, out / "test.dsds")
    manifest = {k: cfg[k] for k in ("system", "dt", "transient_steps",
                                    "train_steps", "test_steps",
                                    "noise_frac", "standardize", "seed")}
    (out / "manifest.txt").write_text(
        "".join(f"{k}={v}\n" for k, v in manifest.items()))
    print(f"wrote {out / 'train.dsds'} ({train.T} x {train.N}) and "
          f"{out / 'test.dsds'} ({test.T} x {test.N})")
    return 0


def _run_dir(base, cfg: dict, seed: int | None = None) -> Path:
    tag = config_hash(cfg)
    name = f"run-{tag}" if seed is None else f"run-{tag}-s{seed}"
    d = Path(base) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_train(args) -> int:
    cfg = load_config(args)
    dataset = data_io.load_dataset(args.data)
    run = _run_dir(args.out, cfg)
    params, obs = _new_model(cfg, dataset, cfg["seed"])
    tcfg = _training_config(cfg)
    params, obs, rows, state = trainer.train(dataset, params, obs, tcfg)
    model.save_checkpoint(run / "model.shpl", params, obs,
                          manifest={**{k: cfg[k] for k in
                                       ("system", "M", "L", "clipped",
                                        "gtf_mode", "alpha", "seed",
                                        "epochs", "batches_per_epoch")},
                                    "final_alpha": state.alpha})
    write_csv(run / "train_log.csv", rows)
    (run / "config.txt").write_text(
        "".join(f"{k}={cfg[k]}\n" for k in sorted(cfg)))
    print(f"trained {len(rows)} updates; final mse {rows[-1]['mse']:.4g}; "
          f"alpha {rows[-1]['alpha']:.4g}; checkpoint {run / 'model.shpl'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args)
    params, obs, _ = model.load_checkpoint(args.checkpoint)
    test = data_io.load_dataset(args.test)
    report = metrics.evaluate(params, obs, test.data,
                              dstsp=_metric_configs(cfg),
                              pe_steps=cfg["pe_steps"],
                              lyap_steps=cfg["lyap_steps"])
    flat = report.as_flat_dict()
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.txt").write_text(
        "".join(f"{k}={v}\n" for k, v in flat.items()))
    write_csv(out / "metrics.csv", [flat])
    for k, v in flat.items():
        print(f"{k}={v}")
    if report.diverging:
        return 3
    return 0


def cmd_linesearch(args) -> int:
    cfg = load_config(args)
    dataset = data_io.load_dataset(args.data)
    test = data_io.load_dataset(args.test)
    alphas = [float(a) for a in args.alphas.split(",")] if args.alphas \
        else [round(0.05 * i, 2) for i in range(21)]
    out_rows = []
    for alpha in alphas:
        dvals, hvals, div = [], [], 0
        for run in range(cfg["runs"]):
            seed = cfg["seed"] + run
            tcfg = _training_config({**cfg, "gtf_mode": "fixed",
                                     "alpha": alpha}, seed=seed)
            params, obs = _new_model(cfg, dataset, seed)
            try:
                params, obs, _, _ = trainer.train(dataset, params, obs, tcfg)
                rep = metrics.evaluate(params, obs, test.data,
                                       dstsp=_metric_configs(cfg),
                                       pe_steps=cfg["pe_steps"],
                                       lyap_steps=1000)
            except DivergenceError:
                rep = metrics.MetricsReport(diverging=True)
            if rep.diverging or not np.isfinite(rep.d_stsp):
                div += 1
            else:
                dvals.append(rep.d_stsp)
                hvals.append(rep.d_h)
        row = {"alpha": alpha, "runs": cfg["runs"], "diverging": div}
        for name, vals in (("d_stsp", dvals), ("d_h", hvals)):
            med, mad = median_mad(vals)
            row[f"{name}_median"] = med
            row[f"{name}_mad"] = mad
        out_rows.append(row)
        log.info("alpha=%.2f d_stsp=%s", alpha, row["d_stsp_median"])
    write_csv(args.out, out_rows)
    print(f"wrote {args.out} ({len(out_rows)} alphas)")
    return 0


def cmd_gradnorms(args) -> int:
    cfg = load_config(args)
    params, obs, _ = model.load_checkpoint(args.checkpoint)
    dataset = data_io.load_dataset(args.data)
    alphas = [float(a) for a in args.alphas.split(",")]
    rows = []
    for t in range(args.t_max):
        rows.append({"t": t + 1})
    for alpha in alphas:
        series = gtf.jacobian_product_norm_series(
            params, obs, dataset.data, alpha, args.t_max)
        for t, v in enumerate(series):
            rows[t][f"log10_norm_alpha_{alpha:g}"] = v
    write_csv(args.out, rows)
    print(f"wrote {args.out} ({len(alphas)} alpha columns, "
          f"t <= {args.t_max})")
    return 0


def median_mad(values):
    vals = [v for v in values if np.isfinite(v)]
    if not vals:
        return float("nan"), float("nan")
    med = float(np.median(vals))
    mad = float(np.median(np.abs(np.asarray(vals) - med)))
    return med, mad


def cmd_report(args) -> int:
    paths = sorted(Path(args.rundir).glob("**/metrics.csv"))
    if not paths:
        raise FormatError(f"no metrics.csv files under {args.rundir}")
    rows = []
    for p in paths:
        with open(p, newline="") as fh:
            rows.extend(csv.DictReader(fh))
    diverging = sum(1 for r in rows if r.get("status") == "diverging")
    ok = [r for r in rows if r.get("status") != "diverging"]
    keys = [k for k in (ok[0].keys() if ok else []) if k != "status"]
    table = []
    for key in keys:
        try:
            vals = [float(r[key]) for r in ok]
        except (ValueError, KeyError):
            continue
        med, mad = median_mad(vals)
        table.append({"metric": key, "median": med, "mad": mad,
                      "runs": len(ok), "diverging_excluded": diverging})
    write_csv(args.out, table)
    print(f"{len(rows)} runs ({diverging} diverging, excluded)")
    for row in table:
        print(f"{row['metric']}: {row['median']:.6g} +- {row['mad']:.6g}")
    return 0


# --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gtfrnn")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")

    sp = sub.add_parser("generate", help="simulate a benchmark dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("train", help="train a model on a dataset")
    common(sp)
    sp.add_argument("--data", required=True, help="training .dsds file")
    sp.add_argument("--out", required=True, help="run directory root")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--test", required=True, help="test .dsds file")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("linesearch", help="train across an alpha grid")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--alphas", default=None,
                    help="comma list; default 0.00..1.00 step 0.05")
    sp.add_argument("--out", required=True, help="output CSV path")
    sp.set_defaults(func=cmd_linesearch)

    sp = sub.add_parser("gradnorms", help="Jacobian-product norm series")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--alphas", required=True, help="comma list")
    sp.add_argument("--t-max", type=int, default=500)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gradnorms)

    sp = sub.add_parser("report", help="aggregate run metrics")
    sp.add_argument("--rundir", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
