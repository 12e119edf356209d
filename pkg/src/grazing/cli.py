"""``graze`` command line: gen-data, train, eval, crossval, plan, gradcheck.

Every run writes a JSON sidecar with its fully resolved configuration. Errors go
to stderr as ``graze: error[CODE]: message`` with a matching nonzero exit code.
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import compute_channel_stats, index_by_site, preprocess, split_train_val
from .evaluation import format_table, to_csv, to_json
from .model import ABLATIONS, configure_ablation
from .planner import InspectionScenario, default_grid, emit_curve, monte_carlo, summary
from .storage import FormatError, load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .synth import SynthConfig, synth_generate
from .training import TemporalDropout, TrainConfig, cross_validate, evaluate_ensemble, train_ensemble

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_CONFIG = 4
EXIT_MISSING = 5
EXIT_NUMERIC = 6
EXIT_CHECK_FAILED = 7
EXIT_INTERNAL = 1

_CODES = {
    EXIT_FORMAT: "E_FORMAT", EXIT_CONFIG: "E_CONFIG", EXIT_MISSING: "E_MISSING",
    EXIT_NUMERIC: "E_NUMERIC", EXIT_CHECK_FAILED: "E_CHECK", EXIT_INTERNAL: "E_INTERNAL", EXIT_USAGE: "E_USAGE",
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(EXIT_USAGE, message)


def _log(args, msg: str) -> None:
    if args.verbose >= 1:
        print(msg, file=sys.stderr, flush=True)


def resolve_threads(flag: int) -> int:
    env = os.environ.get("GRAZE_THREADS")
    if env is not None and env.strip():
        try:
            n = int(env)
        except ValueError:
            raise CliError(EXIT_CONFIG, f"GRAZE_THREADS must be an integer, got {env!r}") from None
    else:
        n = flag
    if n < 1:
        raise CliError(EXIT_CONFIG, "thread count must be >= 1")
    return n


def write_sidecar(path, command: str, config: dict, extra: dict | None = None) -> Path:
    path = Path(path)
    record = {
        "command": command,
        "version": __version__,
        "config": config,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    if extra:
        record.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
    return path


def _write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(args) -> int:
    cfg = SynthConfig(n_samples=args.n, balance=args.balance, cadence_days=args.cadence,
                      cadence_jitter=args.jitter, cloud_prob=args.cloud_prob, noise=args.noise,
                      difficulty=args.difficulty)
    try:
        cfg.validate()
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    t = time.perf_counter()
    samples = synth_generate(cfg, args.seed)
    save_dataset(samples, args.out, cfg.to_json(), args.seed)
    n_gz = sum(s.label for s in samples)
    _log(args, f"wrote {len(samples)} samples ({n_gz} grazing) to {args.out} in {time.perf_counter() - t:.1f}s")
    sidecar = args.sidecar or Path(args.out) / "run.json"
    write_sidecar(sidecar, "gen-data", {"synth": cfg.to_json(), "seed": args.seed, "out": str(args.out)},
                  {"n_samples": len(samples), "n_grazing": n_gz})
    print(json.dumps({"samples": len(samples), "grazing": n_gz, "out": str(args.out)}))
    return EXIT_OK


# ------------------------------------------------------------ data helpers


def load_preprocessed(data_dir):
    try:
        manifest, raw = load_dataset(data_dir)
    except FileNotFoundError as exc:
        raise CliError(EXIT_MISSING, str(exc)) from None
    kept = [p for p in (preprocess(s) for s in raw) if p is not None]
    if not kept:
        raise CliError(EXIT_CONFIG, f"no usable samples in {data_dir} after preprocessing")
    return manifest, kept, len(raw) - len(kept)


def select_split(samples, split: str, fraction: float, seed: int):
    if split == "all":
        return list(samples)
    train_ids, val_ids = split_train_val(samples, fraction, seed)
    by_id = index_by_site(samples)
    return [by_id[i] for i in (train_ids if split == "train" else val_ids)]


def train_config_from(args) -> TrainConfig:
    try:
        return TrainConfig(
            epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr, flip_prob=args.flip_prob,
            crop_enabled=not args.no_crop,
            temporal_dropout=TemporalDropout(args.dropout_series, args.dropout_step, args.min_keep),
            augment=not args.no_augment, member_count=args.members, base_seed=args.seed)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None


def _progress(args):
    if args.verbose < 2:
        return None

    def report(seed, epoch, loss, acc):
        print(f"member seed {seed} epoch {epoch}: loss {loss:.4f} acc {acc:.3f}", file=sys.stderr, flush=True)

    return report


# ------------------------------------------------------------------- train


def cmd_train(args) -> int:
    tcfg = train_config_from(args)
    try:
        mcfg = configure_ablation(args.ablation)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    _, samples, dropped = load_preprocessed(args.data)
    train = select_split(samples, args.split, args.train_fraction, args.split_seed)
    threads = resolve_threads(args.threads)
    _log(args, f"training {tcfg.member_count} member(s) for {tcfg.epochs} epochs on {len(train)} samples "
               f"({dropped} dropped by preprocessing), {threads} thread(s)")
    t = time.perf_counter()
    stats = compute_channel_stats(train)
    ensemble, logs = train_ensemble(train, mcfg, tcfg, stats, threads, _progress(args))
    seconds = time.perf_counter() - t
    split_info = {"split": args.split, "train_fraction": args.train_fraction, "split_seed": args.split_seed}
    ensemble.meta.update(split_info)
    save_checkpoint(ensemble, args.out)
    _write(str(args.out) + ".log.json", json.dumps([log.to_json() for log in logs], indent=1) + "\n")
    config = {"train": tcfg.to_json(), "model": mcfg.to_json(), "data": str(args.data), "out": str(args.out),
              "threads": threads, **split_info}
    extra = {"n_train": len(train), "dropped": dropped, "seconds": seconds,
             "final_loss": [log.final["loss"] for log in logs]}
    if tcfg.epochs != TrainConfig.epochs:
        extra["epoch_override"] = {"default": TrainConfig.epochs, "used": tcfg.epochs}
    write_sidecar(args.sidecar or str(args.out) + ".run.json", "train", config, extra)
    print(json.dumps({"checkpoint": str(args.out), "members": len(ensemble.members), "seconds": round(seconds, 2)}))
    return EXIT_OK


# -------------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    try:
        ensemble = load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise CliError(EXIT_MISSING, str(exc)) from None
    _, samples, _ = load_preprocessed(args.data)
    channels = samples[0].reflectance.shape[-1]
    needed = max(ensemble.config.band_subset) + 1
    if channels < needed or (ensemble.stats is not None and ensemble.stats.mean.shape[0] != channels):
        raise CliError(EXIT_CONFIG, f"checkpoint expects {ensemble.stats.mean.shape[0] if ensemble.stats else needed}"
                                    f" dataset bands, dataset has {channels}")
    meta = ensemble.meta
    fraction = args.train_fraction if args.train_fraction is not None else meta.get("train_fraction", 0.8)
    split_seed = args.split_seed if args.split_seed is not None else meta.get("split_seed", 0)
    chosen = select_split(samples, args.split, fraction, split_seed)
    ev = evaluate_ensemble(ensemble, chosen)
    rows = [("Ensemble", ev.report)]
    if args.members_report:
        rows += [(f"Member {m.seed}", r) for m, r in zip(ensemble.members, ev.member_reports())]
    print(format_table(rows))
    member_f1 = [r.f1 for r in ev.member_reports()]
    report = {"split": args.split, "n": len(chosen), "confusion": asdict(ev.confusion),
              "metrics": ev.report.to_json(), "member_f1": member_f1,
              "mean_member_f1": float(np.mean(member_f1))}
    if args.out:
        _write(args.out, json.dumps(report, indent=1) + "\n")
    if args.csv:
        _write(args.csv, to_csv(rows))
    config = {"checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split,
              "train_fraction": fraction, "split_seed": split_seed}
    sidecar = args.sidecar or (str(args.out) + ".run.json" if args.out else None)
    if sidecar:
        write_sidecar(sidecar, "eval", config, {"n": len(chosen)})
    return EXIT_OK


# ---------------------------------------------------------------- crossval


def cmd_crossval(args) -> int:
    tcfg = train_config_from(args)
    try:
        mcfg = configure_ablation(args.ablation)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    _, samples, _ = load_preprocessed(args.data)
    threads = resolve_threads(args.threads)
    result = cross_validate(samples, mcfg, tcfg, args.folds, args.split_seed, args.train_fraction, threads,
                            _progress(args))
    rows = result.rows()
    print(format_table(rows))
    if args.out:
        _write(args.out, to_csv(rows))
    if args.json:
        _write(args.json, to_json(rows))
    config = {"train": tcfg.to_json(), "model": mcfg.to_json(), "data": str(args.data), "folds": args.folds,
              "split_seed": args.split_seed, "train_fraction": args.train_fraction, "threads": threads}
    extra = {}
    if tcfg.epochs != TrainConfig.epochs:
        extra["epoch_override"] = {"default": TrainConfig.epochs, "used": tcfg.epochs}
    sidecar = args.sidecar or (str(args.out) + ".run.json" if args.out else None)
    if sidecar:
        write_sidecar(sidecar, "crossval", config, extra)
    return EXIT_OK


# -------------------------------------------------------------------- plan


def scenario_from(args) -> InspectionScenario:
    try:
        if args.scenario:
            base = InspectionScenario.load(args.scenario)
        else:
            base = InspectionScenario()
        overrides = {k: v for k, v in (("n_sites", args.n_sites), ("nongrazed_fraction", args.nongrazed_frac),
                                       ("precision_no", args.precision_no), ("recall_no", args.recall_no))
                     if v is not None}
        return replace(base, **overrides)
    except FileNotFoundError as exc:
        raise CliError(EXIT_MISSING, str(exc)) from None
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_CONFIG, f"invalid scenario: {exc}") from None


def cmd_plan(args) -> int:
    s = scenario_from(args)
    try:
        curve = emit_curve(s, default_grid(args.grid_step))
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    visits = args.visits
    if any(not 0 <= v <= s.n_sites for v in visits):
        raise CliError(EXIT_CONFIG, f"visit counts must lie in [0, {s.n_sites}]")
    out = summary(s, visits)
    if args.montecarlo:
        for row in out["found"]:
            v = row["visits"]
            try:
                t = monte_carlo(s, v, args.montecarlo, args.mc_seed, "targeted")
                r = monte_carlo(s, v, args.montecarlo, args.mc_seed, "random")
            except ValueError as exc:
                raise CliError(EXIT_CONFIG, str(exc)) from None
            row["mc_targeted"] = {"mean": t.mean, "stderr": t.stderr, "trials": t.trials}
            row["mc_random"] = {"mean": r.mean, "stderr": r.stderr, "trials": r.trials}
    if args.out:
        _write(args.out, curve.to_csv())
        out["curve"] = str(args.out)
    print(json.dumps(out, indent=1))
    config = {"scenario": s.to_json(), "visits": visits, "grid_step": args.grid_step,
              "montecarlo": args.montecarlo, "mc_seed": args.mc_seed, "out": args.out}
    sidecar = args.sidecar or (str(args.out) + ".run.json" if args.out else None)
    if sidecar:
        write_sidecar(sidecar, "plan", config)
    return EXIT_OK


# --------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    from .oracles import TOLERANCE, run_suite

    results = run_suite(args.seeds, args.per_group)
    ok = True
    for r in results:
        ok &= r.passed
        extra = f", {r.skipped} kink-crossing coordinates skipped" if r.skipped else ""
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<15} max rel err {r.max_error:.3e} "
              f"over {r.seeds} seeds ({r.seconds:.1f}s{extra})")
    if args.sidecar:
        write_sidecar(args.sidecar, "gradcheck", {"seeds": args.seeds, "per_group": args.per_group,
                                                  "tolerance": TOLERANCE},
                      {"results": [{"name": r.name, "max_error": r.max_error, "skipped": r.skipped}
                                   for r in results]})
    if not ok:
        raise CliError(EXIT_CHECK_FAILED, f"gradient check above tolerance {TOLERANCE}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _add_train_flags(p) -> None:
    d = TrainConfig()
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--seed", type=int, default=0, help="base seed; member i uses seed + i")
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--members", type=int, default=d.member_count)
    p.add_argument("--ablation", default="main", choices=ABLATIONS)
    p.add_argument("--flip-prob", type=float, default=d.flip_prob)
    p.add_argument("--no-crop", action="store_true", help="disable random cropping")
    p.add_argument("--dropout-series", type=float, default=d.temporal_dropout.series_prob)
    p.add_argument("--dropout-step", type=float, default=d.temporal_dropout.step_prob)
    p.add_argument("--min-keep", type=int, default=d.temporal_dropout.min_keep)
    p.add_argument("--no-augment", action="store_true", help="disable all augmentation")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="worker threads (GRAZE_THREADS overrides)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="graze", description="Grazing detection on field image time series.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("--sidecar", help="path of the JSON record of the resolved configuration")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    d = SynthConfig()
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=d.n_samples)
    p.add_argument("--balance", type=float, default=d.balance, help="fraction labelled grazing")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--difficulty", type=float, default=d.difficulty)
    p.add_argument("--cloud-prob", type=float, default=d.cloud_prob)
    p.add_argument("--noise", type=float, default=d.noise)
    p.add_argument("--cadence", type=int, default=d.cadence_days)
    p.add_argument("--jitter", type=int, default=d.cadence_jitter)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train an ensemble")
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--split", default="train", choices=("train", "all"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=("val", "train", "all"))
    p.add_argument("--train-fraction", type=float, default=None, help="defaults to the checkpoint's")
    p.add_argument("--split-seed", type=int, default=None, help="defaults to the checkpoint's")
    p.add_argument("--out", help="JSON report path")
    p.add_argument("--csv", help="CSV report path")
    p.add_argument("--members-report", action="store_true", help="also list every member")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crossval", parents=[common], help="repeated random-split cross-validation")
    _add_train_flags(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--out", help="CSV table path")
    p.add_argument("--json", help="JSON table path")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("plan", parents=[common], help="inspection planning curves")
    p.add_argument("--scenario", help="JSON file with n_sites, nongrazed_fraction, precision_no, recall_no")
    p.add_argument("--n-sites", type=int)
    p.add_argument("--nongrazed-frac", type=float)
    p.add_argument("--precision-no", type=float)
    p.add_argument("--recall-no", type=float)
    p.add_argument("--visits", type=int, nargs="+", default=[100, 401])
    p.add_argument("--grid-step", type=float, default=0.001)
    p.add_argument("--montecarlo", type=int, default=0, metavar="TRIALS")
    p.add_argument("--mc-seed", type=int, default=0)
    p.add_argument("--out", help="curve CSV path")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient oracle suite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--per-group", type=int, default=40, help="sampled coordinates per parameter group")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except FormatError as exc:
        code, msg = EXIT_FORMAT, str(exc)
    except FileNotFoundError as exc:
        code, msg = EXIT_MISSING, str(exc)
    except FloatingPointError as exc:
        code, msg = EXIT_NUMERIC, str(exc)
    except ValueError as exc:
        code, msg = EXIT_CONFIG, str(exc)
    except OSError as exc:
        code, msg = EXIT_MISSING, str(exc)
    print(f"graze: error[{_CODES.get(code, 'E_INTERNAL')}]: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
