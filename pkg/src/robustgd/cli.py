"""Command-line runner: ``robustgd {gen,train,spectrum,hist-loss,verify,reproduce}``.

Configs are JSON files mirroring :class:`ExperimentConfig`; ``--preset`` starts
from a named config, ``--set a.b=value`` overrides single keys (values parsed
as JSON when possible) and ``--emit-config`` prints the resolved config.
Outputs depend only on the config and seeds; wall-clock data goes to
``meta.json``.

Exit codes: 0 success, 1 invalid config or arguments, 2 runtime failure,
3 a verification check failed.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import save_dataset_csv
from .experiments import (
    PRESETS,
    ConfigError,
    ExperimentConfig,
    build_dataset,
    for_seed,
    parse_value,
    run_fig4,
    run_suite,
    run_training,
    set_path,
    spectral_gap,
    spectrum,
    write_loss_histograms,
    write_suite,
)
from .network import save_weights
from .spectral import write_histogram_csv
from .verify import jsonable, suite_failed

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--preset", choices=sorted(PRESETS), help="start from a named config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. data.rho=0.2 (repeatable)")
    p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    p.add_argument("--seeds", help="run a seed range a..b, one subdirectory per seed")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes for --seeds")
    p.add_argument("--emit-config", action="store_true", help="print the resolved config and exit")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="robustgd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _common(sub.add_parser("gen", help="write the dataset CSV"))
    _common(sub.add_parser("train", help="train and write the trace CSV and final weights"))
    p = sub.add_parser("spectrum", help="Jacobian singular-value histograms")
    _common(p)
    p.add_argument("--at", choices=("init", "final", "both"), default="both")
    p = sub.add_parser("hist-loss", help="per-sample loss histograms, clean vs corrupted")
    _common(p)
    p.add_argument("--iters", help="comma-separated iterations (default: config hist_iters)")
    _common(sub.add_parser("verify", help="run the selected verifiers"))
    p = sub.add_parser("reproduce", help="run a named experiment end to end")
    p.add_argument("name", choices=sorted(PRESETS))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", type=Path)
    p.add_argument("--seeds", default=None, help="seed range a..b (fig4 default 0..4)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--emit-config", action="store_true")
    return parser


# --- config resolution ----------------------------------------------------------


def resolve_config(args) -> ExperimentConfig:
    preset = getattr(args, "preset", None) or getattr(args, "name", None)
    raw = PRESETS[preset].to_dict() if preset else ExperimentConfig().to_dict()
    if getattr(args, "config", None) is not None:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        raw = _merge(raw, loaded)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        raw = set_path(raw, key.strip(), parse_value(value))
    if args.out is not None:
        raw["output_dir"] = str(args.out)
    return ExperimentConfig.from_dict(raw)


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def parse_seeds(text: str) -> list[int]:
    lo, sep, hi = text.partition("..")
    try:
        if not sep:
            return [int(lo)]
        a, b = int(lo), int(hi)
    except ValueError:
        raise ConfigError(f"--seeds expects a..b, got {text!r}") from None
    if b < a:
        raise ConfigError(f"--seeds range {text!r} is empty")
    return list(range(a, b + 1))


def _write_common(cfg: ExperimentConfig, out: Path, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    meta = {
        "command": command,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "written_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


# --- commands ----------------------------------------------------------------------


def cmd_gen(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.output_dir)
    _write_common(cfg, out, "gen")
    save_dataset_csv(build_dataset(cfg.data), out / "dataset.csv")
    return EXIT_OK


def _train_summary(run) -> dict:
    tr = run.trace
    return {
        "eta": tr.eta,
        "iterations": tr.iters[-1],
        "stop_reason": tr.stop_reason,
        "k": run.state0.k,
        "lambda_C": run.lambda_C,
        "lambda_se": run.lambda_se,
        "final_loss": tr.loss[-1],
        "final_err_clean": tr.err_clean[-1],
        "final_err_corrupt": tr.err_corrupt[-1],
    }


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.output_dir)
    _write_common(cfg, out, "train")
    run = run_training(cfg)
    run.trace.to_csv(out / "trace.csv")
    save_weights(out / "weights.bin", run.trace.final_state.W)
    save_dataset_csv(run.dataset, out / "dataset.csv")
    (out / "train.json").write_text(json.dumps(jsonable(_train_summary(run)), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_spectrum(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.output_dir)
    _write_common(cfg, out, "spectrum")
    run = run_training(cfg)
    edges, counts, reports = spectrum(run, args.at, cfg.bins)
    write_histogram_csv(out / "spectrum_hist.csv", edges, **counts)
    K = run.dataset.num_clusters
    summary = {name: dict(rep.to_dict(), top_K_gap=spectral_gap(rep.singular_values, K))
               for name, rep in reports.items()}
    (out / "spectrum.json").write_text(json.dumps(jsonable(summary), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_hist_loss(cfg: ExperimentConfig, args) -> int:
    iters = cfg.hist_iters
    if args.iters:
        try:
            iters = tuple(int(s) for s in args.iters.split(","))
        except ValueError:
            raise ConfigError(f"--iters expects comma-separated integers, got {args.iters!r}") from None
    if not iters:
        raise ConfigError("no iterations given: pass --iters or set hist_iters")
    if any(i < 0 for i in iters):
        raise ConfigError("iterations must be non-negative")
    out = Path(cfg.output_dir)
    _write_common(cfg, out, "hist-loss")
    tc = replace(cfg.train, max_iters=max(iters), record_every=1, stop_rule="fixed-T")
    run = run_training(cfg, tc)
    write_loss_histograms(run, iters, out, cfg.bins)
    return EXIT_OK


def cmd_verify(cfg: ExperimentConfig, args) -> int:
    if not cfg.verify.names:
        raise ConfigError("no verifiers selected: set verify.names")
    out = Path(cfg.output_dir)
    _write_common(cfg, out, "verify")
    reports = run_suite(cfg)
    write_suite(reports, out)
    for rep in reports:
        status = "n/a" if not rep.applicable else ("PASS" if rep.holds else "FAIL")
        print(f"{status:4s} {rep.name}: lhs={rep.lhs:.6g} rhs={rep.rhs:.6g}")
    return EXIT_VERIFY if suite_failed(reports) else EXIT_OK


def cmd_reproduce(cfg: ExperimentConfig, args) -> int:
    if args.name != "fig4":
        return cmd_verify(cfg, args)
    out = Path(cfg.output_dir)
    _write_common(cfg, out, "reproduce fig4")
    seeds = parse_seeds(args.seeds) if args.seeds else list(range(5))
    results = _map(_fig4_job, [(cfg, s, str(out / f"seed_{s}")) for s in seeds], args.workers)
    passed = sum(r["passed"] for r in results)
    (out / "fig4_summary.json").write_text(
        json.dumps(jsonable({"per_seed": results, "passed": passed, "required": max(len(seeds) - 1, 1)}),
                   indent=2, sort_keys=True) + "\n")
    for r in results:
        print(f"seed {r['seed']}: early err {r['early_error']:.4f} at {r['early_iter']}, "
              f"late err {r['late_error']:.4f}, overlap {r['overlap_early']:.3f} -> {r['overlap_late']:.3f}, "
              f"{'ok' if r['passed'] else 'FAIL'}")
    return EXIT_OK if passed >= max(len(seeds) - 1, 1) else EXIT_VERIFY


def _fig4_job(job):
    cfg, seed, outdir = job
    res = run_fig4(seed, cfg, keep_run=True)
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    res.run.trace.to_csv(out / "trace.csv")
    write_loss_histograms(res.run, sorted({res.early_iter, *cfg.hist_iters, res.late_iter}), out, cfg.bins)
    return res.summary()


def _map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "spectrum": cmd_spectrum,
    "hist-loss": cmd_hist_loss,
    "verify": cmd_verify,
    "reproduce": cmd_reproduce,
}


def _seed_job(job):
    command, cfg, args = job
    return COMMANDS[command](cfg, args)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.emit_config:
            print(cfg.to_json())
            return EXIT_OK
        if args.command != "reproduce" and args.seeds:
            seeds = parse_seeds(args.seeds)
            base = Path(cfg.output_dir)
            jobs = [(args.command, replace(for_seed(cfg, s), output_dir=str(base / f"seed_{s}")), args)
                    for s in seeds]
            codes = _map(_seed_job, jobs, args.workers)
            return max(codes)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failures get their own exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
