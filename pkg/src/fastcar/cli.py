"""Command-line entry point: ``fastcar <subcommand> [--key value ...]``.

Every option can also come from a flat ``key = value`` config document passed
with ``--config``; command-line flags override it. The resolved settings are
written next to the outputs as ``config.txt``.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import sys
from pathlib import Path

from . import __version__
from .data import SynthConfig, generate, load_csv, save_csv, split
from .metrics import mean_pm_std, read_metrics, write_metrics
from .mtl import SCHEMES, sweep, train_mtl, write_heatmap_csv
from .nn import DivergenceError, save_checkpoint
from .pipeline import LabelTuningError, TrainConfig, evaluate, train_fastcar, write_log

log = logging.getLogger("fastcar")


class CLIError(Exception):
    pass


# option table: key -> (type, default, help). Keys double as config-document keys.
def _hidden(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    return str(text).strip().lower() in ("1", "true", "yes", "on")


_synth = SynthConfig()
_train = TrainConfig()

SYNTH_OPTS = {
    "classes": (int, _synth.n_classes, "number of classes"),
    "samples_per_class": (int, _synth.samples_per_class, "samples per class"),
    "feature_dim": (int, _synth.feature_dim, "feature vector length"),
    "noise_sigma": (float, _synth.noise_sigma, "feature noise standard deviation"),
    "class_scale": (float, _synth.class_scale, "height of the class-indicator block"),
    "signal_scale": (float, _synth.signal_scale, "amplitude of the property-signal block"),
}
TRAIN_OPTS = {
    "epochs": (int, _train.epochs, "training epochs"),
    "lr": (float, _train.lr, "Adam learning rate"),
    "weight_decay": (float, _train.weight_decay, "decoupled weight decay"),
    "scheduler_factor": (float, _train.scheduler_factor, "plateau LR factor"),
    "scheduler_patience": (int, _train.scheduler_patience, "plateau patience in epochs"),
    "batch_size": (int, _train.batch_size, "minibatch size"),
    "hidden": (_hidden, ",".join(map(str, _train.hidden)), "trunk widths, comma separated"),
    "grad_threshold": (float, _train.grad_threshold, "one-epoch test threshold"),
    "shrink_factor": (float, _train.shrink_factor, "label shrink factor per failed test"),
    "max_label_iterations": (int, _train.max_label_iterations, "maximum label shrinks"),
    "margin": (float, _train.margin, "gap between hybrid-label intervals"),
}
COMMON_OPTS = {
    "seed": (int, 0, "random seed"),
    "out": (str, "runs", "output directory"),
    "force": (_bool, False, "overwrite existing outputs"),
}
DATA_OPT = {"data": (str, None, "dataset CSV (default: <out>/dataset.csv)")}
SCHEME_OPT = {"scheme": (str, "ew", f"weighting scheme: {', '.join(SCHEMES)}")}

COMMAND_OPTS = {
    "generate": {**COMMON_OPTS, **SYNTH_OPTS},
    "train-fastcar": {**COMMON_OPTS, **DATA_OPT, **TRAIN_OPTS},
    "train-mtl": {**COMMON_OPTS, **DATA_OPT, **TRAIN_OPTS, **SCHEME_OPT},
    "benchmark": {**COMMON_OPTS, **DATA_OPT, **TRAIN_OPTS},
}
# resolved keys that do not affect results
NON_RESULT_KEYS = {"out", "force", "config", "data"}


def read_config(path) -> dict[str, str]:
    """Parse a flat ``key = value`` document (``#`` starts a comment)."""
    values = {}
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"config file not found: {p}")
    for lineno, raw in enumerate(p.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError(f"{p}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults < config document < explicit flags."""
    opts = COMMAND_OPTS[command]
    from_file = read_config(args.config) if args.config else {}
    unknown = set(from_file) - set(opts)
    if unknown:
        raise CLIError(f"unknown config keys for {command}: {', '.join(sorted(unknown))}")
    resolved = {}
    for key, (conv, default, _) in opts.items():
        flag = getattr(args, key, None)
        raw = flag if flag is not None else from_file.get(key, default)
        try:
            resolved[key] = conv(raw) if raw is not None else None
        except ValueError as exc:
            raise CLIError(f"bad value for {key}: {raw!r} ({exc})") from None
    return resolved


def format_config(cfg: dict) -> str:
    lines = []
    for key in sorted(cfg):
        v = cfg[key]
        if isinstance(v, tuple):
            v = ",".join(map(str, v))
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: dict) -> str:
    relevant = {k: v for k, v in cfg.items() if k not in NON_RESULT_KEYS}
    return hashlib.sha256(format_config(relevant).encode()).hexdigest()[:16]


def synth_config(cfg: dict) -> SynthConfig:
    return SynthConfig(
        n_classes=cfg["classes"],
        samples_per_class=cfg["samples_per_class"],
        feature_dim=cfg["feature_dim"],
        noise_sigma=cfg["noise_sigma"],
        class_scale=cfg["class_scale"],
        signal_scale=cfg["signal_scale"],
        seed=cfg["seed"],
    )


def train_config(cfg: dict) -> TrainConfig:
    keys = {f.name for f in dataclasses.fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in cfg.items() if k in keys})


def _outdir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_splits(cfg: dict):
    path = Path(cfg["data"]) if cfg.get("data") else Path(cfg["out"]) / "dataset.csv"
    if not path.is_file():
        raise CLIError(f"dataset not found: {path} (run 'fastcar generate' or pass --data)")
    data = load_csv(path)
    return split(data, (5, 1, 1), seed=cfg["seed"])


# subcommands ---------------------------------------------------------------------

def cmd_generate(cfg: dict) -> int:
    out = _outdir(cfg)
    target = out / "dataset.csv"
    if target.exists() and not cfg["force"]:
        raise CLIError(f"{target} exists; pass --force to overwrite")
    data = generate(synth_config(cfg))
    save_csv(data, target)
    (out / "config.txt").write_text(format_config(cfg))
    print(f"wrote {target} ({len(data)} samples, {data.n_classes} classes, {data.feature_dim} features)")
    return 0


def _fastcar_run(train, val, test, tcfg: TrainConfig):
    result = train_fastcar(train, val, tcfg)
    report = evaluate(result.model, result.spec, test, result.wall_clock_seconds)
    report.extra.update(
        label_scale=result.spec.scale,
        label_shrinks=result.label_report.iterations_used,
        label_avg_grad=result.label_report.avg_grad_magnitude,
    )
    return result, report


def cmd_train_fastcar(cfg: dict) -> int:
    train, val, test = _load_splits(cfg)
    out = _outdir(cfg)
    tcfg = train_config(cfg)
    try:
        result, report = _fastcar_run(train, val, test, tcfg)
    except LabelTuningError as exc:
        raise CLIError(f"{exc}\n  {exc.report}") from None
    (out / "config.txt").write_text(format_config(cfg))
    (out / "spec.json").write_text(result.spec.dumps() + "\n")
    save_checkpoint(out / "checkpoint.npz", result.model, result.optimizer, result.scheduler,
                    extra={"spec": result.spec.to_dict(), "config_hash": config_hash(cfg)})
    write_log(out / "train_log.csv", result.log)
    write_metrics(out / "metrics.json", report, model="fastcar", seed=cfg["seed"], config_hash=config_hash(cfg))
    print(f"fastcar: accuracy {report.accuracy_pct:.2f}%  MAPE {report.mape_pct:.2f}%  "
          f"within 8%: {report.within_8pct_fraction:.3f}  time {report.wall_clock_seconds:.1f}s")
    print(f"wrote {out / 'metrics.json'}")
    return 0


def cmd_train_mtl(cfg: dict) -> int:
    scheme = cfg["scheme"].lower()
    if scheme not in SCHEMES:
        raise CLIError(f"unknown scheme {cfg['scheme']!r}; valid schemes: {', '.join(SCHEMES)}")
    train, val, test = _load_splits(cfg)
    out = _outdir(cfg)
    try:
        result = train_mtl(train, val, train_config(cfg), scheme, test=test)
    except DivergenceError as exc:
        raise CLIError(str(exc)) from None
    r = result.report
    (out / "config.txt").write_text(format_config(cfg))
    write_metrics(out / "metrics.json", r, model=f"hps-{scheme}", seed=cfg["seed"], config_hash=config_hash(cfg))
    flag = "  [range collapse]" if r.range_collapse else ""
    print(f"hps-{scheme}: accuracy {r.accuracy_pct:.2f}%  MAPE {r.mape_pct:.2f}%  time {r.wall_clock_seconds:.1f}s{flag}")
    print(f"wrote {out / 'metrics.json'}")
    return 0


BENCHMARK_HEADER = ["model", "accuracy_pct", "mape_pct", "wall_clock_s"]


def cmd_benchmark(cfg: dict) -> int:
    train, val, test = _load_splits(cfg)
    out = _outdir(cfg)
    tcfg = train_config(cfg)
    chash = config_hash(cfg)
    rows: list[tuple[str, object]] = []
    warnings = 0
    try:
        _, report = _fastcar_run(train, val, test, tcfg)
        rows.append(("fastcar", report))
        write_metrics(out / "metrics-fastcar.json", report, model="fastcar", seed=cfg["seed"], config_hash=chash)
    except (RuntimeError, ValueError) as exc:
        log.warning("fastcar failed: %s", exc)
        rows.append(("fastcar", None))
        warnings += 1
    sweep_rows = sweep(train, val, test, tcfg, SCHEMES)
    for row in sweep_rows:
        name = f"hps-{row.scheme}"
        rows.append((name, row.report))
        if row.report is None:
            warnings += 1
        else:
            write_metrics(out / f"metrics-{name}.json", row.report, model=name, seed=cfg["seed"], config_hash=chash)
    write_heatmap_csv(sweep_rows, out / "heatmap.csv")

    def cells(r):
        if r is None:
            return ["nan"] * 3
        return [f"{r.accuracy_pct:.4f}", f"{r.mape_pct:.4f}", f"{r.wall_clock_seconds:.4f}"]

    lines = [",".join(BENCHMARK_HEADER)] + [",".join([name, *cells(r)]) for name, r in rows]
    (out / "benchmark.csv").write_text("\n".join(lines) + "\n")
    times = [r.wall_clock_seconds for name, r in rows if name != "fastcar" and r is not None]
    runtime = mean_pm_std(times)

    table = [f"{'model':<10} {'accuracy [%]':>13} {'MAPE [%]':>9} {'run time [s]':>13}"]
    for name, r in rows:
        if r is None:
            table.append(f"{name:<10} {'failed':>13}")
        else:
            flag = "  range collapse" if r.range_collapse else ""
            table.append(f"{name:<10} {r.accuracy_pct:>13.2f} {r.mape_pct:>9.2f} {r.wall_clock_seconds:>13.2f}{flag}")
    table.append(f"MTL family run time [s]: {runtime}")
    summary = "\n".join(table) + "\n"
    (out / "benchmark.txt").write_text(summary)
    (out / "config.txt").write_text(format_config(cfg))
    print(summary, end="")
    if warnings:
        print(f"{warnings} warning(s): some runs failed", file=sys.stderr)
    print(f"wrote {out / 'benchmark.csv'}")
    return 0


def cmd_report(paths: list[str]) -> int:
    files: list[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(p.rglob("metrics*.json")))
        elif p.is_file():
            files.append(p)
        else:
            raise CLIError(f"no such file or directory: {p}")
    docs = []
    for f in files:
        try:
            docs.append((f, read_metrics(f)))
        except (ValueError, OSError) as exc:
            print(f"warning: skipping {f}: {exc}", file=sys.stderr)
    if not docs:
        raise CLIError(f"no metrics documents found in {', '.join(paths)}")
    print(f"{'model':<10} {'accuracy [%]':>13} {'MSE':>12} {'MAPE [%]':>9} {'within 8%':>10} {'time [s]':>9}  source")
    for f, d in docs:
        print(
            f"{str(d.get('model', '?')):<10} {d['accuracy_pct']:>13.2f} {d.get('mse', float('nan')):>12.2f} "
            f"{d.get('mape_pct', float('nan')):>9.2f} {d.get('within_8pct_fraction', float('nan')):>10.3f} "
            f"{d.get('wall_clock_seconds', float('nan')):>9.2f}  {f}"
        )
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train-fastcar": cmd_train_fastcar,
    "train-mtl": cmd_train_mtl,
    "benchmark": cmd_benchmark,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fastcar", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMAND_OPTS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config document")
        for key, (_, default, help_text) in opts.items():
            flag = "--" + key.replace("_", "-")
            if key == "force":
                p.add_argument(flag, action="store_const", const=True, default=None, help=help_text)
            else:
                # default None so we can tell an explicit flag from an omitted one
                p.add_argument(flag, dest=key, default=None, help=f"{help_text} (default: {default})")
    p = sub.add_parser("report")
    p.add_argument("paths", nargs="*", help="metrics files or directories (default: --out)")
    p.add_argument("--out", default="runs", help="directory to scan when no paths are given")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.paths or [args.out])
        cfg = resolve(args.command, args)
        return COMMANDS[args.command](cfg)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
