"""`strep` command line: simulate, train, adapt, eval, ablate, gradcheck and plot.

Every command resolves a RunConfig (JSON file, then flags), echoes it into its
output directory, and maps StrepError subclasses to their exit codes.
"""

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence

import numpy as np
from dotenv import find_dotenv, load_dotenv
from prompt_toolkit import print_formatted_text
from prompt_toolkit.formatted_text import FormattedText
from prompt_toolkit.shortcuts import ProgressBar
from prompt_toolkit.styles import Style

from strep.config import RunConfig, echo_config, load_config
from strep.datafiles import (
    load_checkpoint,
    read_dataset,
    read_poses,
    save_checkpoint,
    write_dataset,
    write_history,
    write_pgm,
    write_poses,
    write_rows,
)
from strep.errors import StrepError, StrepIOError, UsageError
from strep.gradcheck import format_table, run_suite
from strep.loaders import FRAME_PATTERN, load_point_sequence
from strep.logs import ProgressCallback, configure_logging, logging_progress
from strep.metrics import EvalReport, evaluate
from strep.plotting import plot_registration
from strep.simulator import (
    GENERATOR_VERSION,
    SequenceDataset,
    builtin_environments,
    cluttered_hall,
    generate_benchmark,
    simulate_sequence,
)
from strep.trainer import adapt, train

logger = logging.getLogger(__name__)

DATASET_SUFFIX = ".strepds"
CHECKPOINT_NAME = "checkpoint.strepckpt"
REPORT_FIELDS = ("sequence",) + EvalReport.CSV_FIELDS
SUMMARY_FIELDS = ("mode", "seed", "ate", "point_dist", "final_local_loss")
GRADCHECK_FIELDS = ("case", "seeds", "max_rel_error", "tol", "passed")

STYLE = Style.from_dict(
    {
        "title": "bold #00aaff",
        "key": "#aaaaaa",
        "value": "bold",
        "path": "#888888 italic",
        "ok": "bold #00aa00",
        "fail": "bold #ff0000",
    }
)


class Console:
    """Styled output on a terminal, plain lines otherwise."""

    def __init__(self, interactive: Optional[bool] = None):
        self.interactive = sys.stdout.isatty() if interactive is None else interactive

    def say(self, *fragments: tuple[str, str], err: bool = False) -> None:
        if self.interactive and not err:
            print_formatted_text(FormattedText(list(fragments)), style=STYLE)
        else:
            print("".join(text for _, text in fragments), file=sys.stderr if err else sys.stdout)

    def title(self, text: str) -> None:
        self.say(("class:title", text))

    def value(self, key: str, value: Any) -> None:
        shown = f"{value:.4f}" if isinstance(value, float) else str(value)
        self.say(("class:key", f"  {key}: "), ("class:value", shown))

    def wrote(self, path: Path) -> None:
        self.say(("class:key", "  wrote "), ("class:path", str(path)))

    def error(self, message: str) -> None:
        self.say(("class:fail", "error: "), ("", message), err=True)

    @contextmanager
    def progress(self, label: str) -> Iterator[ProgressCallback]:
        if not self.interactive:
            yield logging_progress(logger)
            return
        with ProgressBar(title=label, style=STYLE) as bar:
            counter = None

            def report(progress: float, total: Optional[float], message: Optional[str]) -> None:
                nonlocal counter
                if counter is None:
                    counter = bar(label=label, total=int(total) if total else None)
                counter.items_completed = int(progress)
                bar.invalidate()

            yield report
            if counter is not None:
                counter.done = True


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--threads", type=int, help="nearest-neighbour worker threads (1 = bit-reproducible)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--anchor", choices=["first", "fit"], help="trajectory alignment for metrics")
    common.add_argument("--no-temporal", action="store_true", help="independent per-frame latents (decay fixed at 0)")
    common.add_argument("--lambda-global", type=float, help="weight of the occupancy loss")
    common.add_argument("--iters", type=int, help="optimization iterations")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="strep", description="Unsupervised global registration of point cloud sequences")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _common_flags()

    simulate = commands.add_parser("simulate", parents=[common], help="generate the 2D LiDAR benchmark")
    simulate.add_argument("--per-env", type=int, help="trajectories per environment (default 7, 7, 6)")

    train_cmd = commands.add_parser("train", parents=[common], help="jointly train decoder, occupancy net and latents")
    train_cmd.add_argument("--data", nargs="+", required=True, help="dataset files or directories")
    train_cmd.add_argument("--checkpoint", help="resume from this checkpoint")

    adapt_cmd = commands.add_parser("adapt", parents=[common], help="optimize latents of a new sequence, weights frozen")
    adapt_cmd.add_argument("--data", required=True, help="dataset file or directory")
    adapt_cmd.add_argument("--checkpoint", required=True, help="checkpoint written by train")

    eval_cmd = commands.add_parser("eval", parents=[common], help="score a pose file against ground truth")
    eval_cmd.add_argument("--data", required=True, help="dataset with ground-truth poses")
    eval_cmd.add_argument("--poses", required=True, help="estimated poses CSV")

    ablate = commands.add_parser("ablate", parents=[common], help="temporal fusion against independent latents")
    ablate.add_argument("--data", help="dataset (default: one simulated cluttered-hall trajectory)")
    ablate.add_argument("--seeds", type=int, default=5, help="number of paired runs")
    ablate.add_argument("--include-spatial", action="store_true", help="also run the decoder without latents")

    grad = commands.add_parser("gradcheck", parents=[common], help="finite-difference check of every gradient")
    grad.add_argument("--seeds", type=int, default=20, help="random points per case")

    plot = commands.add_parser("plot", parents=[common], help="SVG of trajectories and the stacked scene")
    plot.add_argument("--data", required=True, help="dataset")
    plot.add_argument("--poses", help="estimated poses CSV (default: ground truth)")
    return parser


def _env_int(name: str) -> Optional[int]:
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{name} must be an integer, got '{raw}'")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = {
        "seed": args.seed,
        "out": args.out or os.getenv("STREP_OUT") or None,
        "train.threads": args.threads if args.threads is not None else _env_int("STREP_THREADS"),
        "train.anchor": args.anchor,
        "train.lambda_global": args.lambda_global,
        "train.iters": args.iters,
        "model.latent_mode": "independent" if args.no_temporal else None,
    }
    return load_config(args.config, overrides)


def load_datasets(paths: Sequence[str]) -> list[SequenceDataset]:
    datasets: list[SequenceDataset] = []
    for raw in paths:
        path = Path(raw)
        if path.is_dir():
            if any(FRAME_PATTERN.match(p.name) for p in path.iterdir()):
                datasets.append(load_point_sequence(path))
                continue
            files = sorted(path.glob(f"*{DATASET_SUFFIX}"))
            if not files:
                raise StrepIOError(f"no {DATASET_SUFFIX} files or frame_*.xyz files in {path}")
            datasets.extend(read_dataset(f) for f in files)
        else:
            datasets.append(read_dataset(path))
    return datasets


def _load_one(path: str) -> SequenceDataset:
    datasets = load_datasets([path])
    if len(datasets) != 1:
        raise UsageError(f"{path} holds {len(datasets)} sequences; this command takes one")
    return datasets[0]


def _match_dim(cfg: RunConfig, datasets: Sequence[SequenceDataset]) -> RunConfig:
    dims = {ds.dim for ds in datasets}
    if len(dims) != 1:
        raise UsageError("all sequences of a run must have the same dimension")
    dim = dims.pop()
    if dim != cfg.dim:
        logger.info(f"data is {dim}D; using {dim}D defaults")
        cfg = cfg.with_dim(dim)
    return cfg


def _report_rows(reports: Sequence[tuple[int, EvalReport]]) -> list[dict[str, object]]:
    return [{"sequence": i, **report.csv_row()} for i, report in reports]


def cmd_simulate(args: argparse.Namespace, cfg: RunConfig, console: Console) -> int:
    if cfg.dim != 2:
        raise UsageError("the simulator generates 2D sequences only")
    out = Path(cfg.out)
    echo_config(cfg, out)
    envs = builtin_environments()
    sequences = generate_benchmark(envs, args.per_env, cfg.trajectory, seed=cfg.seed)
    for env in envs:
        write_pgm(out / "maps" / f"{env.name}.pgm", env)
    manifest = []
    for i, ds in enumerate(sequences):
        name = f"seq_{i:02d}_{ds.env_name}{DATASET_SUFFIX}"
        write_dataset(out / name, ds)
        manifest.append({"file": name, "env_name": ds.env_name, "num_frames": len(ds)})
    manifest_path = out / "manifest.json"
    payload = {"generator_version": GENERATOR_VERSION, "seed": cfg.seed, "sequences": manifest}
    manifest_path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    console.title(f"simulated {len(sequences)} sequences")
    console.wrote(out)
    return 0


def cmd_train(args: argparse.Namespace, cfg: RunConfig, console: Console) -> int:
    datasets = load_datasets(args.data)
    cfg = _match_dim(cfg, datasets)
    out = Path(cfg.out)
    echo_config(cfg, out)
    with console.progress("training") as report:
        warm_start = load_checkpoint(args.checkpoint) if args.checkpoint else None
        result = train(datasets, cfg, on_progress=report, warm_start=warm_start)
    console.wrote(save_checkpoint(out / CHECKPOINT_NAME, result.checkpoint()))
    console.wrote(write_history(out / "history.csv", result.history))
    reports = []
    for i, (poses, ds) in enumerate(zip(result.poses(datasets), datasets)):
        write_poses(out / f"poses_{i:02d}.csv", poses)
        if ds.gt_poses is not None:
            reports.append((i, evaluate(poses, ds.gt_poses, ds.frames, cfg.train.anchor)))
    if reports:
        console.wrote(write_rows(out / "report.csv", REPORT_FIELDS, _report_rows(reports)))
        console.value("mean ATE", float(np.mean([r.ate for _, r in reports])))
        console.value("mean point distance", float(np.mean([r.point_dist for _, r in reports])))
    return 0


def cmd_adapt(args: argparse.Namespace, cfg: RunConfig, console: Console) -> int:
    dataset = _load_one(args.data)
    frozen = load_checkpoint(args.checkpoint)
    out = Path(cfg.out)
    echo_config(cfg, out)
    with console.progress("adapting") as report:
        result = adapt(dataset, frozen, cfg, on_progress=report)
    console.wrote(write_poses(out / "poses.csv", result.poses))
    console.wrote(write_history(out / "history.csv", result.history))
    if dataset.gt_poses is not None:
        ev = evaluate(result.poses, dataset.gt_poses, dataset.frames, cfg.train.anchor)
        console.wrote(write_rows(out / "report.csv", REPORT_FIELDS, _report_rows([(0, ev)])))
        console.value("ATE", ev.ate)
        console.value("point distance", ev.point_dist)
    return 0


def cmd_eval(args: argparse.Namespace, cfg: RunConfig, console: Console) -> int:
    dataset = _load_one(args.data)
    if dataset.gt_poses is None:
        raise UsageError(f"{args.data} has no ground-truth poses")
    poses = read_poses(args.poses)
    out = Path(cfg.out)
    echo_config(cfg, out)
    ev = evaluate(poses, dataset.gt_poses, dataset.frames, cfg.train.anchor)
    console.wrote(write_rows(out / "report.csv", REPORT_FIELDS, _report_rows([(0, ev)])))
    console.value("ATE", ev.ate)
    console.value("point distance", ev.point_dist)
    return 0


def _ablation_sequence(args: argparse.Namespace, cfg: RunConfig) -> SequenceDataset:
    if args.data:
        return _load_one(args.data)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    return simulate_sequence(cluttered_hall(), cfg.trajectory, rng, seed=cfg.seed)


def cmd_ablate(args: argparse.Namespace, cfg: RunConfig, console: Console) -> int:
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    dataset = _ablation_sequence(args, cfg)
    if dataset.gt_poses is None:
        raise UsageError("the ablation needs a sequence with ground-truth poses")
    cfg = _match_dim(cfg, [dataset])
    out = Path(cfg.out)
    echo_config(cfg, out)
    modes = ["fused", "independent"] + (["none"] if args.include_spatial else [])
    rows = []
    for offset in range(args.seeds):
        seed = cfg.seed + offset
        for mode in modes:
            run = cfg.model_copy(update={"seed": seed, "model": cfg.model.model_copy(update={"latent_mode": mode})})
            logger.info(f"ablation run: mode={mode} seed={seed}")
            result = train([dataset], run)
            (poses,) = result.poses([dataset])
            ev = evaluate(poses, dataset.gt_poses, dataset.frames, cfg.train.anchor)
            final_local = result.history[-1].local_loss if result.history else None
            rows.append({"mode": mode, "seed": seed, "ate": ev.ate, "point_dist": ev.point_dist, "final_local_loss": final_local})
    console.wrote(write_rows(out / "summary.csv", SUMMARY_FIELDS, rows))
    for mode in modes:
        picked = [row for row in rows if row["mode"] == mode]
        console.value(f"{mode} median ATE", float(np.median([row["ate"] for row in picked])))
        console.value(f"{mode} median point distance", float(np.median([row["point_dist"] for row in picked])))
    return 0


def cmd_gradcheck(args: argparse.Namespace, cfg: RunConfig, console: Console) -> int:
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    out = Path(cfg.out)
    echo_config(cfg, out)
    with console.progress("gradient check") as report:
        rows = run_suite(range(args.seeds), on_progress=report)
    console.say(("", format_table(rows)))
    console.wrote(write_rows(out / "gradcheck.csv", GRADCHECK_FIELDS, [row.as_row() for row in rows]))
    failed = [row.name for row in rows if not row.passed]
    if failed:
        console.say(("class:fail", f"FAILED: {', '.join(failed)}"))
        return 3
    console.say(("class:ok", f"all {len(rows)} cases passed"))
    return 0


def cmd_plot(args: argparse.Namespace, cfg: RunConfig, console: Console) -> int:
    dataset = _load_one(args.data)
    if args.poses:
        poses = read_poses(args.poses)
    elif dataset.gt_poses is not None:
        poses = list(dataset.gt_poses)
    else:
        raise UsageError("--poses is required for a sequence without ground truth")
    out = Path(cfg.out)
    echo_config(cfg, out)
    target = plot_registration(
        out / "registration.svg",
        poses,
        dataset.frames,
        dataset.gt_poses,
        anchor=cfg.train.anchor,
        title=dataset.env_name,
    )
    console.wrote(target)
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "plot": cmd_plot,
}


def main(argv: Optional[Sequence[str]] = None, console: Optional[Console] = None) -> int:
    load_dotenv(find_dotenv(filename=".env", usecwd=True))
    configure_logging()
    console = console or Console()
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg, console)
    except StrepError as e:
        console.error(str(e))
        return e.exit_code
    except OSError as e:
        console.error(str(e))
        return StrepIOError.exit_code
