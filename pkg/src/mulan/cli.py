"""Experiment runner.

Subcommands:

    pretrain   train a model, logging metrics.csv, checkpoints, and a final
               evaluation report into the run directory
    eval       evaluate a saved checkpoint (kNN / linear probe / both)
    ablate     train a grid of view compositions or augmentation toggles and
               emit an aligned results table
    gradcheck  finite-difference audit of every gradient path (64-bit)

Shared flags: --config PATH, --seed N, --deterministic, --out DIR,
--resume PATH, --protocol {knn,linear,both}.  MULAN_THREADS caps the worker
(BLAS) thread count; --deterministic forces it to 1.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

from .errors import MulanError, NonFiniteError


def _cap_threads(n: int) -> None:
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)
    try:  # numpy may already be loaded; re-limit its live pools too
        import threadpoolctl
        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mulan",
        description="Siamese SSL with view-type-specific predictors, "
                    "multi-crop and asymmetric-cutout views.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="sectioned key=value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--deterministic", action="store_true",
                       help="single-threaded, zeroed timing column")
        p.add_argument("--out", help="run directory (default runs/<command>-seed<N>)")
        p.add_argument("--resume", help="checkpoint to load before running")
        p.add_argument("--protocol", choices=("knn", "linear", "both"),
                       help="override eval.protocol")

    for name, fn in (("pretrain", cmd_pretrain), ("eval", cmd_eval),
                     ("ablate", cmd_ablate), ("gradcheck", cmd_gradcheck)):
        p = sub.add_parser(name)
        common(p)
        p.set_defaults(fn=fn)
    sub.choices["ablate"].add_argument(
        "--grid", choices=("views", "augs"), default="views",
        help="ablate view compositions (default) or augmentation toggles")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = os.environ.get("MULAN_THREADS")
    if args.deterministic:
        _cap_threads(1)
    elif threads:
        _cap_threads(int(threads))
    try:
        return args.fn(args)
    except MulanError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _load_config(args):
    from .config import RunConfig
    if args.config:
        return RunConfig.load(args.config, seed=args.seed,
                              deterministic=args.deterministic)
    return RunConfig.defaults(seed=args.seed, deterministic=args.deterministic)


def _run_dir(args) -> str:
    out = args.out or os.path.join("runs", f"{args.command}-seed{args.seed}")
    os.makedirs(out, exist_ok=True)
    return out


def _evaluate_to_report(cfg, model, dataset, protocol):
    from .evaluate import evaluate
    e = cfg.values["eval"]
    return evaluate(model, dataset, protocol=protocol or e["protocol"],
                    knn_k=e["knn_k"], probe_epochs=e["probe_epochs"],
                    probe_lr=e["probe_lr"], probe_batch=e["probe_batch"],
                    eval_size=cfg.get("views", "global_size"), seed=cfg.seed)


def _pretrain_into(cfg, out_dir: str, resume_path=None, protocol=None):
    """Train per config into out_dir; returns the final EvalReport."""
    from .checkpoint import gather_state, load_checkpoint, restore_state, save_checkpoint
    from .model import SiameseModel
    from .train import make_schedule, run_training

    with open(os.path.join(out_dir, "config.resolved.cfg"), "w") as fh:
        fh.write(cfg.resolved_text())

    dataset = cfg.make_dataset()
    recipe = cfg.recipe()
    settings = cfg.train_settings()
    schedule = make_schedule(settings, len(dataset.train_images))
    model = SiameseModel.create(cfg.head_config(), seed=cfg.seed)

    start_step = 0
    velocities = None
    if resume_path:
        velocities, start_step = restore_state(model, load_checkpoint(resume_path))

    metrics_path = os.path.join(out_dir, "metrics.csv")
    from .train import METRICS_COLUMNS
    metrics_file = open(metrics_path, "w")
    metrics_file.write(",".join(METRICS_COLUMNS) + "\n")

    epoch_steps = schedule.steps_per_epoch
    every = settings.checkpoint_every
    state_holder = {}

    def on_metrics(row):
        metrics_file.write(row.csv() + "\n")

    def on_epoch_end(epoch, optimizer):
        state_holder["optimizer"] = optimizer
        if every and (epoch + 1) % every == 0 and (epoch + 1) < settings.epochs:
            save_checkpoint(os.path.join(out_dir, f"checkpoint_ep{epoch + 1}.muln"),
                            gather_state(model, optimizer, (epoch + 1) * epoch_steps))

    try:
        run_training(model, dataset, recipe, settings, seed=cfg.seed,
                     start_step=start_step, optimizer_state=velocities,
                     on_metrics=on_metrics, on_epoch_end=on_epoch_end)
    except NonFiniteError as err:
        metrics_file.close()
        with open(os.path.join(out_dir, "diagnostics.txt"), "w") as fh:
            fh.write(f"non-finite loss abort\n{err}\n")
            for key, value in err.diagnostics.items():
                fh.write(f"{key}={value}\n")
        raise
    metrics_file.close()

    save_checkpoint(os.path.join(out_dir, "checkpoint_final.muln"),
                    gather_state(model, state_holder.get("optimizer"),
                                 settings.epochs * epoch_steps))
    report = _evaluate_to_report(cfg, model, dataset, protocol)
    with open(os.path.join(out_dir, "eval_report.txt"), "a") as fh:
        fh.write(report.to_text())
    return report


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    out_dir = _run_dir(args)
    try:
        report = _pretrain_into(cfg, out_dir, resume_path=args.resume,
                                protocol=args.protocol)
    except NonFiniteError as err:
        print(f"aborted: {err}", file=sys.stderr)
        print(f"diagnostics written to {os.path.join(out_dir, 'diagnostics.txt')}",
              file=sys.stderr)
        return 3
    print(f"run directory: {out_dir}")
    print(report.to_text(), end="")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint, restore_state
    from .model import SiameseModel

    if not args.resume:
        print("error: eval requires --resume CHECKPOINT", file=sys.stderr)
        return 2
    cfg = _load_config(args)
    model = SiameseModel.create(cfg.head_config(), seed=cfg.seed)
    restore_state(model, load_checkpoint(args.resume))
    dataset = cfg.make_dataset()
    report = _evaluate_to_report(cfg, model, dataset, args.protocol)
    out_dir = _run_dir(args)
    with open(os.path.join(out_dir, "eval_report.txt"), "a") as fh:
        fh.write(report.to_text())
    print(report.to_text(), end="")
    return 0


VIEW_GRID = ((2, 0, 0), (4, 0, 0), (2, 4, 0), (2, 0, 2), (2, 2, 1))

AUG_GRID = (
    # name, overrides relative to the base config
    ("baseline", {}),
    ("remove_crop", {("views", "crop"): False}),
    ("crop_only", {("views", "flip"): False, ("views", "jitter"): False,
                   ("views", "grayscale"): False, ("views", "blur"): False,
                   ("views", "solarize"): False}),
    ("cutout_only", {("views", "n_global"): 1, ("views", "n_local"): 0,
                     ("views", "n_cutout"): 1, ("views", "crop"): False,
                     ("views", "flip"): False, ("views", "jitter"): False,
                     ("views", "grayscale"): False, ("views", "blur"): False,
                     ("views", "solarize"): False}),
)


def _format_table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(header[i]), *(len(r[i]) for r in rows)) if rows else len(header[i])
              for i in range(len(header))]
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    rule = "  ".join("-" * w for w in widths)
    return "\n".join([fmt(header), rule] + [fmt(r) for r in rows]) + "\n"


def cmd_ablate(args) -> int:
    base = _load_config(args)
    out_dir = _run_dir(args)
    rows = []
    if args.grid == "views":
        header = ["glob", "loc", "cutout", "kNN", "linear"]
        grid = [(f"views_{g}_{l}_{c}",
                 {("views", "n_global"): g, ("views", "n_local"): l,
                  ("views", "n_cutout"): c}, [str(g), str(l), str(c)])
                for g, l, c in VIEW_GRID]
    else:
        header = ["variant", "crop", "cutout", "flip", "jitter", "gray", "solar",
                  "blur", "kNN", "linear"]
        grid = []
        for name, overrides in AUG_GRID:
            grid.append((name, overrides, None))

    for name, overrides, prefix in grid:
        try:
            cfg = base.updated(overrides)
            report = _pretrain_into(cfg, os.path.join(out_dir, name),
                                    protocol="both")
            knn = f"{report.knn_top1:.4f}"
            lin = f"{report.linear_top1:.4f}"
        except Exception as err:  # a failed row must not sink the table
            knn = lin = f"ERROR: {type(err).__name__}: {err}"[:40]
            cfg = None
        if args.grid == "views":
            rows.append(prefix + [knn, lin])
        else:
            flags = []
            probe = cfg if cfg is not None else base.updated(dict(overrides))
            v = probe.values["views"]
            flags = ["x" if v["crop"] else "-",
                     "x" if v["n_cutout"] > 0 else "-",
                     "x" if v["flip"] else "-",
                     "x" if v["jitter"] else "-",
                     "x" if v["grayscale"] else "-",
                     "x" if v["solarize"] else "-",
                     "x" if v["blur"] else "-"]
            rows.append([name] + flags + [knn, lin])

    table = _format_table(header, rows)
    with open(os.path.join(out_dir, "ablation_table.txt"), "w") as fh:
        fh.write(table)
    print(table, end="")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    t0 = time.perf_counter()
    seeds = tuple(range(args.seed, args.seed + 5))
    report = run_all(seeds=seeds)
    print(report.text())
    print(f"elapsed: {time.perf_counter() - t0:.1f}s  "
          f"{'ALL CHECKS PASSED' if report.passed else 'FAILURES: ' + str(report.failures)}")
    if args.out:
        with open(os.path.join(_run_dir(args), "gradcheck_report.txt"), "w") as fh:
            fh.write(report.text() + "\n")
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
