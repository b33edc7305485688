"""Command-line front end: train, eval, sweep, export-plots.

Exit codes: 0 success, 2 bad configuration or incompatible task, 3 run
diverged (artifacts still written), 4 unreadable or corrupt files.
"""

from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .checkpoint import CorruptCheckpoint, load_checkpoint, save_checkpoint
from .config import BadConfig, RunConfig, preset_config
from .data import EVAL_STREAM_OFFSET
from .metrics import EvalReport, l2_uvp, pushforward_sinkhorn
from .ot_core import (DIVERGED, RUNNING, StepRecord, estimate_distance,
                      inverse_transport_map, train, transport_map)

EXIT_OK = 0
EXIT_BAD_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

METRICS_COLUMNS = ("step", "lr", "loss_f", "loss_g", "reg_g", "reg_f",
                   "dist_estimate", "status")
EVAL_COLUMNS = ("l2_uvp", "sinkhorn_forward", "sinkhorn_backward",
                "dist_estimate", "n_eval")


class IncompatibleTask(Exception):
    pass


class NotTwoDimensional(Exception):
    pass


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _metrics_row(rec: StepRecord):
    return [_cell(v) for v in (rec.step, rec.lr, rec.loss_f, rec.loss_g,
                               rec.reg_g, rec.reg_f, rec.dist_estimate,
                               rec.status)]


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        writer.writerows(rows)


def evaluate_run(run_config: RunConfig, state) -> EvalReport:
    """Recompute the map quality metrics on deterministic eval streams."""
    enot_cfg = run_config.enot_config()
    task = run_config.build_task()
    if task.source.dim != state.g.in_dim:
        raise IncompatibleTask(
            f"task dim {task.source.dim} does not match networks "
            f"(in_dim {state.g.in_dim})")
    n_eval = run_config.get("eval", "n_eval")
    sink_n = run_config.get("eval", "sinkhorn_n")
    sink_eps = run_config.get("eval", "sinkhorn_epsilon") or None

    def t_hat(pts):
        return transport_map(state, pts, enot_cfg)

    x = task.source.sample(n_eval, EVAL_STREAM_OFFSET + 2)
    y = task.target.sample(n_eval, EVAL_STREAM_OFFSET + 3)
    dist = estimate_distance(state, x, y, enot_cfg)
    uvp = None
    if task.optimal_map is not None:
        uvp = l2_uvp(t_hat, task, n_eval, EVAL_STREAM_OFFSET + 4)
    forward = pushforward_sinkhorn(t_hat, task.source, task.target, n=sink_n,
                                   epsilon=sink_eps, cost=enot_cfg.cost,
                                   stream_offset=EVAL_STREAM_OFFSET + 5)
    backward = None
    if enot_cfg.bidirectional:
        backward = pushforward_sinkhorn(
            lambda pts: inverse_transport_map(state, pts, enot_cfg),
            task.target, task.source, n=sink_n, epsilon=sink_eps,
            cost=enot_cfg.cost, stream_offset=EVAL_STREAM_OFFSET + 7)
    return EvalReport(uvp, forward, backward, dist, n_eval)


def _report_rows(report: EvalReport | None):
    if report is None:
        return [["", "", "", "", ""]]
    return [[_cell(report.l2_uvp), _cell(report.sinkhorn_forward),
             _cell(report.sinkhorn_backward), _cell(report.dist_estimate),
             _cell(report.n_eval)]]


def _resolve_config(args) -> RunConfig:
    if getattr(args, "resume", None):
        if args.config or getattr(args, "preset", None):
            raise BadConfig("--resume takes its config from the checkpoint; "
                            "drop --config/--preset")
        cfg, _ = load_checkpoint(args.resume)
    elif args.config:
        cfg = RunConfig.load(args.config)
    elif getattr(args, "preset", None):
        cfg = preset_config(args.preset)
    else:
        cfg = RunConfig.defaults()
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"run.seed={args.seed}")
    if getattr(args, "out_dir", None):
        overrides.append(f"run.out_dir={args.out_dir}")
    return cfg.with_overrides(overrides).validate()


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    resume_state = None
    if args.resume:
        _, resume_state = load_checkpoint(args.resume)
        if resume_state.status != DIVERGED:
            resume_state.status = RUNNING
    task = cfg.build_task()
    out_dir = Path(cfg.get("run", "out_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.ini")

    metrics_path = out_dir / "metrics.csv"
    append = args.resume is not None and metrics_path.exists()
    fh = open(metrics_path, "a" if append else "w", newline="")
    writer = csv.writer(fh, lineterminator="\n")
    if not append:
        writer.writerow(METRICS_COLUMNS)
    try:
        state, _ = train(cfg.enot_config(), task.source, task.target,
                         arch_f=cfg.arch("f"), arch_g=cfg.arch("g"),
                         optimizer=cfg.optimizer_settings(),
                         state=resume_state,
                         on_step=lambda rec: writer.writerow(_metrics_row(rec)))
    finally:
        fh.close()
    save_checkpoint(out_dir / "final.ckpt", cfg, state)
    report = None
    if state.status != DIVERGED:
        report = evaluate_run(cfg, state)
    _write_csv(out_dir / "eval.csv", EVAL_COLUMNS, _report_rows(report))
    if state.status == DIVERGED:
        print(f"diverged at step {state.step}; artifacts in {out_dir}",
              file=sys.stderr)
        return EXIT_DIVERGED
    print(f"trained {state.step} steps; artifacts in {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, state = load_checkpoint(args.checkpoint)
    cfg = cfg.with_overrides(args.set or []).validate()
    out_dir = Path(args.out_dir) if args.out_dir else Path(args.checkpoint).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    report = evaluate_run(cfg, state) if state.status != DIVERGED else None
    _write_csv(out_dir / "eval.csv", EVAL_COLUMNS, _report_rows(report))
    if report is not None:
        for name, value in zip(EVAL_COLUMNS, _report_rows(report)[0]):
            print(f"{name}: {value if value else 'n/a'}")
    return EXIT_OK


def _sweep_cell(cell_cfg: RunConfig):
    tau = cell_cfg.get("enot", "tau")
    lam = cell_cfg.get("enot", "lambda")
    seed = cell_cfg.get("run", "seed")
    try:
        task = cell_cfg.build_task()
        state, _ = train(cell_cfg.enot_config(), task.source, task.target,
                         arch_f=cell_cfg.arch("f"), arch_g=cell_cfg.arch("g"),
                         optimizer=cell_cfg.optimizer_settings())
        if state.status == DIVERGED:
            return [tau, lam, seed, None, DIVERGED]
        uvp = None
        if task.optimal_map is not None:
            enot_cfg = cell_cfg.enot_config()
            uvp = l2_uvp(lambda pts: transport_map(state, pts, enot_cfg),
                         task, cell_cfg.get("eval", "n_eval"),
                         EVAL_STREAM_OFFSET + 4)
        return [tau, lam, seed, uvp, state.status]
    except Exception as exc:  # a failed cell must not kill the sweep
        return [tau, lam, seed, None, f"error: {type(exc).__name__}"]


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    taus = [float(v) for v in args.tau_grid.split(",") if v]
    lams = [float(v) for v in args.lambda_grid.split(",") if v]
    if not taus or not lams:
        raise BadConfig("sweep grids must be non-empty")
    seeds = ([int(v) for v in args.seeds.split(",") if v]
             if args.seeds else [cfg.get("run", "seed")])
    cells = [cfg.with_overrides([f"enot.tau={t}", f"enot.lambda={l}",
                                 f"run.seed={s}"])
             for t in taus for l in lams for s in seeds]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(_sweep_cell, cells))
    else:
        rows = [_sweep_cell(c) for c in cells]
    out_dir = Path(cfg.get("run", "out_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "sweep.csv", ("tau", "lambda", "seed", "l2_uvp",
                                       "status"),
               [[_cell(v) for v in row] for row in rows])
    print(f"sweep wrote {len(rows)} rows to {out_dir / 'sweep.csv'}")
    return EXIT_OK


def cmd_export_plots(args) -> int:
    cfg, state = load_checkpoint(args.checkpoint)
    cfg = cfg.with_overrides(args.set or []).validate()
    if state.g.in_dim != 2:
        raise NotTwoDimensional("plot export needs a two-dimensional task")
    enot_cfg = cfg.enot_config()
    task = cfg.build_task()
    out_dir = Path(args.out_dir) if args.out_dir else Path(args.checkpoint).parent
    out_dir.mkdir(parents=True, exist_ok=True)

    x = task.source.sample(args.arrows, EVAL_STREAM_OFFSET + 11)
    t = transport_map(state, x, enot_cfg)
    _write_csv(out_dir / "arrows.csv", ("x0", "x1", "tx0", "tx1"),
               [[_cell(float(v)) for v in row] for row in np.hstack([x, t])])

    y = task.target.sample(args.arrows, EVAL_STREAM_OFFSET + 12)
    pts = np.vstack([x, t, y])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pad = 0.1 * (hi - lo + 1e-9)
    g0 = np.linspace(lo[0] - pad[0], hi[0] + pad[0], args.grid)
    g1 = np.linspace(lo[1] - pad[1], hi[1] + pad[1], args.grid)
    xx, yy = np.meshgrid(g0, g1, indexing="ij")
    grid = np.stack([xx.ravel(), yy.ravel()], axis=1)
    values = state.g.value(grid)
    _write_csv(out_dir / "contours.csv", ("x0", "x1", "g"),
               [[_cell(float(a)), _cell(float(b)), _cell(float(v))]
                for (a, b), v in zip(grid, values)])
    print(f"wrote {out_dir / 'arrows.csv'} and {out_dir / 'contours.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="enot",
        description="Expectile-regularized neural optimal transport")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_preset=True):
        p.add_argument("--config", help="INI config file")
        if with_preset:
            p.add_argument("--preset", help="named preset configuration")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config option (repeatable)")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--out-dir", help="override run.out_dir")

    p_train = sub.add_parser("train", help="train a transport map")
    common(p_train)
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p_eval.add_argument("--out-dir")
    p_eval.set_defaults(fn=cmd_eval)

    p_sweep = sub.add_parser("sweep", help="grid over tau and lambda")
    common(p_sweep)
    p_sweep.add_argument("--tau-grid", required=True,
                         help="comma-separated tau values")
    p_sweep.add_argument("--lambda-grid", required=True,
                         help="comma-separated lambda weights")
    p_sweep.add_argument("--seeds", help="comma-separated run seeds")
    p_sweep.add_argument("--workers", type=int, default=1)
    p_sweep.set_defaults(fn=cmd_sweep)

    p_plots = sub.add_parser("export-plots",
                             help="dump map arrows and potential contours")
    p_plots.add_argument("checkpoint")
    p_plots.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p_plots.add_argument("--out-dir")
    p_plots.add_argument("--grid", type=int, default=50,
                         help="contour grid resolution per axis")
    p_plots.add_argument("--arrows", type=int, default=500,
                         help="number of transport arrows")
    p_plots.set_defaults(fn=cmd_export_plots)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (BadConfig, IncompatibleTask, NotTwoDimensional) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except CorruptCheckpoint as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
