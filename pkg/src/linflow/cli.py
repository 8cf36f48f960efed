"""Command-line pipeline driver.

Subcommands cover the whole workflow::

    train-teacher -> collect -> transfer -> finalize -> eval

plus `sample`, `bench-attn`, `ablate`, and `traj-stats`. Every command
resolves its configuration (defaults < --config file < flag overrides),
validates it, and writes the resolved form with a fingerprint into the
output directory, so any artifact can be reproduced from its run directory
alone. Given identical config and seed, outputs are overwritten
byte-identically; wall-clock measurements go to separate ``*timings*``
files, which are the only nondeterministic artifacts.

Exit codes: 0 success; 2 configuration or flag validation failure;
3 missing input file; 4 training divergence (a state dump is written);
5 malformed binary artifact.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import reporting
from .data import sample_batch
from .config import ConfigError, RunConfig, load_config, write_resolved
from .eval_bench import (EvalSettings, ablation_suite, aggregate_cells,
                         bench_attention, draw_probe_states, draw_samples,
                         evaluate_model, finalization_gap,
                         sliced_wasserstein2, temporal_smoothness)
from .flow_core import FlowSchedule
from .toy_model import CheckpointError, ToyTransformer, pole_branches
from .trajectory_store import TrajectorySet, TrajectoryError, collect
from .transfer_trainer import (DivergenceError, TransferConfig, train_teacher,
                               train_transfer)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4
EXIT_FORMAT = 5

_PROGRESS_EVERY = 200


def _say(msg: str) -> None:
    print(msg, flush=True)


def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _prepare_out(args, cfg: RunConfig) -> str:
    out = args.out
    os.makedirs(os.path.join(out, "figures"), exist_ok=True)
    digest = write_resolved(cfg, os.path.join(out, "resolved.cfg"))
    _say(f"config fingerprint {digest[:16]} -> {out}/resolved.cfg")
    return out


def _transfer_config(cfg: RunConfig) -> TransferConfig:
    return TransferConfig(
        target_linear=cfg.target_linear, lam=cfg.lam,
        alpha_start=cfg.alpha_start, alpha_end=cfg.alpha_end,
        total_steps=cfg.transfer_steps, batch_size=cfg.transfer_batch,
        lr_start=cfg.lr_start, lr_min=cfg.lr_min, warmup_frac=cfg.warmup_frac,
        weight_decay=cfg.weight_decay, r_lr=cfg.r_lr, r_kind=cfg.r_kind,
        hedgehog_lr=cfg.hedgehog_lr, t_min_clamp=cfg.t_min_clamp,
        objective=cfg.objective, reg_enabled=cfg.reg_enabled, seed=cfg.seed)


def _eval_settings(cfg: RunConfig) -> EvalSettings:
    return EvalSettings(n_samples=cfg.eval_samples,
                        n_projections=cfg.eval_projections,
                        n_steps=cfg.n_sample_steps,
                        noise_seed=cfg.eval_noise_seed,
                        projection_seed=cfg.eval_projection_seed)


def _progress(label: str, total: int):
    def on_step(row):
        step = row["step"]
        if step % _PROGRESS_EVERY == 0 or step == total - 1:
            keys = [k for k in ("loss", "loss_total", "loss_obj") if k in row]
            shown = " ".join(f"{k}={row[k]:.5f}" for k in keys)
            _say(f"  {label} step {step}/{total} {shown}")
    return on_step


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train_teacher(args, cfg: RunConfig) -> int:
    out = _prepare_out(args, cfg)
    teacher, rows = train_teacher(
        n_layers=cfg.n_layers, d_model=cfg.d_model, seq_len=cfg.seq_len,
        d_state=cfg.d_state, steps=cfg.teacher_steps,
        batch_size=cfg.teacher_batch, lr_start=cfg.teacher_lr,
        warmup_frac=cfg.teacher_warmup_frac,
        weight_decay=cfg.teacher_weight_decay, seed=cfg.seed,
        on_step=_progress("teacher", cfg.teacher_steps))
    ckpt = os.path.join(out, "teacher.ckpt")
    teacher.save(ckpt)
    reporting.write_records(os.path.join(out, "teacher_report.tsv"), rows)
    reporting.plot_loss_curves(rows, ["loss"],
                               os.path.join(out, "figures", "teacher_loss.png"),
                               "teacher flow-matching loss")
    _say(f"teacher saved to {ckpt} "
         f"(final loss {np.mean([r['loss'] for r in rows[-100:]]):.5f})")
    return EXIT_OK


def cmd_collect(args, cfg: RunConfig) -> int:
    teacher = ToyTransformer.load(_require(args.teacher, "teacher checkpoint"))
    out = _prepare_out(args, cfg)
    schedule = FlowSchedule.uniform(cfg.n_sample_steps)
    with pole_branches(teacher):
        tset = collect(teacher, schedule, cfg.n_trajectories, seed=cfg.seed)
        tset.check_euler_recurrence()
    path = os.path.join(out, "trajectories.lvtj")
    tset.save(path)
    _say(f"collected {len(tset.t)} records from {cfg.n_trajectories} "
         f"trajectories -> {path}")
    return EXIT_OK


def cmd_transfer(args, cfg: RunConfig) -> int:
    teacher = ToyTransformer.load(_require(args.teacher, "teacher checkpoint"))
    tset = TrajectorySet.load(_require(args.trajectories, "trajectory file"))
    out = _prepare_out(args, cfg)
    tcfg = _transfer_config(cfg)
    result = train_transfer(teacher, tset, tcfg,
                            on_step=_progress("transfer", tcfg.total_steps))
    ckpt = os.path.join(out, "student_mixed.ckpt")
    result.student.save(ckpt)
    reporting.write_records(os.path.join(out, "transfer_report.tsv"), result.rows)
    reporting.plot_loss_curves(
        result.rows, ["loss_obj", "loss_con", "loss_reg"],
        os.path.join(out, "figures", "transfer_loss.png"),
        f"transfer losses ({tcfg.objective})", logy=False)
    r_history = np.array([[row[f"r_{i}"] for i in range(teacher.n_layers)]
                          for row in result.rows])
    reporting.plot_r_history(r_history,
                             os.path.join(out, "figures", "r_history.png"))
    r = result.student.r_vector()
    _say(f"student saved to {ckpt}")
    _say("final scores: " + " ".join(f"{v:.4f}" for v in r))
    return EXIT_OK


def cmd_finalize(args, cfg: RunConfig) -> int:
    student = ToyTransformer.load(_require(args.student, "student checkpoint"))
    if student.is_finalized:
        raise CheckpointError(f"{args.student} is already finalized")
    out = _prepare_out(args, cfg)
    finalized = student.finalize_layers()
    ckpt = os.path.join(out, "student_final.ckpt")
    finalized.save(ckpt)
    probe = draw_probe_states(student, cfg.eval_noise_seed + 1)
    gap = finalization_gap(student, finalized, probe)
    rows = [{"layer": i, "r": float(r), "branch": blk.branch}
            for i, (r, blk) in enumerate(zip(student.r_vector(),
                                             finalized.blocks))]
    reporting.write_records(os.path.join(out, "finalize_report.tsv"), rows)
    n_linear = sum(blk.branch == "linear" for blk in finalized.blocks)
    _say(f"finalized {n_linear}/{finalized.n_layers} layers to linear; "
         f"params {student.n_parameters} -> {finalized.n_parameters}; "
         f"output gap {gap:.3e}")
    _say(f"finalized model saved to {ckpt}")
    return EXIT_OK


def cmd_sample(args, cfg: RunConfig) -> int:
    model = ToyTransformer.load(_require(args.model, "model checkpoint"))
    out = _prepare_out(args, cfg)
    n = args.n if args.n is not None else cfg.eval_samples
    samples = draw_samples(model, n, cfg.eval_noise_seed, cfg.n_sample_steps)
    path = os.path.join(out, "samples.npy")
    np.save(path, samples)
    reporting.plot_samples(samples, os.path.join(out, "figures", "samples.png"))
    _say(f"{n} samples -> {path} "
         f"(token jitter {temporal_smoothness(samples):.5f})")
    return EXIT_OK


def cmd_bench_attn(args, cfg: RunConfig) -> int:
    out = _prepare_out(args, cfg)
    result = bench_attention(cfg.bench_sizes, cfg.bench_d,
                             cfg.bench_repeats, seed=cfg.seed)
    reporting.write_records(os.path.join(out, "bench_timings.tsv"), result.rows)
    reporting.plot_scaling(result.rows, result.slopes,
                           os.path.join(out, "figures", "bench_scaling.png"))
    for kernel, slope in sorted(result.slopes.items()):
        _say(f"{kernel}: fitted log-log slope {slope:.3f}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    teacher = ToyTransformer.load(_require(args.teacher, "teacher checkpoint"))
    model = ToyTransformer.load(_require(args.model, "model checkpoint"))
    out = _prepare_out(args, cfg)
    settings = _eval_settings(cfg)

    data = sample_batch(np.random.default_rng(cfg.eval_noise_seed + 1),
                        cfg.eval_samples, cfg.seq_len)
    t0 = time.perf_counter()
    metrics = evaluate_model(model, teacher, settings, data_samples=data)
    if not model.is_finalized:
        r = model.r_vector()
        metrics["n_linear"] = int(sum(1 - b for b in model.rounded_branches()))
        metrics["r_max_pole_gap"] = float(np.abs(r - np.floor(r + 0.5)).max())
        metrics["finalization_gap"] = finalization_gap(
            model, model.finalize_layers(),
            draw_probe_states(model, cfg.eval_noise_seed + 1))
    wall = time.perf_counter() - t0
    reporting.write_metrics(os.path.join(out, "eval_report.tsv"), metrics)
    reporting.write_metrics(os.path.join(out, "timings.tsv"),
                            {"eval_seconds": wall})
    samples = draw_samples(model, min(cfg.eval_samples, 256),
                           settings.noise_seed, settings.n_steps)
    reporting.plot_samples(samples, os.path.join(out, "figures", "samples.png"))
    for key, value in metrics.items():
        _say(f"{key}: {reporting.format_value(value)}")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    teacher = ToyTransformer.load(_require(args.teacher, "teacher checkpoint"))
    tset = TrajectorySet.load(_require(args.trajectories, "trajectory file"))
    out = _prepare_out(args, cfg)
    base = _transfer_config(cfg)
    walls: list[dict] = []

    def on_cell(row, wall):
        walls.append({"cell": row["cell"], "seed": row["seed"], "seconds": wall})
        _say(f"  cell {row['cell']} seed {row['seed']}: "
             f"w2_final={row['w2_final']:.4f} n_linear={row['n_linear']} "
             f"({wall:.0f}s)")

    rows = ablation_suite(teacher, tset, base, targets=cfg.ablate_targets,
                          lambdas=cfg.ablate_lambdas, seeds=cfg.ablate_seeds,
                          settings=_eval_settings(cfg), on_cell=on_cell)
    reporting.write_records(os.path.join(out, "ablation_report.tsv"), rows)
    reporting.write_records(os.path.join(out, "ablation_summary.tsv"),
                            aggregate_cells(rows))
    reporting.write_records(os.path.join(out, "ablation_timings.tsv"), walls)
    _say(f"{len(rows)} cells -> {out}/ablation_report.tsv")
    return EXIT_OK


def cmd_traj_stats(args, cfg: RunConfig) -> int:
    tset = TrajectorySet.load(_require(args.trajectories, "trajectory file"))
    stats = tset.stats()
    _say(f"records: {stats['n_records']}  trajectories: "
         f"{stats['n_trajectories']}  state: "
         f"({stats['seq_len']}, {stats['d_state']})")
    _say("grid: " + " ".join(format(t, "g") for t in stats["grid"]))
    for node in stats["per_node"]:
        _say(f"  t={node['t']:<7g} records={node['records']} "
             f"x_rms={node['x_rms']:.4f} u_rms={node['u_rms']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config is not None:
        cfg = load_config(_require(args.config, "config file"), cfg)
    overrides = {
        "seed": "seed", "target": "target_linear", "lam": "lam",
        "alpha_start": "alpha_start", "alpha_end": "alpha_end",
        "objective": "objective",
    }
    for flag, key in overrides.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, key, value)
    if getattr(args, "steps", None) is not None:
        key = "teacher_steps" if args.command == "train-teacher" else "transfer_steps"
        setattr(cfg, key, args.steps)
    cfg.validate()
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="linflow",
        description="Toy flow-matching pipeline: train a quadratic-attention "
                    "teacher, then convert part of it to linear attention by "
                    "data-free transfer.",
        epilog="exit codes: 0 ok, 2 bad config/flags, 3 missing input, "
               "4 divergence, 5 malformed artifact")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, inputs=()):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=fn)
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=os.path.join("runs", name),
                       help=f"output directory (default runs/{name})")
        if "teacher" in inputs:
            p.add_argument("--teacher",
                           default=os.path.join("runs", "train-teacher",
                                                "teacher.ckpt"))
        if "trajectories" in inputs:
            p.add_argument("--trajectories",
                           default=os.path.join("runs", "collect",
                                                "trajectories.lvtj"))
        if "student" in inputs:
            p.add_argument("--student",
                           default=os.path.join("runs", "transfer",
                                                "student_mixed.ckpt"))
        if "model" in inputs:
            p.add_argument("--model",
                           default=os.path.join("runs", "finalize",
                                                "student_final.ckpt"))
        return p

    p = add("train-teacher", cmd_train_teacher,
            "flow-matching pre-training of the quadratic teacher")
    p.add_argument("--steps", type=int, default=None)

    add("collect", cmd_collect,
        "record teacher sampling trajectories to a binary file", ("teacher",))

    p = add("transfer", cmd_transfer,
            "data-free conversion of selected layers to linear attention",
            ("teacher", "trajectories"))
    p.add_argument("--target", type=int, default=None,
                   help="number of layers to convert")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="constraint/polarization weight")
    p.add_argument("--alpha-start", dest="alpha_start", type=float, default=None)
    p.add_argument("--alpha-end", dest="alpha_end", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--objective", choices=("adm", "mse"), default=None)

    add("finalize", cmd_finalize,
        "hard-round the mixed model to single branches", ("student",))

    p = add("sample", cmd_sample, "draw samples from a checkpoint", ("model",))
    p.add_argument("--n", type=int, default=None)

    add("bench-attn", cmd_bench_attn,
        "runtime scaling of softmax vs linear attention")

    add("eval", cmd_eval, "distribution metrics against the teacher",
        ("teacher", "model"))

    p = add("ablate", cmd_ablate,
            "target / lambda / regularizer / objective ablation grid",
            ("teacher", "trajectories"))

    p = add("traj-stats", cmd_traj_stats, "print trajectory-file statistics")
    p.add_argument("trajectories", help="trajectory file path")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DivergenceError as exc:
        dump = os.path.join(getattr(args, "out", "."), "divergence_dump.tsv")
        if exc.rows:
            os.makedirs(os.path.dirname(dump) or ".", exist_ok=True)
            reporting.write_records(dump, exc.rows)
        print(f"diverged: {exc} (state dump: {dump})", file=sys.stderr)
        return EXIT_DIVERGED
    except (CheckpointError, TrajectoryError) as exc:
        print(f"malformed artifact: {exc}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
