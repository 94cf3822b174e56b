"""Command line driver for the full pipeline.

Each stage is a subcommand reading one declarative config file; any key can
be overridden on the command line with ``--set section.key=value``, so every
ablation is a one-line variation of the same run.  Artifacts carry the
config hash so downstream stages can refuse inputs produced under a
different configuration.

Exit codes: 0 success, 2 bad config or input, 3 numeric failure,
4 incompatible artifacts.
"""

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from agd import checkpoint as ckpt
from agd import config as config_mod
from agd import rng as rng_mod
from agd import trajectories as traj
from agd.adapters import ARCHITECTURES, GuidedModel, default_config
from agd.diffusion import train_base
from agd.diffusion.sampling import CfgTeacher, SamplerKind, sample_batch
from agd.distill import distill, gd_finetune
from agd.errors import (
    CompatibilityError,
    ConfigError,
    DimensionError,
    InputError,
    NumericError,
    PreconditionError,
)
from agd.evaluation import endpoint_mse, guidance_sweep, scheduler_transfer
from agd.hashing import fnv1a64

BASE_FILE = "base.agdc"
STORE_FILE = "trajectories.agdt"
ADAPTER_FILE = "adapters.agda"
FINETUNE_FILE = "finetuned.agdc"


def _load_config(args):
    if args.config:
        cfg = config_mod.load(args.config)
    else:
        cfg = config_mod.ExperimentConfig().validate()
    if args.set:
        cfg = config_mod.apply_overrides(cfg, args.set)
    return cfg, config_mod.config_hash(cfg)


def _outdir(args):
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _check_threads(args):
    if args.threads < 1:
        raise InputError("--threads must be at least 1")


def _write_curve(path, curve, config_hash):
    with open(path, "w") as fh:
        fh.write(f"# config={config_hash}\n")
        fh.write("step,loss\n")
        for step, loss in curve:
            fh.write(f"{step},{loss!r}\n")
    return path


def _require_stage(paths, cfg, stage, force=False):
    """Refuse artifacts whose determining config sections differ from ours.

    Stage hashes cover only the sections feeding the artifact, so a change
    to, say, the distillation step count does not orphan a base checkpoint.
    Artifacts without a stage hash fall back to the full config hash.
    """
    expected = config_mod.stage_hash(cfg, stage)
    full = config_mod.config_hash(cfg)
    for path in paths:
        stored = ckpt.stored_stage_hash(path)
        mismatch = None
        if stored is not None:
            if stored != expected:
                mismatch = stored
        else:
            stored_full = ckpt.stored_config_hash(path)
            if stored_full is not None and stored_full != full:
                mismatch = stored_full
        if mismatch is not None:
            if force:
                print(f"warning: {path} was produced under config {mismatch}",
                      file=sys.stderr)
                continue
            raise CompatibilityError(
                f"{path} was produced under config {mismatch}, current "
                f"{stage} configuration is {expected}"
            )


def _load_frozen_base(path):
    return ckpt.load_base(path).freeze()


def cmd_train_base(args):
    cfg, h = _load_config(args)
    out = _outdir(args)
    dataset = config_mod.make_dataset(cfg)
    schedule = config_mod.make_schedule(cfg)
    # log every step so the loss CSV is a complete record of the run
    train_cfg = dataclasses.replace(cfg.base, log_every=1)
    model, curve = train_base(dataset, schedule, train_cfg, seed=cfg.seed)
    base_path = ckpt.save_base(out / BASE_FILE, model, config_hash=h,
                               stage_hash=config_mod.stage_hash(cfg, "base"))
    _write_curve(out / "train_loss.csv", curve, h)
    print(f"final loss {curve[-1][1]:.6g}")
    print(f"wrote {base_path}")
    return 0


def cmd_gen_traj(args):
    cfg, h = _load_config(args)
    out = _outdir(args)
    base_path = Path(args.base) if args.base else out / BASE_FILE
    _require_stage([base_path], cfg, "base")
    base = _load_frozen_base(base_path)
    schedule = config_mod.make_schedule(cfg)
    t = cfg.trajectories
    seed = rng_mod.spawn_seed(cfg.seed, "trajectories", t.source)
    # stratified: trajectory i gets class i mod C, equal counts up to remainder
    class_ids = np.arange(t.count) % base.num_classes if t.stratified else None
    if t.source == "guided":
        store = traj.generate_guided_trajectories(
            base, schedule, t.count, (t.omega_min, t.omega_max),
            kind=t.kind, seed=seed, chunk_size=t.chunk_size, class_ids=class_ids,
        )
    else:
        store = traj.generate_diffusion_pairs(
            base, config_mod.make_dataset(cfg), schedule, t.count,
            (t.omega_min, t.omega_max), seed=seed, chunk_size=t.chunk_size,
            class_ids=class_ids,
        )
    path = store.save(out / STORE_FILE)
    lo, hi = store.omega_range()
    print(f"wrote {path}: {len(store)} records, "
          f"{store.num_trajectories} trajectories, omega [{lo:.4g}, {hi:.4g}]")
    return 0


def cmd_store_info(args):
    path = Path(args.store)
    store = traj.TrajectoryStore.load(path)
    lo, hi = store.omega_range()
    checksum = fnv1a64(store.records.tobytes())
    print(f"records: {len(store)}")
    print(f"trajectories: {store.num_trajectories}")
    print(f"steps: {store.num_steps}")
    print(f"data_dim: {store.data_dim}")
    print(f"omega_range: [{lo:.6g}, {hi:.6g}]")
    print(f"schedule_hash: {store.schedule_hash:016x}")
    print(f"teacher_hash: {store.teacher_hash:016x}")
    print(f"checksum: {checksum:016x}")
    return 0


def _student_seed(cfg):
    return rng_mod.spawn_seed(cfg.seed, "student-init")


def cmd_distill(args):
    cfg, h = _load_config(args)
    out = _outdir(args)
    base_path = Path(args.base) if args.base else out / BASE_FILE
    store_path = Path(args.store) if args.store else out / STORE_FILE
    _require_stage([base_path], cfg, "base")
    base = _load_frozen_base(base_path)
    store = traj.TrajectoryStore.load(store_path)
    store.check_teacher(base)
    schedule = config_mod.make_schedule(cfg)
    store.check_schedule(schedule)

    sh = config_mod.stage_hash(cfg, "distill")
    if cfg.distill.mode == "agd_adapters":
        student = GuidedModel(base, cfg.adapters, seed=_student_seed(cfg))
        run = distill(store, student, schedule, cfg.distill)
        model_path = ckpt.save_adapters(out / ADAPTER_FILE, student,
                                        config_hash=h, stage_hash=sh)
    else:
        run, model = gd_finetune(store, base, schedule, cfg.distill,
                                 seed_model=_student_seed(cfg))
        model_path = ckpt.save_finetuned(out / FINETUNE_FILE, model,
                                         config_hash=h, stage_hash=sh)
    _write_curve(out / "distill_loss.csv", run.curve, h)
    print(f"mode={run.mode} trainable_param_ratio={run.param_ratio:.6g} "
          f"holdout {run.holdout_initial:.6g} -> {run.holdout_final:.6g}")
    print(f"wrote {model_path}")
    return 0


def _load_student(args, cfg, base, out):
    """(name, factory, ratio) for each student checkpoint on the command line."""
    students = []
    adapters_path = Path(args.adapters) if args.adapters else out / ADAPTER_FILE
    if adapters_path.exists() or args.adapters:
        student = ckpt.load_adapters(adapters_path, base)
        students.append(
            ("agd", student.bind, student.param_ratio(), adapters_path)
        )
    finetuned_path = Path(args.finetuned) if args.finetuned else out / FINETUNE_FILE
    if finetuned_path.exists() or args.finetuned:
        model = ckpt.load_finetuned(finetuned_path)
        ratio = model.n_params() / base.n_params()
        students.append(("gd_baseline", model.bind, ratio, finetuned_path))
    return students


def cmd_eval(args):
    cfg, h = _load_config(args)
    out = _outdir(args)
    _check_threads(args)
    base_path = Path(args.base) if args.base else out / BASE_FILE
    _require_stage([base_path], cfg, "base", force=args.force)
    base = _load_frozen_base(base_path)

    if args.ablate:
        store_path = Path(args.store) if args.store else out / STORE_FILE
        return _run_ablation(cfg, h, base, store_path, args.ablate, out)

    students = _load_student(args, cfg, base, out)
    _require_stage([p for *_, p in students], cfg, "distill", force=args.force)

    dataset = config_mod.make_dataset(cfg)
    schedule = config_mod.make_schedule(cfg)
    sweep_students = {name: (factory, ratio) for name, factory, ratio, _ in students}
    if sweep_students:
        # conditional base without guidance, as the reference point
        sweep_students["unguided"] = (lambda omega: base, 0.0)
    e = cfg.eval
    report = guidance_sweep(
        base, sweep_students, dataset, schedule, e.omegas, seed=cfg.seed,
        num_gen=e.num_gen, num_real=e.num_real, num_pair_seeds=e.num_pair_seeds,
    )
    report.metadata["config"] = h
    report.save(out / "sweep.csv")

    text = report.summary_text(digits=6)
    agd_entry = next((s for s in students if s[0] == "agd"), None)
    if agd_entry is not None:
        student = agd_entry[1](e.transfer_omega)
        transfer = scheduler_transfer(
            student, base, dataset, schedule, e.transfer_omega,
            seed=cfg.seed, num_gen=e.num_gen,
        )
        lines = [f"scheduler_transfer omega={e.transfer_omega:.6g}"]
        for key in sorted(transfer):
            value = transfer[key]
            lines.append(
                f"  {key}: {value:.6g}" if isinstance(value, float)
                else f"  {key}: {value}"
            )
        text += "\n" + "\n".join(lines) + "\n"
    with open(out / "report.txt", "w") as fh:
        fh.write(text)
    print(f"wrote {out / 'sweep.csv'} ({len(report.rows)} rows)")
    print(f"wrote {out / 'report.txt'}")
    return 0


def cmd_sample(args):
    cfg, h = _load_config(args)
    out = _outdir(args)
    base_path = Path(args.base) if args.base else out / BASE_FILE
    _require_stage([base_path], cfg, "base")
    base = _load_frozen_base(base_path)
    schedule = config_mod.make_schedule(cfg)
    omega = cfg.eval.transfer_omega if args.omega is None else args.omega

    if args.method == "teacher":
        model = CfgTeacher(base, omega)
    elif args.method == "base":
        model = base
    elif args.method == "agd":
        path = Path(args.adapters) if args.adapters else out / ADAPTER_FILE
        _require_stage([path], cfg, "distill")
        model = ckpt.load_adapters(path, base).bind(omega)
    else:
        path = Path(args.finetuned) if args.finetuned else out / FINETUNE_FILE
        _require_stage([path], cfg, "distill")
        model = ckpt.load_finetuned(path).bind(omega)

    seed = rng_mod.spawn_seed(cfg.seed, "sample", args.method, float(omega))
    ids = rng_mod.stream(seed, "sample-ids").integers(0, base.num_classes, args.count)
    x = sample_batch(model, schedule, ids, kind=args.kind, seed=seed)
    path = out / f"samples_{args.method}.csv"
    with open(path, "w") as fh:
        fh.write(f"# config={h}\n")
        fh.write("x,y,class_id\n")
        for row, cid in zip(x, ids):
            fh.write(f"{float(row[0])!r},{float(row[1])!r},{cid}\n")
    print(f"wrote {path}: {args.count} points, method={args.method}, "
          f"omega={omega:.4g}")
    return 0


def _ablation_variants(cfg, what):
    """Variant name plus the (adapter cfg, distill cfg) pair it trains with."""
    if what == "arch":
        return [(arch, default_config(arch, cfg.adapters.init), cfg.distill)
                for arch in ARCHITECTURES]
    if what == "init":
        return [(init, dataclasses.replace(cfg.adapters, init=init), cfg.distill)
                for init in ("xavier", "zero")]
    if what == "loss":
        return [(loss, cfg.adapters, dataclasses.replace(cfg.distill, loss=loss))
                for loss in ("l2", "l1", "weighted_l2")]
    if what == "source":
        return [(source, cfg.adapters, cfg.distill)
                for source in ("guided", "diffusion")]
    raise InputError(f"unknown ablation {what!r}")


def _run_ablation(cfg, h, base, store_path, what, out):
    store = traj.TrajectoryStore.load(store_path)
    store.check_teacher(base)
    schedule = config_mod.make_schedule(cfg)
    store.check_schedule(schedule)
    dataset = config_mod.make_dataset(cfg)
    t = cfg.trajectories

    rows = []
    for name, adapter_cfg, distill_cfg in _ablation_variants(cfg, what):
        if what == "source" and name == "diffusion":
            variant_store = traj.generate_diffusion_pairs(
                base, dataset, schedule, t.count, (t.omega_min, t.omega_max),
                seed=rng_mod.spawn_seed(cfg.seed, "trajectories", "diffusion"),
                chunk_size=t.chunk_size,
            )
        else:
            variant_store = store
        student = GuidedModel(
            base, adapter_cfg,
            seed=rng_mod.spawn_seed(cfg.seed, "ablate", what, name),
        )
        run = distill(variant_store, student, schedule, distill_cfg)
        teacher = CfgTeacher(base, cfg.eval.transfer_omega)
        mse = endpoint_mse(
            student.bind(cfg.eval.transfer_omega), teacher, schedule,
            base.num_classes, cfg.eval.num_pair_seeds,
            seed=rng_mod.spawn_seed(cfg.seed, "ablate-mse", name),
        )
        rows.append((name, run.param_ratio, run.holdout_initial,
                     run.holdout_final, mse))
        print(f"{what}={name}: holdout {run.holdout_initial:.6g} -> "
              f"{run.holdout_final:.6g}, endpoint_mse {mse:.6g}")

    path = out / f"ablate_{what}.csv"
    with open(path, "w") as fh:
        fh.write(f"# config={h}\n")
        fh.write("variant,trainable_param_ratio,holdout_initial,"
                 "holdout_final,endpoint_mse_vs_teacher\n")
        for name, ratio, initial, final, mse in rows:
            fh.write(f"{name},{ratio!r},{initial!r},{final!r},{mse!r}\n")
    print(f"wrote {path}")
    return 0


def cmd_ablate(args):
    cfg, h = _load_config(args)
    out = _outdir(args)
    base_path = Path(args.base) if args.base else out / BASE_FILE
    store_path = Path(args.store) if args.store else out / STORE_FILE
    _require_stage([base_path], cfg, "base")
    base = _load_frozen_base(base_path)
    return _run_ablation(cfg, h, base, store_path, args.what, out)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML experiment config")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key by dotted path")
    common.add_argument("-o", "--outdir", default="runs",
                        help="artifact directory (default: runs)")
    common.add_argument("--threads", type=int, default=1,
                        help="worker-thread cap; stages currently use one")

    parser = argparse.ArgumentParser(
        prog="agd",
        description="Guidance distillation pipeline: train a conditional "
        "denoiser, cache guided trajectories, fit adapters, evaluate. "
        "sweep.csv columns: omega, method, endpoint_mse_vs_teacher, "
        "energy_distance_to_data, knn_precision, knn_recall, nfe_total, "
        "trainable_param_ratio.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-base", parents=[common],
                       help="train the conditional denoiser")
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("gen-traj", parents=[common],
                       help="cache guided (or noised-data) trajectories")
    p.add_argument("--base", help="base checkpoint path")
    p.set_defaults(func=cmd_gen_traj)

    p = sub.add_parser("store-info", parents=[common],
                       help="print a trajectory store's header")
    p.add_argument("store", help="path to a .agdt store")
    p.set_defaults(func=cmd_store_info)

    p = sub.add_parser("distill", parents=[common],
                       help="train adapters (or the full-tuning baseline)")
    p.add_argument("--base", help="base checkpoint path")
    p.add_argument("--store", help="trajectory store path")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("sample", parents=[common],
                       help="write a CSV of generated points")
    p.add_argument("--method", default="agd",
                   choices=("teacher", "base", "agd", "gd"))
    p.add_argument("--omega", type=float, default=None)
    p.add_argument("--count", type=int, default=2048)
    p.add_argument("--kind", default=SamplerKind.DETERMINISTIC.value,
                   choices=[k.value for k in SamplerKind])
    p.add_argument("--base", help="base checkpoint path")
    p.add_argument("--adapters", help="adapter checkpoint path")
    p.add_argument("--finetuned", help="full-tuning checkpoint path")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", parents=[common],
                       help="guidance sweep, transfer check, report files")
    p.add_argument("--base", help="base checkpoint path")
    p.add_argument("--adapters", help="adapter checkpoint path")
    p.add_argument("--finetuned", help="full-tuning checkpoint path")
    p.add_argument("--store", help="store path (used with --ablate)")
    p.add_argument("--force", action="store_true",
                   help="evaluate artifacts from mismatched configs anyway")
    p.add_argument("--ablate", choices=("arch", "init", "loss", "source"),
                   help="run a comparison table instead of the sweep")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common],
                       help="distill several variants and tabulate them")
    p.add_argument("--what", required=True,
                   choices=("arch", "init", "loss", "source"))
    p.add_argument("--base", help="base checkpoint path")
    p.add_argument("--store", help="trajectory store path")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _check_threads(args)
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InputError, PreconditionError, DimensionError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except CompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
