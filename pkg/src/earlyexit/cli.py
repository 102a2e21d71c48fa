"""Command-line entry point: ``earlyexit <subcommand> [--config PATH] [--seed N] [--out DIR]``.

Outputs are written to a staging directory inside ``--out`` and moved into
place only when the subcommand succeeds, so a failed run leaves no partial
files behind.  Set ``EARLYEXIT_LOG`` (DEBUG, INFO, WARNING) for verbosity.
"""
import argparse
import logging
import os
import shutil
import sys
from pathlib import Path

LOG_ENV = "EARLYEXIT_LOG"
EXPERIMENTS = ("per-exit-accuracy", "accuracy-vs-samples", "accuracy-vs-latency", "exit-costs", "training-cost")

log = logging.getLogger("earlyexit")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI experiment configuration")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--out", type=Path, help="override [run] out")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (fresh processes only)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config value")

    p = argparse.ArgumentParser(prog="earlyexit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_, model=False, data=False, user=False):
        sp = sub.add_parser(name, parents=[common], help=help_)
        if model:
            sp.add_argument("--model", type=Path, required=True, help="model checkpoint")
        if data:
            sp.add_argument("--data", type=Path, help="directory written by gen-data (default: regenerate)")
        if user:
            sp.add_argument("--user", type=int, default=0, help="user index")
        return sp

    add("gen-data", "generate global and per-user datasets")
    add("train-global", "train the multi-exit global model", data=True)
    sp = add("personalise", "personalise the early exits for one user", model=True, data=True, user=True)
    sp.add_argument("--mode", help="override [personalisation] mode")
    add("profile", "profile every exit on a user's calibration split", model=True, data=True, user=True)
    add("calibrate", "choose the operating threshold and prune exits", model=True, data=True, user=True)
    sp = add("infer", "early-exit inference over a threshold grid", model=True, data=True, user=True)
    sp.add_argument("--calibration", type=Path, help="calibration.ini whose exits and threshold to apply")
    sp = add("simulate", "run the orchestrator on a simulated sample stream", model=True, data=True, user=True)
    sp.add_argument("--no-personalise", action="store_true", help="calibrate the given model as is")
    sp = add("experiment", "reproduce a desk-scale analysis", data=True)
    sp.add_argument("name", choices=EXPERIMENTS + ("all",))
    sp.add_argument("--model", type=Path, help="global checkpoint (default: train from the config)")
    sp = sub.add_parser("config", help="show configuration")
    sp.add_argument("--print-defaults", action="store_true", help="print every key with its default")
    return p


def load_config(args):
    from .config import ExperimentConfig
    from .tensor_core import ConfigError

    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    values = {s: dict(v) for s, v in cfg.values.items()}
    for item in args.set:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        values.setdefault(section, {})[name] = value
    if args.seed is not None:
        values["run"]["seed"] = str(args.seed)
    if args.out is not None:
        values["run"]["out"] = str(args.out)
    return ExperimentConfig(values)


# data/model loading -----------------------------------------------------------------

def _bundle(cfg, data_dir):
    from .data import UserSplit, gen_user_distribution, load_dataset, read_manifest
    from .experiments import DataBundle, build_data

    if data_dir is None:
        return build_data(cfg)
    data_dir = Path(data_dir)
    train = load_dataset(data_dir / "train")
    test = load_dataset(data_dir / "test") if (data_dir / "test").exists() else None
    pool = load_dataset(data_dir / "pool")
    users = []
    for name, entry in sorted(read_manifest(data_dir / "users.ini").items(), key=lambda kv: int(kv[0].split(".")[1])):
        dist = gen_user_distribution(pool.num_classes, entry["sigma"], seed=None, center=entry["center"])
        part = {k: pool.subset(entry[k]) if k in entry and len(entry[k]) else None for k in ("train", "calib", "test")}
        users.append(UserSplit(int(name.split(".")[1]), dist, part["train"], part["test"], part["calib"]))
    return DataBundle(train, test, pool, users)


def _user(bundle, index):
    from .tensor_core import ConfigError

    if not 0 <= index < len(bundle.users):
        raise ConfigError(f"user {index} does not exist ({len(bundle.users)} users)")
    return bundle.users[index]


def _need(split, what):
    from .tensor_core import ConfigError

    if split is None:
        raise ConfigError(f"user has no {what} split; adjust the [users] section")
    return split


# subcommands --------------------------------------------------------------------------

def cmd_gen_data(cfg, args, out):
    import numpy as np

    from .data import save_dataset, write_manifest
    from .experiments import build_data, write_rows

    b = build_data(cfg)
    d = out / "data"
    save_dataset(b.train, d / "train")
    if b.test is not None:
        save_dataset(b.test, d / "test")
    save_dataset(b.pool, d / "pool")
    write_manifest(b.users, d / "users.ini")
    k = b.pool.num_classes
    rows = [["train", "all", len(b.train)] + b.train.class_counts().tolist()]
    if b.test is not None:
        rows.append(["test", "all", len(b.test)] + b.test.class_counts().tolist())
    for u in b.users:
        for split in ("train", "calib", "test"):
            ds = getattr(u, split)
            if ds is not None:
                rows.append([split, u.user, len(ds)] + np.bincount(ds.labels, minlength=k).tolist())
    write_rows(out / "data_summary.csv", ["split", "user", "n_samples"] + [f"class_{c}" for c in range(k)], rows)


def cmd_train_global(cfg, args, out):
    from .experiments import exit_accuracies, train_global_model, write_rows
    from .model import save_checkpoint

    b = _bundle(cfg, args.data)
    model, tlog = train_global_model(cfg, b.train)
    save_checkpoint(model, out / "global.ckpt")
    tlog.write_csv(out / "global_train_log.csv")
    acc = exit_accuracies(model, b.test) if b.test is not None else [float("nan")] * (model.M + 1)
    write_rows(out / "global_exits.csv", ["exit_id", "flops", "params", "test_accuracy"],
               [[e, model.exit_flops(e), model.exit_params(e), acc[e - 1]] for e in range(1, model.M + 2)])


def cmd_personalise(cfg, args, out):
    from .experiments import exit_accuracies, final_agreement, personalise_user, write_rows
    from .model import load_checkpoint, save_checkpoint

    model = load_checkpoint(args.model)
    user = _user(_bundle(cfg, args.data), args.user)
    pers, tlog = personalise_user(model, user, cfg, args.mode)
    save_checkpoint(pers, out / f"personalised_user{user.user}.ckpt")
    tlog.write_csv(out / "personalise_log.csv")
    test = _need(user.test, "test")
    before, after, agree = exit_accuracies(model, test), exit_accuracies(pers, test), final_agreement(pers, test)
    write_rows(out / "personalise_accuracy.csv", ["exit_id", "global_accuracy", "personalised_accuracy",
                                                  "final_agreement"],
               [[e, before[e - 1], after[e - 1], agree[e - 1]] for e in range(1, model.M + 2)])


def _profile(cfg, args):
    from .experiments import profile_user
    from .model import load_checkpoint

    model = load_checkpoint(args.model)
    user = _user(_bundle(cfg, args.data), args.user)
    return profile_user(model, _need(user.calib, "calibration"), cfg)


def cmd_profile(cfg, args, out):
    report = _profile(cfg, args)
    report.write_exit_csv(out / "profile_exits.csv")
    report.write_threshold_csv(out / "profile_thresholds.csv")


def cmd_calibrate(cfg, args, out):
    from .experiments import calibrate_report
    from .plotting import line_chart

    report = _profile(cfg, args)
    result = calibrate_report(report, cfg)
    report.write_exit_csv(out / "profile_exits.csv")
    report.write_threshold_csv(out / "profile_thresholds.csv")
    result.write_summary(out / "calibration.ini")
    result.write_pareto_csv(out / "pareto.csv")
    pts = result.pareto
    line_chart(out / "pareto.svg", {"pareto": ([p[0] * 1e6 for p in pts], [p[1] for p in pts])},
               "mean latency (us)", "accuracy", "Pareto front")


def cmd_infer(cfg, args, out):
    from .calibration import CalibrationResult
    from .experiments import threshold_sweep, write_rows
    from .inference import ExitPolicy, infer_batch, write_results_csv
    from .model import load_checkpoint
    from .plotting import line_chart

    model = load_checkpoint(args.model)
    user = _user(_bundle(cfg, args.data), args.user)
    test = _need(user.test, "test")
    selected = None
    spf = cfg.get_float("calibration", "seconds_per_flop")
    if args.calibration:
        cal = CalibrationResult.read_summary(args.calibration)
        selected = cal.selected_exits
        res, _ = infer_batch(model, test.images, ExitPolicy(selected, cal.thr_conf), labels=test.labels,
                             seconds_per_flop=spf)
        write_results_csv(res, out / "infer_results.csv", labels=test.labels)
    rows = threshold_sweep(model, test, cfg.thresholds, selected, spf)
    write_rows(out / "infer_thresholds.csv", ["threshold", "accuracy", "mean_latency", "mean_flops"], rows)
    line_chart(out / "infer_thresholds.svg", {"early exit": ([r[2] for r in rows], [r[1] for r in rows])},
               "mean latency (us)", "accuracy", "Accuracy vs. inference latency")


def cmd_simulate(cfg, args, out):
    from .experiments import calibrated_orchestrator, event_stream, simulate_stream, write_rows
    from .model import load_checkpoint

    model = load_checkpoint(args.model)
    b = _bundle(cfg, args.data)
    user = _user(b, args.user)
    orch, _ = calibrated_orchestrator(model, user, cfg, personalise=not args.no_personalise)
    stream = event_stream(b.pool, user.dist, cfg.get_int("simulate", "events"), cfg.seed + 20,
                          cfg.get_int("simulate", "shift_at"))
    _, rows = simulate_stream(orch, stream, cfg, cfg.get_int("simulate", "plug_every"))
    orch.write_log(out / "simulate_log.csv")
    write_rows(out / "simulate_summary.csv", ["metric", "value"], rows)


def cmd_experiment(cfg, args, out):
    from . import experiments as ex
    from .model import load_checkpoint
    from .plotting import line_chart

    b = _bundle(cfg, args.data)
    model = load_checkpoint(args.model) if args.model else ex.train_global_model(cfg, b.train)[0]
    users = b.users[:cfg.get_int("experiment", "users")]
    for u in users:
        _need(u.test, "test")
    modes = cfg.get("experiment", "modes").split()
    names = EXPERIMENTS if args.name == "all" else (args.name,)
    for name in names:
        log.info("experiment %s", name)
        if name == "per-exit-accuracy":
            rows = ex.per_exit_accuracy(model, users, cfg, modes)
            ex.write_rows(out / "per_exit_accuracy.csv", ["user", "exit_id", "mode", "accuracy", "final_agreement"],
                          rows)
            line_chart(out / "per_exit_accuracy.svg", ex.series_by(rows, 2, 1, 3, lambda r: r[0] == users[0].user),
                       "exit", "accuracy", "Per-exit accuracy on user data")
        elif name == "accuracy-vs-samples":
            rows = ex.accuracy_vs_samples(model, users, cfg, cfg.get_ints("experiment", "sample_counts"), modes)
            ex.write_rows(out / "accuracy_vs_samples.csv", ["n_samples", "exit_id", "mode", "accuracy"], rows)
            series = {f"{m} exit {e}": s for (m, e), s in _group_samples(rows).items()}
            line_chart(out / "accuracy_vs_samples.svg", series, "personalisation samples", "accuracy",
                       "Accuracy vs. #personalisation samples")
        elif name == "accuracy-vs-latency":
            rows = ex.accuracy_vs_latency(model, users[0], cfg, modes[0])
            ex.write_rows(out / "accuracy_vs_latency.csv",
                          ["model", "threshold", "accuracy", "mean_latency", "mean_flops"], rows)
            line_chart(out / "accuracy_vs_latency.svg", ex.series_by(rows, 0, 3, 2), "mean latency (us)",
                       "accuracy", "Accuracy vs. inference latency")
        elif name == "exit-costs":
            rows = ex.exit_costs(model)
            ex.write_rows(out / "exit_costs.csv", ["exit_id", "flops", "params", "head_params", "flops_fraction",
                                                   "params_fraction"], rows)
            line_chart(out / "exit_costs.svg", {"flops": ([r[0] for r in rows], [r[4] for r in rows]),
                                                "params": ([r[0] for r in rows], [r[5] for r in rows])},
                       "exit", "fraction of full model", "Exit cost")
        elif name == "training-cost":
            n = len(users[0].train)
            rows = ex.training_cost(model, n)
            ex.write_rows(out / "training_cost.csv", ["exit_id", "full_flops", "exits_only_flops", "speedup"], rows)
            line_chart(out / "training_cost.svg", {"speedup": ([r[0] for r in rows], [r[3] for r in rows])},
                       "personalised exit", "training FLOP reduction", "Training cost")


def _group_samples(rows):
    out = {}
    for n, e, mode, acc in rows:
        xs, ys = out.setdefault((mode, e), ([], []))
        xs.append(n)
        ys.append(acc)
    return out


COMMANDS = {
    "gen-data": cmd_gen_data, "train-global": cmd_train_global, "personalise": cmd_personalise,
    "profile": cmd_profile, "calibrate": cmd_calibrate, "infer": cmd_infer, "simulate": cmd_simulate,
    "experiment": cmd_experiment,
}


def _publish(staging: Path, out: Path) -> None:
    for item in sorted(staging.iterdir()):
        target = out / item.name
        if target.is_dir() and not target.is_symlink():
            shutil.rmtree(target)
        os.replace(item, target)
    staging.rmdir()


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(max(1, getattr(args, "threads", 1))))

    from .config import defaults_text
    from .data import DatasetFormatError
    from .model import CheckpointError
    from .tensor_core import ConfigError

    if args.command == "config":
        if not args.print_defaults:
            print("nothing to do: pass --print-defaults", file=sys.stderr)
            return 2
        sys.stdout.write(defaults_text())
        return 0
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"earlyexit: invalid configuration: {exc}", file=sys.stderr)
        return 2
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    staging = out / f".partial-{args.command}-{os.getpid()}"
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir()
    try:
        COMMANDS[args.command](cfg, args, staging)
    except (ConfigError, DatasetFormatError, CheckpointError, FileNotFoundError) as exc:
        shutil.rmtree(staging, ignore_errors=True)
        print(f"earlyexit {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        shutil.rmtree(staging, ignore_errors=True)
        print(f"earlyexit {args.command} failed: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1
    _publish(staging, out)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
