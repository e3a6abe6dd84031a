"""Command-line entry point: ``regrasp <command> [options]``.

Every command writes into a fresh timestamped directory under ``--out``
holding the resolved config, the seed record and the command's artifacts.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from . import config as C
from .bc import actor_spec, pretrain
from .checkpoint import actor_side_fields, load_checkpoint, save_checkpoint
from .classifier import CSV_HEADER, build_dataset, load_model, save_model, train_classifier
from .diffnet import MlpSpec, load_snapshot, save_snapshot
from .env import collect_demos, collect_failures, load_episodes, save_episodes
from .replay import DualBuffer
from .rl import METRIC_FIELDS, init_learner
from .training import ActorSide, evaluate, run_single_process

log = logging.getLogger("regrasp")

EPISODE_FIELDS = ("env_steps", "detected_success", "true_success", "length")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _run_dir(out: str, command: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(out) / f"{command}-{stamp}"
    path, k = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{k}")
        k += 1
    path.mkdir(parents=True)
    return path


def _resolve(args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    for flag, key in (("mode", "dist.mode"), ("reward", "rl.reward"), ("objective", "rl.objective"),
                      ("beta", "rl.beta"), ("reset_mode", "env.reset_mode"), ("trials", "eval.trials"),
                      ("env_steps", "rl.env_steps")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    cfg = C.load_config(args.config, overrides)
    C.validate(cfg)
    return cfg


def _start(args, command: str) -> tuple[dict, Path]:
    cfg = _resolve(args)
    run = _run_dir(args.out, command)
    (run / "config.txt").write_text(C.format_config(cfg))
    (run / "seed.txt").write_text(f"seed = {cfg['seed']}\neval.seed = {cfg['eval.seed']}\n")
    log.info("run directory %s", run)
    return cfg, run


def _need(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} file not found: {p}")
    return p


def _spec_for(params, activation: str = "relu") -> MlpSpec:
    shapes = [s for s, _ in params.layout]
    return MlpSpec(shapes[0][1], tuple(o for o, _ in shapes[:-1]), shapes[-1][0], activation)


# --- commands ----------------------------------------------------------------------


def cmd_gen_demos(args) -> int:
    cfg, run = _start(args, "gen-demos")
    env = C.env_config(cfg)
    demos = collect_demos(cfg["demos.count"], cfg["env.reset_mode"], cfg["seed"], env, cfg["demos.expert_noise"])
    save_episodes(run / "demos.bin", demos)
    if cfg["demos.failures"] > 0:
        save_episodes(run / "failures.bin", collect_failures(cfg["demos.failures"], cfg["env.reset_mode"],
                                                             cfg["seed"], env))
    print(f"wrote {len(demos)} demos ({sum(len(d) for d in demos)} transitions) to {run}")
    return 0


def cmd_train_classifier(args) -> int:
    cfg, run = _start(args, "train-classifier")
    episodes = load_episodes(_need(args.demos, "demos"))
    if args.failures:
        episodes += load_episodes(_need(args.failures, "failures"))
    else:
        episodes += collect_failures(cfg["demos.failures"], cfg["env.reset_mode"], cfg["seed"], C.env_config(cfg))
    frames, _ = build_dataset(episodes)
    model, report = train_classifier(frames, seed=cfg["seed"], epochs=cfg["classifier.epochs"],
                                     class_balance=cfg["classifier.class_balance"],
                                     hidden=cfg["classifier.hidden"],
                                     learning_rate=cfg["classifier.learning_rate"],
                                     batch_size=cfg["classifier.batch_size"],
                                     threshold=cfg["classifier.threshold"])
    save_model(run / "classifier.bin", model)
    (run / "classifier_metrics.csv").write_text(CSV_HEADER + "\n" + report.csv_row() + "\n")
    print(CSV_HEADER)
    print(report.csv_row())
    return 0


def cmd_pretrain(args) -> int:
    cfg, run = _start(args, "pretrain")
    demos = load_episodes(_need(args.demos, "demos"))
    params, losses = pretrain(demos, C.bc_config(cfg), actor_spec(cfg["bc.hidden"]))
    save_snapshot(run / "actor_bc.bin", params, b"pretrained")
    with open(run / "bc_loss.csv", "w") as f:
        f.write("epoch,loss\n")
        f.writelines(f"{i + 1},{v!r}\n" for i, v in enumerate(losses))
    print(f"final BC loss {losses[-1]:.6f}; actor snapshot {run / 'actor_bc.bin'}")
    return 0


class _CsvSink:
    def __init__(self, path: Path, fields):
        self.fields = fields
        self.f = open(path, "w", newline="")
        self.w = csv.DictWriter(self.f, fieldnames=fields, extrasaction="ignore")
        self.w.writeheader()

    def __call__(self, row: dict):
        self.w.writerow(row)

    def close(self):
        self.f.close()


def cmd_finetune(args) -> int:
    cfg, run = _start(args, "finetune")
    hp, sched, env = C.rl_hyperparams(cfg), C.schedule(cfg), C.env_config(cfg)
    classifier = load_model(_need(args.classifier, "classifier")) if sched.reward == "classifier" else None
    ckdir = run / "checkpoints"
    ckdir.mkdir()
    side = None
    if args.resume:
        state, buffers, manifest = load_checkpoint(_need(args.resume, "resume"))
        if "actor_side" in manifest:
            side = ActorSide.restore(state.actor_spec, sched, actor_side_fields(manifest), env, classifier)
    else:
        demos = load_episodes(_need(args.demos, "demos"))
        pretrained, _ = load_snapshot(_need(args.actor, "actor"))
        spec = _spec_for(pretrained)
        state = init_learner(pretrained, spec, hp, cfg["seed"])
        buffers = DualBuffer(cfg["rl.online_capacity"])
        buffers.seed_demos(demos)

    sink = _CsvSink(run / "metrics.csv", METRIC_FIELDS)

    def halt(st, buf):
        save_checkpoint(ckdir / "halt.bin", st, buf)
        log.error("learner failed; checkpoint written to %s", ckdir / "halt.bin")

    try:
        if cfg["dist.mode"] == "distributed":
            from .distributed import run_distributed_processes
            result = run_distributed_processes(state, buffers, hp, sched, env, classifier, C.actor_config(cfg),
                                               lockstep=cfg["dist.lockstep"], host=cfg["dist.host"],
                                               port=cfg["dist.port"], on_metrics=sink, on_error=halt)
            episodes = result.episodes
            save_checkpoint(ckdir / "final.bin", state, buffers)
        else:
            every = max(1, cfg["rl.checkpoint_every"])
            done, episodes = 0, []
            while done < sched.env_steps:
                chunk = min(every, sched.env_steps - done)
                part = dataclasses.replace(sched, env_steps=chunk)
                try:
                    result = run_single_process(state, buffers, hp, part, env, classifier, actor=side,
                                                on_metrics=sink)
                except Exception:
                    halt(state, buffers)
                    raise
                side = result.actor
                done += chunk
                save_checkpoint(ckdir / f"ckpt_{side.env_steps:07d}.bin", state, buffers, side)
            episodes = side.episode_log if side is not None else []
    finally:
        sink.close()
    with open(run / "episodes.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=EPISODE_FIELDS, extrasaction="ignore", restval="")
        w.writeheader()
        w.writerows(episodes)
    save_snapshot(run / "actor_final.bin", state.actor, b"finetuned")
    print(f"{state.update_count} learner updates, {len(episodes)} episodes; artifacts in {run}")
    return 0


def cmd_eval(args) -> int:
    cfg, run = _start(args, "eval")
    params, _ = load_snapshot(_need(args.actor, "actor"))
    report = evaluate(params, _spec_for(params), cfg["eval.trials"], cfg["env.reset_mode"], cfg["eval.seed"],
                      C.env_config(cfg))
    summary = report.summary() | {"reset_mode": cfg["env.reset_mode"], "label": args.label or Path(args.actor).stem}
    (run / "eval.json").write_text(json.dumps(summary, indent=2) + "\n")
    with open(run / "eval_trials.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["trial", "success", "ct", "length"])
        w.writeheader()
        w.writerows(report.records)
    print(json.dumps(summary))
    return 0


def cmd_plot(args) -> int:
    from .plots import plot_eval_bars, plot_lambda_curve
    run = _run_dir(args.out, "plot")
    metrics = _need(args.metrics, "metrics")
    episodes = Path(args.episodes) if args.episodes else metrics.with_name("episodes.csv")
    files = [plot_lambda_curve(metrics, episodes if episodes.exists() else None, run / "lambda_sr.png")]
    if args.eval:
        files.append(plot_eval_bars([_need(p, "eval") for p in args.eval], run / "eval_bars.png"))
    for p in files:
        print(p)
    return 0


COMMANDS = {"gen-demos": cmd_gen_demos, "train-classifier": cmd_train_classifier, "pretrain": cmd_pretrain,
            "finetune": cmd_finetune, "eval": cmd_eval, "plot": cmd_plot}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="runs", help="parent directory for run directories")
    common.add_argument("--reset-mode", dest="reset_mode", choices=["fixed", "random"])
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="regrasp", description="BC pretraining and regularized RL fine-tuning on a planar grasp task")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-demos", parents=[common], help="record scripted-expert demos and failure rollouts")
    s = sub.add_parser("train-classifier", parents=[common], help="fit the success classifier")
    s.add_argument("--demos")
    s.add_argument("--failures")
    s = sub.add_parser("pretrain", parents=[common], help="behavior cloning")
    s.add_argument("--demos")
    s = sub.add_parser("finetune", parents=[common], help="RL fine-tuning from a pretrained actor")
    s.add_argument("--demos")
    s.add_argument("--actor", help="pretrained actor snapshot")
    s.add_argument("--classifier")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--mode", choices=["single", "distributed"])
    s.add_argument("--reward", choices=["oracle", "classifier"])
    s.add_argument("--objective", choices=["alg1", "eq2"])
    s.add_argument("--beta", type=float)
    s.add_argument("--env-steps", dest="env_steps", type=int)
    s = sub.add_parser("eval", parents=[common], help="deterministic rollouts of an actor snapshot")
    s.add_argument("--actor")
    s.add_argument("--trials", type=int)
    s.add_argument("--label")
    s = sub.add_parser("plot", parents=[common], help="charts from metrics CSV and eval reports")
    s.add_argument("--metrics")
    s.add_argument("--episodes")
    s.add_argument("--eval", nargs="*", help="eval.json files for the bar chart")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"regrasp: error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, C.ConfigError) as e:
        print(f"regrasp: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure: report and exit 2
        log.debug("command failed", exc_info=True)
        print(f"regrasp: {args.command} failed: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
