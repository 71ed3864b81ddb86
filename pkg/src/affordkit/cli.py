"""Command-line surface: gen-data, train, eval, tune, serve, render-heatmap."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import adaptation as adp
from . import dataset as ds
from . import grounding as gr
from . import harness as hz
from . import policy as pol
from . import worldsim as ws


def _add_common(parser):
    parser.add_argument("--config", type=Path, default=None,
                        help="run config JSON; omitted = built-in desk-scale config")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, required=True,
                        help="output directory")


def _load(args):
    config = (hz.load_config(args.config) if args.config
              else hz.validate_config(hz.default_config()))
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "resolved_config.json", "w") as f:
        json.dump(config, f, indent=1, sort_keys=True)
    return config


def cmd_gen_data(args):
    config = _load(args)
    manifest = hz.gen_data(config, args.seed, args.out)
    print(f"wrote {manifest['count']} episodes to {args.out}")


def cmd_train(args):
    config = _load(args)
    config["train"]["seed"] = args.seed
    ckpt = args.out / "policy.ckpt"
    _, losses = hz.run_training(args.dataset, config, ckpt)
    np.asarray(losses, dtype="<f8").tofile(args.out / "loss_curve.f64")
    print(f"trained {len(losses)} batches; final loss {losses[-1]:.4f}; "
          f"checkpoint {ckpt}")


def cmd_eval(args):
    config = _load(args)
    policy = hz.load_checkpoint(args.checkpoint, config)
    seeds = [args.seed + i for i in range(config["eval"]["seeds_per_task"])]
    for suite in (hz.EVAL_SUITES if args.suite == "all" else [args.suite]):
        report = hz.run_eval(policy, suite, config, seeds=seeds,
                             report_dir=args.out)
        print(hz.format_report(report))


def cmd_tune(args):
    config = _load(args)
    policy = hz.load_checkpoint(args.checkpoint, config)
    vocab = hz.vocabulary_from_config(config)
    t, d = config["tune"], config["data"]
    demos = []
    attempts = 0
    zero = gr.TaskRepresentation.zeros(config["vocabulary"]["m"])
    while len(demos) < t["n_demos"] and attempts < 4 * t["n_demos"]:
        traj, states = ws.run_expert_episode(args.template, args.seed + attempts)
        attempts += 1
        if not ws.evaluate_success(traj.task, traj):
            continue
        demos.append(ds.build_episode(
            traj, states, zero, vocab, n_grounded=d["n_grounded_points"],
            n_current=d["n_current_points"], noise_sigma=d["noise_sigma"],
            seed=args.seed + attempts - 1))
    result = adp.heatmap_tune(
        policy, demos, adp.TuningConfig(lr=t["lr"], steps=t["steps"],
                                        init=t["init"], seed=args.seed))
    result.vector.astype("<f8").tofile(args.out / "tuned_representation.f64")
    summary = {
        "template": args.template, "n_demos": len(demos),
        "best_loss": result.best_loss, "best_step": result.best_step,
        "losses": result.losses,
    }
    with open(args.out / "tune_report.json", "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
    print(f"tuned on {len(demos)} demos; best loss {result.best_loss:.4f} "
          f"at step {result.best_step}")


def cmd_serve(args):
    config = _load(args)
    from . import service

    service.serve(args.checkpoint, config, host=args.host, port=args.port)


def cmd_render_heatmap(args):
    config = _load(args)
    written = hz.render_heatmap_images(config, args.template, args.seed,
                                       args.instruction, args.out)
    for key, path in sorted(written.items()):
        print(f"{key}: {path}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="affordkit",
        description="affordance-grounded visuomotor control toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a scripted-expert dataset")
    _add_common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train the diffusion policy")
    _add_common(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="run an evaluation suite")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--suite", choices=list(hz.EVAL_SUITES) + ["all"],
                   default="language")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("tune", help="few-shot heatmap tuning from expert demos")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--template", default="pick_place")
    p.set_defaults(fn=cmd_tune)

    p = sub.add_parser("serve", help="run the JSON-over-HTTP control service")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8731)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("render-heatmap",
                       help="write per-channel heatmap images for one scene")
    _add_common(p)
    p.add_argument("--template", default="pick_place")
    p.add_argument("--instruction", default=None,
                   help="defaults to the scene's ground-truth instruction")
    p.set_defaults(fn=cmd_render_heatmap)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (hz.HarnessError, ds.DatasetError, pol.PolicyError,
            adp.AdaptationError, ws.WorldError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
