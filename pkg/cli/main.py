"""
omni-engine command line.

Subcommands stream JSONL in and out; every record carries the 1-based input
line it came from. Exit status: 0 when every record succeeded, 1 on input
errors (bad flags, bad records, unreadable files), 2 on internal errors.

Input schemas:
    trajectories  {"prompt_text": str, "prompt_image"?: {"indices", "grid_h", "grid_w"},
                   "segments": [{"type": "text", "content": str, "token_ids"?: [int]} |
                                {"type": "image_tokens", "indices": [int], "grid_h": int, "grid_w": int}],
                   "ground_truth"?: str, "meta"?: {str: str}}
    groups        {"prompt_id": str, "samples": [{"reward": float, "logp_old"?: [float],
                   "logp_ref"?: [float], "logp_cur"?: [float], "mask"?: [0|1]}]}
    cot           {"steps": [str, ...]} (one seed chain of thought per synthetic task)
"""

import argparse
import json
import logging
import os
import sys

from codebook.parser import generate_codebook, read_codebook, save_codebook
from perception.tv import calibrate_tau, score_trajectory
from pipeline.config import TrainConfig, config_from_dict, load_train_config
from pipeline.main_pipeline import ToyTrainingPipeline
from pipeline.tasks import TASK_WORDS, bootstrap_stepwise, seed_cot, synth_task
from pipeline.toy_policy import ToyVocab
from render.actions import format_action, parse_action
from render.executor import RenderAborted, run_trajectory_render
from reward.advantage import group_advantages, is_degenerate
from reward.objective import PerpoConfig, perpo_objective, rollout_group_from_dict
from trajectory.model import FINAL_ANSWER_MARKER, parse_trajectory, serialize_trajectory
from utils.errors import EngineError, MalformedJson
from utils.loader import decode_line, dumps_record, iter_lines, load_image, ordered_map, save_image
from verifier.judge import build_judge_prompt, render_judge_prompt
from verifier.rules import accuracy_reward

logger = logging.getLogger("omni_engine")

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class UsageError(EngineError):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage problems as input errors and takes no flag prefixes."""

    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _emit(record, fmt):
    if fmt == "text":
        print(" ".join(f"{k}={v}" for k, v in sorted(record.items())), flush=True)
    else:
        print(dumps_record(record), flush=True)


def _failure(lineno, e):
    return {"line": lineno, "error": type(e).__name__, "message": str(e)}


def _stream(args, work, lines, with_line=True):
    """
    Run work(line) over (lineno, line) pairs with the ordered worker pool and
    emit one record per line. Input errors become error records; successful
    records carry their line number unless with_line is False.

    Returns:
        failed: Line numbers of records that failed
    """
    def guarded(item):
        lineno, line = item
        try:
            return lineno, None, work(line)
        except EngineError as e:
            return lineno, e, None

    failed = []
    for lineno, error, record in ordered_map(guarded, lines, args.workers):
        if error is not None:
            failed.append(lineno)
            record = _failure(lineno, error)
        elif with_line:
            record = {"line": lineno, **record}
        _emit(record, args.format)
    return failed


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_score(args):
    cb = read_codebook(args.codebook)
    tau = args.tau if args.tau is not None else calibrate_tau(cb)
    logger.info(f"Scoring with K={cb.k}, D={cb.d}, tau={tau:.6g}")

    def work(raw):
        return score_trajectory(parse_trajectory(decode_line(raw)), cb, tau)

    return _stream(args, work, iter_lines(args.trajectories))


def cmd_verify(args):
    options = [o.strip() for o in args.options.split(",")] if args.options else None

    def work(raw):
        t = parse_trajectory(decode_line(raw))
        gold = args.gold if args.gold is not None else t.ground_truth
        return accuracy_reward(gold, t, options=options, marker=args.marker).to_dict()

    return _stream(args, work, iter_lines(args.trajectories))


def cmd_advantage(args):
    cfg = PerpoConfig(eps_low=args.eps_low, eps_high=args.eps_high, beta_kl=args.kl, delta=args.delta)

    def work(raw):
        try:
            record = json.loads(decode_line(raw))
        except json.JSONDecodeError as e:
            raise MalformedJson(f"invalid JSON ({e.msg})") from e
        group = rollout_group_from_dict(record)
        out = {
            "prompt_id": group.prompt_id,
            "advantages": group_advantages(group.rewards, cfg.delta).tolist(),
            "degenerate": is_degenerate(group.rewards),
            "objective": None,
        }
        # J needs per-token log-probs; reward-only groups report advantages alone
        if all(s.response_length > 0 for s in group.samples):
            out["objective"] = perpo_objective([group], cfg)
        return out

    return _stream(args, work, iter_lines(args.input))


def cmd_render(args):
    image = load_image(args.image)
    actions = []
    failed = []
    for lineno, raw in iter_lines(args.actions):
        try:
            line = decode_line(raw)
            if line.lstrip().startswith("#"):
                continue
            actions.append(parse_action(line))
        except EngineError as e:
            _emit(_failure(lineno, e), args.format)
            failed.append(lineno)
    if failed:
        return failed

    try:
        frames = run_trajectory_render(image, actions)
    except RenderAborted as e:
        frames = e.prefix
        failed.append(e.index + 1)
        _emit({"step": e.index + 1, "error": type(e.cause).__name__, "message": str(e.cause)}, args.format)

    for step, (action, frame) in enumerate(zip(actions, frames), start=1):
        path = os.path.join(args.out_dir, f"rat_{step}.png")
        save_image(frame, path)
        _emit({"step": step, "action": format_action(action), "path": path}, args.format)
    return failed


def cmd_bootstrap(args):
    cb = read_codebook(args.codebook) if args.codebook else generate_codebook(args.k, args.d, args.seed)
    vocab = ToyVocab(TASK_WORDS, args.grid_size * args.grid_size, cb.k, args.marker)

    def lift(i, steps):
        task = synth_task(args.seed, i, args.grid_size, args.image_size)
        t = bootstrap_stepwise(steps if steps is not None else seed_cot(task), task, cb, vocab, args.image_grid, args.marker)
        return json.loads(serialize_trajectory(t))

    if args.cot:
        def work(item):
            i, raw = item
            try:
                record = json.loads(decode_line(raw))
            except json.JSONDecodeError as e:
                raise MalformedJson(f"invalid JSON ({e.msg})") from e
            steps = record.get("steps") if isinstance(record, dict) else None
            if not isinstance(steps, list) or not all(isinstance(s, str) for s in steps):
                raise EngineError("cot record needs a steps array of strings")
            return lift(i, steps)

        lines = ((lineno, (i, raw)) for i, (lineno, raw) in enumerate(iter_lines(args.cot)))
    else:
        def work(i):
            return lift(i, None)

        lines = ((i + 1, i) for i in range(args.n))

    return _stream(args, work, lines, with_line=False)


def cmd_train_toy(args):
    overrides = {
        "seed": args.seed,
        "mode": args.mode,
        "pesft_steps": args.pesft_steps,
        "perpo_steps": args.perpo_steps,
    }
    if args.config:
        cfg = load_train_config(args.config, **overrides)
    else:
        cfg = config_from_dict({k: v for k, v in overrides.items() if v is not None})
    if args.gamma is not None:
        raw = cfg.to_dict()
        raw["reward"]["gamma"] = args.gamma
        cfg = config_from_dict(raw)

    pipeline = ToyTrainingPipeline(cfg)
    report = pipeline.train(output_dir=args.out_dir)
    if args.format == "text":
        pipeline.print_results(report)
    else:
        summary = {k: v for k, v in report.items() if k not in ("metrics", "config")}
        print(dumps_record(summary), flush=True)
    return []


def cmd_codebook_gen(args):
    cb = generate_codebook(args.k, args.d, args.seed)
    save_codebook(cb, args.out)
    _emit({"k": cb.k, "d": cb.d, "seed": args.seed, "fingerprint": cb.fingerprint, "path": args.out}, args.format)
    return []


def cmd_judge_prompt(args):
    options = [o.strip() for o in args.options.split(",")] if args.options else None
    if args.format == "text":
        print(render_judge_prompt(args.gold, args.answer, options), flush=True)
    else:
        print(dumps_record(build_judge_prompt(args.gold, args.answer, options)), flush=True)
    return []


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = _Parser(
        prog="omni_engine",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging (overrides LOG_LEVEL)")
    parser.add_argument("--format", choices=("json", "text"), default="json", help="output format")
    parser.add_argument("--workers", type=int, default=None, help="worker threads (capped by OMNI_ENGINE_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("score", help="perception reward per trajectory")
    p.add_argument("--codebook", required=True, help="binary codebook file")
    p.add_argument("--tau", type=float, default=None, help="TV sensitivity (default: calibrated)")
    p.add_argument("--trajectories", required=True, help="trajectories JSONL, or - for stdin")
    p.set_defaults(handler=cmd_score)

    p = sub.add_parser("verify", help="accuracy and format rewards per trajectory")
    p.add_argument("--gold", default=None, help="gold answer (default: each record's ground_truth)")
    p.add_argument("--trajectories", required=True, help="trajectories JSONL, or - for stdin")
    p.add_argument("--options", default=None, help="comma-separated multiple-choice options")
    p.add_argument("--marker", default=FINAL_ANSWER_MARKER, help="final-answer marker")
    p.set_defaults(handler=cmd_verify)

    defaults = PerpoConfig()
    p = sub.add_parser("advantage", help="group advantages and objective per rollout group")
    p.add_argument("--in", dest="input", required=True, help="groups JSONL, or - for stdin")
    p.add_argument("--eps-low", type=float, default=defaults.eps_low, help="PPO clip range, lower")
    p.add_argument("--eps-high", type=float, default=defaults.eps_high, help="PPO clip range, upper")
    p.add_argument("--kl", type=float, default=defaults.beta_kl, help="KL loss coefficient")
    p.add_argument("--delta", type=float, default=defaults.delta, help="advantage stabilizer")
    p.set_defaults(handler=cmd_advantage)

    p = sub.add_parser("render", help="execute visual actions on an image")
    p.add_argument("--image", required=True, help="input PNG")
    p.add_argument("--actions", required=True, help="one action per line (# comments allowed)")
    p.add_argument("--out-dir", required=True, help="directory for rat_1.png .. rat_L.png")
    p.set_defaults(handler=cmd_render)

    train_defaults = TrainConfig()
    p = sub.add_parser("bootstrap", help="lift text-only CoT into interleaved trajectories")
    p.add_argument("--seed", type=int, required=True, help="synthetic task seed")
    p.add_argument("--n", type=int, default=train_defaults.n_tasks, help="tasks when --cot is not given")
    p.add_argument("--cot", default=None, help="cot JSONL; line i is lifted against task i")
    p.add_argument("--codebook", default=None, help="binary codebook (default: generated from --seed)")
    p.add_argument("--k", type=int, default=train_defaults.codebook_k, help="generated codebook rows")
    p.add_argument("--d", type=int, default=train_defaults.codebook_d, help="generated codebook dims")
    p.add_argument("--grid-size", type=int, default=train_defaults.grid_size, help="task grid side")
    p.add_argument("--image-size", type=int, default=train_defaults.image_size, help="task image side in pixels")
    p.add_argument("--image-grid", type=int, default=train_defaults.image_grid, help="image-token grid side")
    p.add_argument("--marker", default=FINAL_ANSWER_MARKER, help="final-answer marker")
    p.set_defaults(handler=cmd_bootstrap)

    p = sub.add_parser("train-toy", help="toy PeSFT -> PeRPO run")
    p.add_argument("--config", default=None, help="YAML or JSON run config")
    p.add_argument("--seed", type=int, required=True, help="run seed")
    p.add_argument("--out-dir", default=None, help="writes metrics.jsonl, policy.json, config.yaml, report.json")
    p.add_argument("--mode", choices=("omni", "zero"), default=None, help="training data mode")
    p.add_argument("--pesft-steps", type=int, default=None)
    p.add_argument("--perpo-steps", type=int, default=None)
    p.add_argument("--gamma", type=float, default=None, help="perception reward weight")
    p.set_defaults(handler=cmd_train_toy)

    p = sub.add_parser("codebook-gen", help="reproducible random codebook")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output codebook file")
    p.set_defaults(handler=cmd_codebook_gen)

    p = sub.add_parser("judge-prompt", help="fill the LLM-judge template")
    p.add_argument("--gold", required=True)
    p.add_argument("--answer", required=True)
    p.add_argument("--options", default=None, help="comma-separated multiple-choice options")
    p.set_defaults(handler=cmd_judge_prompt)

    return parser


def configure_logging(verbose=False):
    level = logging.DEBUG if verbose else os.environ.get("LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def main(argv=None):
    """
    Dispatch one invocation.

    Returns:
        exit_code: 0 ok, 1 input error, 2 internal error
    """
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1

    try:
        configure_logging(args.verbose)
    except ValueError as e:
        print(f"error: bad LOG_LEVEL: {e}", file=sys.stderr)
        return 1

    try:
        failed = args.handler(args)
    except (EngineError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        logger.error(f"Internal error in {args.command}: {e}", exc_info=True)
        print(f"error: internal: {type(e).__name__}: {e}", file=sys.stderr)
        return 2

    if failed:
        print(f"error: {len(failed)} record(s) failed at lines {', '.join(map(str, failed))}", file=sys.stderr)
        return 1
    return 0
