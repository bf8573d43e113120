"""
Toy two-stage training pipeline: PeSFT on interleaved trajectories, then PeRPO
with the engine's composite reward.
"""

import json
import logging
import os
import time
from dataclasses import dataclass
from typing import List

import numpy as np

from codebook.parser import generate_codebook
from codebook.quantize import encode_image
from perception.loss import ProjectedStates, perception_loss, perception_loss_grad
from perception.tv import perception_reward
from pipeline.config import save_train_config
from pipeline.optim import clip_by_global_norm, make_optimizer
from pipeline.tasks import TASK_WORDS, annotate_task, bootstrap_stepwise, gen_synth_tasks, seed_cot
from pipeline.toy_policy import (
    IMAGE_MODE,
    ToyPolicy,
    ToyVocab,
    prompt_key,
    response_token_ids,
    trajectory_prompt_key,
)
from reward.advantage import RewardBreakdown, filter_degenerate, reward_breakdown
from reward.objective import (
    RolloutGroup,
    RolloutSample,
    perpo_objective,
    perpo_objective_grad,
    token_weights,
)
from trajectory.model import Trajectory, mask_from_lengths, prompt_token_count
from utils.errors import EngineError
from utils.loader import write_jsonl
from verifier.rules import accuracy_reward

logger = logging.getLogger(__name__)

ALL_GROUPS_DEGENERATE = "AllGroupsDegenerate"


class EmptyBatch(EngineError):
    pass


def build_vocab(cfg):
    return ToyVocab(TASK_WORDS, cfg.grid_size * cfg.grid_size, cfg.codebook_k, cfg.final_answer_marker)


def build_policy(cfg, vocab):
    return ToyPolicy(
        vocab,
        image_grid=cfg.image_grid,
        context_order=cfg.context_order,
        hidden_dim=cfg.hidden_dim,
        embed_dim=cfg.codebook_d,
        seed=cfg.seed,
    )


# ---------------------------------------------------------------------------
# PeSFT
# ---------------------------------------------------------------------------

def pesft_loss_and_grads(policy, batch, cb, lambda_pe):
    """
    L = L_CE + lambda * L_Pe and its gradients.

    L_CE is the mean over sequences of the mean token negative log-likelihood of
    the response; L_Pe aligns the hidden proxy of every response image-token
    position with the codebook row of its target code.

    Returns:
        (losses, grads): {'loss', 'ce', 'pe'} and a parameter-keyed gradient dict
    """
    if not batch:
        raise EmptyBatch("PeSFT needs at least one trajectory")

    grads = {}
    ce = 0.0
    contexts, hidden, targets = [], [], []
    n = len(batch)
    for t in batch:
        pkey = trajectory_prompt_key(t)
        tokens = response_token_ids(t, policy.vocab)
        if not tokens:
            raise EmptyBatch("trajectory has an empty response")
        length = len(tokens)
        ce -= float(np.sum(policy.token_logps(pkey, tokens))) / (length * n)
        policy.backprop_logits(pkey, tokens, np.full(length, -1.0 / (length * n)), grads=grads)

        for (ctx, mode), token in zip(policy.walk(pkey, tokens), tokens):
            if mode == IMAGE_MODE:
                contexts.append(ctx)
                hidden.append(policy.hidden_state(ctx))
                targets.append(policy.vocab.code_index(token))

    pe = 0.0
    if contexts:
        ps = ProjectedStates(hidden=np.stack(hidden), proj=policy.proj, targets=np.array(targets))
        pe = perception_loss(ps, cb)
        if lambda_pe > 0:
            g_proj, g_hidden = perception_loss_grad(ps, cb)
            grads[("proj", "")] = lambda_pe * g_proj
            for ctx, g in zip(contexts, g_hidden):
                key = ("hidden", ctx)
                grads[key] = grads[key] + lambda_pe * g if key in grads else lambda_pe * g

    return {"loss": ce + lambda_pe * pe, "ce": ce, "pe": pe}, grads


def pesft_step(policy, batch, cfg, cb, optimizer=None):
    """
    One PeSFT descent step with global-norm gradient clipping.

    Args:
        policy: ToyPolicy (updated in place)
        batch: Non-empty list of Trajectory
        cfg: TrainConfig
        cb: Codebook
        optimizer: Optimizer carrying state across steps (fresh one if None)

    Returns:
        (policy, report): report has loss, ce, pe, grad_norm, lr
    """
    losses, grads = pesft_loss_and_grads(policy, batch, cb, cfg.lambda_pe)
    grads, norm = clip_by_global_norm(grads, cfg.grad_clip)
    optimizer = optimizer or make_optimizer(cfg)
    lr = optimizer.step(policy, grads)
    return policy, {**losses, "grad_norm": norm, "lr": lr}


# ---------------------------------------------------------------------------
# PeRPO
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Rollout:
    pkey: str
    tokens: List[int]
    prompt_len: int
    trajectory: Trajectory
    reward: RewardBreakdown


def task_prompt(task, cb, image_grid):
    image = encode_image(task.init_image, cb, image_grid)
    return image, prompt_key(task.question, image)


def rollout_trajectory(task, policy, tokens, prompt_image):
    return Trajectory(
        prompt_text=task.question,
        segments=tuple(policy.to_segments(tokens)),
        prompt_image=prompt_image,
        ground_truth=task.gold,
        meta={"task_id": task.task_id},
    )


def score_rollout(task, t, cb, cfg):
    """Composite reward of one rollout from the verifier and the perception reward."""
    verdict = accuracy_reward(task.gold, t, marker=cfg.final_answer_marker)
    pe = perception_reward(t, cb, cfg.perception)
    return reward_breakdown(verdict.r_acc, verdict.r_fmt, pe, cfg.reward)


def _as_breakdown(value):
    if isinstance(value, RewardBreakdown):
        return value
    return RewardBreakdown(acc=0.0, fmt=0.0, pe=0.0, total=float(value))


def sample_rollouts(policy, task, cfg, cb, rng, n, reward_fn=None):
    prompt_image, pkey = task_prompt(task, cb, cfg.image_grid)
    rollouts = []
    for _ in range(n):
        tokens = policy.sample(pkey, rng, cfg.temperature, cfg.top_p, cfg.max_new_tokens)
        t = rollout_trajectory(task, policy, tokens, prompt_image)
        reward = reward_fn(task, t) if reward_fn is not None else score_rollout(task, t, cb, cfg)
        rollouts.append(Rollout(pkey, tokens, prompt_token_count(t), t, _as_breakdown(reward)))
    return rollouts


def _padded_logps(policy, r, temperature):
    return np.concatenate([np.zeros(r.prompt_len), policy.token_logps(r.pkey, r.tokens, temperature)])


def _mean_rewards(rollouts):
    return {
        "reward": float(np.mean([r.reward.total for r in rollouts])),
        "acc": float(np.mean([r.reward.acc for r in rollouts])),
        "fmt": float(np.mean([r.reward.fmt for r in rollouts])),
        "pe": float(np.mean([r.reward.pe for r in rollouts])),
    }


def perpo_step(policy, tasks, cfg, cb, ref_policy, rng, optimizer=None, reward_fn=None):
    """
    One PeRPO step: sample |G| rollouts per task from a frozen copy of the
    current policy, keep mixed-outcome groups, and ascend the clipped objective
    (plus the optional entropy bonus) for cfg.ppo_epochs updates.

    Args:
        policy: ToyPolicy (updated in place)
        tasks: Non-empty list of SynthTask
        cfg: TrainConfig
        cb: Codebook
        ref_policy: Frozen reference policy for the KL term
        rng: numpy Generator used for sampling
        optimizer: Optimizer carrying state across steps (fresh one if None)
        reward_fn: Optional (task, trajectory) -> RewardBreakdown | float override

    Returns:
        (policy, report): mean reward components, retained fraction, objective;
            all_groups_degenerate is set when nothing was left to optimize
    """
    if not tasks:
        raise EmptyBatch("PeRPO needs at least one task")

    old = policy.snapshot()
    T = cfg.temperature
    pairs = []
    every = []
    for task in tasks:
        rollouts = sample_rollouts(old, task, cfg, cb, rng, cfg.group_size, reward_fn)
        every.extend(rollouts)
        samples = []
        for r in rollouts:
            logp_old = _padded_logps(old, r, T)
            samples.append(
                RolloutSample(
                    reward=r.reward.total,
                    logp_old=logp_old,
                    logp_ref=_padded_logps(ref_policy, r, T),
                    logp_cur=logp_old,
                    mask=mask_from_lengths(logp_old.size, r.prompt_len),
                    trajectory=r.trajectory,
                )
            )
        pairs.append((RolloutGroup(task.task_id, tuple(samples)), rollouts))

    kept_ids = {id(g) for g in filter_degenerate([g for g, _ in pairs])}
    kept = [(g, rs) for g, rs in pairs if id(g) in kept_ids]
    report = {
        **_mean_rewards(every),
        "retained": len(kept) / len(pairs),
        "objective": 0.0,
        "entropy": 0.0,
        "grad_norm": 0.0,
        "all_groups_degenerate": not kept,
    }
    if not kept:
        report["error"] = ALL_GROUPS_DEGENERATE
        logger.info("All rollout groups degenerate; PeRPO step skipped")
        return policy, report

    optimizer = optimizer or make_optimizer(cfg)
    for _ in range(cfg.ppo_epochs):
        groups = [
            RolloutGroup(g.prompt_id, tuple(s.with_logp_cur(_padded_logps(policy, r, T)) for s, r in zip(g.samples, rs)))
            for g, rs in kept
        ]
        objective = perpo_objective(groups, cfg.perpo)
        d_objective = perpo_objective_grad(groups, cfg.perpo)

        grads = {}
        entropy = 0.0
        for g_idx, (weights, (_, rs)) in enumerate(zip(token_weights(groups), kept)):
            for s_idx, (w, r) in enumerate(zip(weights, rs)):
                w_resp = w[r.prompt_len:]
                ent = policy.token_entropies(r.pkey, r.tokens, T)
                entropy += float(np.sum(w_resp * ent))
                d_logp = d_objective[g_idx][s_idx][r.prompt_len:]
                # the optimizer descends, so pass the negated ascent direction
                policy.backprop_logits(
                    r.pkey,
                    r.tokens,
                    -d_logp,
                    T,
                    d_entropy=-cfg.entropy_coef * w_resp if cfg.entropy_coef else None,
                    grads=grads,
                )
        grads, norm = clip_by_global_norm(grads, cfg.grad_clip)
        optimizer.step(policy, grads)
        report.update(objective=objective + cfg.entropy_coef * entropy, entropy=entropy, grad_norm=norm)

    return policy, report


def evaluate_policy(policy, tasks, cfg, cb, rng, samples=None):
    """Mean composite reward and components over fresh rollouts of every task."""
    rollouts = []
    for task in tasks:
        rollouts.extend(sample_rollouts(policy, task, cfg, cb, rng, samples or cfg.eval_samples))
    return _mean_rewards(rollouts)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

class ToyTrainingPipeline:
    """
    Complete toy PeSFT -> PeRPO run.
    """

    def __init__(self, cfg):
        logger.info(f"Initializing toy pipeline (mode={cfg.mode}, seed={cfg.seed})")
        self.cfg = cfg
        self.cb = generate_codebook(cfg.codebook_k, cfg.codebook_d, cfg.seed)
        self.vocab = build_vocab(cfg)
        self.tasks = gen_synth_tasks(cfg.seed, cfg.n_tasks, cfg.grid_size, cfg.image_size)
        self.policy = build_policy(cfg, self.vocab)
        self.ref_policy = None

        seeds = np.random.SeedSequence(cfg.seed).spawn(2)
        self.rollout_rng = np.random.default_rng(seeds[0])
        self.eval_seed = seeds[1]

        self.stats = {
            'pesft_steps': 0,
            'perpo_steps': 0,
            'degenerate_steps': 0,
            'total_time': 0.0,
        }

    def build_dataset(self):
        """Annotated traces (omni) or bootstrapped text-only CoT (zero)."""
        cfg = self.cfg
        if cfg.mode == "omni":
            return [annotate_task(task, self.cb, self.vocab, cfg.image_grid, cfg.final_answer_marker) for task in self.tasks]
        return [
            bootstrap_stepwise(seed_cot(task), task, self.cb, self.vocab, cfg.image_grid, cfg.final_answer_marker)
            for task in self.tasks
        ]

    def evaluate(self):
        # same draws for every evaluation, so initial and final are comparable
        rng = np.random.default_rng(self.eval_seed)
        return evaluate_policy(self.policy, self.tasks, self.cfg, self.cb, rng)

    def train(self, output_dir=None):
        """
        Run PeSFT then PeRPO.

        Args:
            output_dir: If given, writes metrics.jsonl, policy.json and report.json

        Returns:
            report: Run summary including the per-step metrics
        """
        cfg = self.cfg
        start_time = time.time()
        metrics = []

        initial_eval = self.evaluate()
        metrics.append({"stage": "eval", "phase": "initial", **initial_eval})
        logger.info(f"Initial eval: reward={initial_eval['reward']:.4f} acc={initial_eval['acc']:.4f}")

        # Stage 1: PeSFT
        t0 = time.time()
        dataset = self.build_dataset() if cfg.pesft_steps else []
        optimizer = make_optimizer(cfg)
        for step in range(cfg.pesft_steps):
            _, rep = pesft_step(self.policy, dataset, cfg, self.cb, optimizer)
            metrics.append({"stage": "pesft", "step": step, **rep})
            self.stats['pesft_steps'] += 1
            logger.info(f"PeSFT {step + 1}/{cfg.pesft_steps}: loss={rep['loss']:.4f} ce={rep['ce']:.4f} pe={rep['pe']:.4f}")
        logger.info(f"PeSFT finished in {time.time() - t0:.2f}s")

        # Stage 2: PeRPO against a frozen reference
        t0 = time.time()
        self.ref_policy = self.policy.snapshot()
        optimizer = make_optimizer(cfg)
        for step in range(cfg.perpo_steps):
            _, rep = perpo_step(self.policy, self.tasks, cfg, self.cb, self.ref_policy, self.rollout_rng, optimizer)
            metrics.append({"stage": "perpo", "step": step, **rep})
            self.stats['perpo_steps'] += 1
            if rep["all_groups_degenerate"]:
                self.stats['degenerate_steps'] += 1
            logger.info(
                f"PeRPO {step + 1}/{cfg.perpo_steps}: reward={rep['reward']:.4f} acc={rep['acc']:.4f} "
                f"pe={rep['pe']:.4f} retained={rep['retained']:.2f}"
            )
        logger.info(f"PeRPO finished in {time.time() - t0:.2f}s")

        final_eval = self.evaluate()
        metrics.append({"stage": "eval", "phase": "final", **final_eval})
        self.stats['total_time'] += time.time() - start_time

        report = {
            "config": cfg.to_dict(),
            "initial_eval": initial_eval,
            "final_eval": final_eval,
            "pesft_steps": cfg.pesft_steps,
            "perpo_steps": cfg.perpo_steps,
            "degenerate_steps": self.stats['degenerate_steps'],
            "metrics": metrics,
        }
        if output_dir:
            self._save_outputs(report, output_dir)
        return report

    def _save_outputs(self, report, output_dir):
        """Write the metrics log, policy snapshot, resolved config and run summary."""
        os.makedirs(output_dir, exist_ok=True)
        write_jsonl(os.path.join(output_dir, "metrics.jsonl"), report["metrics"])
        with open(os.path.join(output_dir, "policy.json"), "w", encoding="utf-8", newline="\n") as f:
            json.dump(self.policy.to_table(), f, sort_keys=True, indent=0)
            f.write("\n")
        save_train_config(self.cfg, os.path.join(output_dir, "config.yaml"))
        summary = {k: v for k, v in report.items() if k != "metrics"}
        with open(os.path.join(output_dir, "report.json"), "w", encoding="utf-8", newline="\n") as f:
            json.dump(summary, f, sort_keys=True, indent=2)
            f.write("\n")
        logger.info(f"Saved metrics, policy, config and report to {output_dir}")

    def print_results(self, report):
        """Print run results in readable format."""
        print("=" * 60)
        print("TOY TRAINING RESULTS")
        print("=" * 60)

        print(f"\nMode: {self.cfg.mode}   Seed: {self.cfg.seed}   Tasks: {len(self.tasks)}")
        print(f"Steps: PeSFT {report['pesft_steps']}, PeRPO {report['perpo_steps']} "
              f"({report['degenerate_steps']} degenerate)")

        print("\nEvaluation (initial -> final):")
        for key, label in (("reward", "Reward"), ("acc", "R_Acc"), ("fmt", "R_Fmt"), ("pe", "R_Pe")):
            print(f"  {label:8s} {report['initial_eval'][key]:7.4f} -> {report['final_eval'][key]:7.4f}")

        print(f"\nTotal time: {self.stats['total_time']:.2f} s")
        print("=" * 60)
