"""
Test the toy policy, optimizers, run configuration and the PeSFT -> PeRPO trainer
"""
import dataclasses
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codebook.parser import generate_codebook
from pipeline.config import ConfigError, TrainConfig, config_from_dict, load_train_config, save_train_config
from pipeline.main_pipeline import (
    ALL_GROUPS_DEGENERATE,
    EmptyBatch,
    ToyTrainingPipeline,
    build_policy,
    build_vocab,
    perpo_step,
    pesft_loss_and_grads,
    pesft_step,
    task_prompt,
)
from pipeline.optim import SGD, AdamW, clip_by_global_norm, make_optimizer
from pipeline.tasks import TASK_WORDS, annotate_task, gen_synth_tasks
from pipeline.toy_policy import (
    IMAGE_MODE,
    TEXT_MODE,
    ToyPolicy,
    ToyVocab,
    response_token_ids,
    top_p_support,
    trajectory_prompt_key,
)
from reward.objective import PerpoConfig
from utils.errors import EngineError

CB = generate_codebook(8, 4, seed=1)
VOCAB = ToyVocab(TASK_WORDS, 9, CB.k)
TASK = gen_synth_tasks(seed=3, n=1)[0]
TRAJ = annotate_task(TASK, CB, VOCAB, image_grid=2)
PKEY = trajectory_prompt_key(TRAJ)
TOKENS = response_token_ids(TRAJ, VOCAB)


def _small_cfg(**changes):
    values = dict(
        n_tasks=2, image_grid=2, codebook_k=8, codebook_d=4, pesft_steps=3, perpo_steps=2,
        group_size=4, eval_samples=2, max_new_tokens=32,
    )
    values.update(changes)
    return TrainConfig(**values)


def _random_policy(seed=0):
    """Policy with every context on the annotated trace materialized at random."""
    rng = np.random.default_rng(seed)
    policy = ToyPolicy(VOCAB, image_grid=2, hidden_dim=3, embed_dim=CB.d, seed=seed)
    for ctx, mode in policy.walk(PKEY, TOKENS):
        policy.set_param(("logit", ctx), rng.normal(0.0, 1.0, VOCAB.size))
        if mode == IMAGE_MODE:
            policy.set_param(("hidden", ctx), rng.normal(0.0, 1.0, 3))
    policy.set_param(("proj", ""), rng.normal(0.0, 1.0, (CB.d, 3)))
    return policy


def _numeric_grad(policy, key, f, eps=1e-6):
    base = np.array(policy.get_param(key), dtype=float)
    numeric = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        values = []
        for sign in (1, -1):
            trial = base.copy()
            trial[idx] += sign * eps
            policy.set_param(key, trial)
            values.append(f())
        numeric[idx] = (values[0] - values[1]) / (2 * eps)
    policy.set_param(key, base)
    return numeric


class _Store:
    def __init__(self, **params):
        self.params = {k: np.array(v, dtype=float) for k, v in params.items()}

    def get_param(self, key):
        return self.params[key]

    def set_param(self, key, value):
        self.params[key] = np.array(value, dtype=float)


# -- vocabulary and decoding grammar ------------------------------------------------

def test_vocab_layout():
    assert VOCAB.tokens[:4] == ["<eos>", "<img>", "<unk>", "<bos>"]
    assert VOCAB.is_code(VOCAB.code_token(0)) and not VOCAB.is_code(VOCAB.index["grid"])
    assert VOCAB.code_index(VOCAB.code_token(7)) == 7
    assert VOCAB.encode_text("Final Answer: 3") == [VOCAB.index["Final Answer:"], VOCAB.index["3"]]
    assert VOCAB.encode_text("purple") == [VOCAB.unk_id]
    with pytest.raises(EngineError):
        VOCAB.code_token(8)


def test_annotated_trace_is_legal():
    policy = ToyPolicy(VOCAB, image_grid=2)
    steps = policy.walk(PKEY, TOKENS)
    assert len(steps) == len(TOKENS)
    image_positions = [mode for _, mode in steps].count(IMAGE_MODE)
    assert image_positions == 4 * TRAJ.num_steps


def test_walk_rejects_illegal_tokens():
    policy = ToyPolicy(VOCAB, image_grid=2)
    with pytest.raises(EngineError):
        policy.walk(PKEY, [VOCAB.code_token(0)])
    with pytest.raises(EngineError):
        policy.walk(PKEY, [VOCAB.img_id, VOCAB.index["grid"]])
    with pytest.raises(EngineError):
        policy.walk(PKEY, [VOCAB.eos_id, VOCAB.index["grid"]])


def test_samples_follow_the_grammar():
    policy = _random_policy(1)
    rng = np.random.default_rng(0)
    for _ in range(50):
        tokens = policy.sample(PKEY, rng, temperature=1.0, top_p=0.95, max_new_tokens=12)
        policy.walk(PKEY, tokens)
        codes = sum(VOCAB.is_code(t) for t in tokens)
        # opened images always complete
        assert codes % policy.image_tokens == 0
        if tokens[-1] != VOCAB.eos_id:
            assert len(tokens) >= 12


def test_top_p_support():
    p = np.array([0.1, 0.6, 0.3])
    assert list(top_p_support(p, 1.0)) == [1, 2, 0]
    assert list(top_p_support(p, 0.95)) == [1, 2, 0]
    assert list(top_p_support(p, 0.7)) == [1, 2]
    assert list(top_p_support(p, 0.6)) == [1]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.3, 0.6, 0.95]))
def test_sampled_tokens_stay_in_top_p_support(seed, top_p):
    policy = _random_policy(1)
    tokens = policy.sample(PKEY, np.random.default_rng(seed), temperature=0.7, top_p=top_p, max_new_tokens=16)
    for (ctx, mode), token in zip(policy.walk(PKEY, tokens), tokens):
        _, p = policy.distribution(ctx, mode, 0.7)
        assert policy.position_of(mode, token) in set(top_p_support(p, top_p).tolist())


def test_snapshot_is_independent():
    policy = _random_policy(2)
    copy = policy.snapshot()
    ctx = policy.walk(PKEY, TOKENS)[0][0]
    copy.set_param(("logit", ctx), np.zeros(VOCAB.size))
    copy.set_param(("proj", ""), np.zeros((CB.d, 3)))
    assert policy.row(ctx).any()
    assert policy.proj.any()
    assert policy.to_table() != copy.to_table()


def test_set_param_rejects_non_finite():
    policy = ToyPolicy(VOCAB, image_grid=2)
    with pytest.raises(EngineError):
        policy.set_param(("logit", "x"), np.full(VOCAB.size, np.nan))


# -- gradients --------------------------------------------------------------------

@pytest.mark.parametrize("temperature", [1.0, 0.7])
def test_backprop_logits_matches_finite_differences(temperature):
    policy = _random_policy(3)
    rng = np.random.default_rng(4)
    c = rng.normal(size=len(TOKENS))
    e = rng.normal(size=len(TOKENS))

    def f():
        return float(
            np.dot(c, policy.token_logps(PKEY, TOKENS, temperature))
            + np.dot(e, policy.token_entropies(PKEY, TOKENS, temperature))
        )

    grads = policy.backprop_logits(PKEY, TOKENS, c, temperature, d_entropy=e)
    contexts = sorted({ctx for ctx, _ in policy.walk(PKEY, TOKENS)})
    for ctx in contexts[:4]:
        numeric = _numeric_grad(policy, ("logit", ctx), f)
        scale = max(np.max(np.abs(numeric)), 1e-8)
        assert np.max(np.abs(numeric - grads[("logit", ctx)])) / scale < 1e-5


def test_pesft_gradients_match_finite_differences():
    policy = _random_policy(5)
    batch = [TRAJ]
    losses, grads = pesft_loss_and_grads(policy, batch, CB, lambda_pe=0.5)
    assert losses["loss"] == pytest.approx(losses["ce"] + 0.5 * losses["pe"])

    def f():
        return pesft_loss_and_grads(policy, batch, CB, 0.5)[0]["loss"]

    hidden_keys = [k for k in grads if k[0] == "hidden"][:2]
    logit_keys = [k for k in grads if k[0] == "logit"][:2]
    assert hidden_keys and logit_keys
    for key in logit_keys + hidden_keys + [("proj", "")]:
        numeric = _numeric_grad(policy, key, f)
        scale = max(np.max(np.abs(numeric)), 1e-8)
        assert np.max(np.abs(numeric - grads[key])) / scale < 1e-5


def test_pesft_without_perception_term():
    policy = _random_policy(6)
    losses, grads = pesft_loss_and_grads(policy, [TRAJ], CB, lambda_pe=0.0)
    assert losses["loss"] == losses["ce"]
    # L_Pe is still reported
    assert losses["pe"] > 0
    assert all(kind == "logit" for kind, _ in grads)


def test_pesft_empty_batch():
    with pytest.raises(EmptyBatch):
        pesft_loss_and_grads(ToyPolicy(VOCAB, image_grid=2), [], CB, 1.0)


def test_pesft_step_descends():
    cfg = _small_cfg(optimizer="sgd", lr=0.05, warmup_steps=0, grad_clip=0.0)
    policy = _random_policy(7)
    before = pesft_loss_and_grads(policy, [TRAJ], CB, cfg.lambda_pe)[0]["loss"]
    _, report = pesft_step(policy, [TRAJ], cfg, CB)
    after = pesft_loss_and_grads(policy, [TRAJ], CB, cfg.lambda_pe)[0]["loss"]
    assert after < before
    assert report["loss"] == pytest.approx(before)
    assert report["lr"] == 0.05


# -- optimizers -------------------------------------------------------------------

def test_clip_by_global_norm():
    clipped, norm = clip_by_global_norm({"a": np.array([3.0]), "b": np.array([4.0])}, 1.0)
    assert norm == 5.0
    assert clipped["a"][0] == pytest.approx(0.6) and clipped["b"][0] == pytest.approx(0.8)
    same, _ = clip_by_global_norm({"a": np.array([0.1])}, 1.0)
    assert same["a"][0] == 0.1
    unclipped, _ = clip_by_global_norm({"a": np.array([30.0])}, 0.0)
    assert unclipped["a"][0] == 30.0


def test_sgd_warmup():
    store = _Store(w=[1.0])
    opt = SGD(lr=1.0, warmup_steps=4)
    assert opt.step(store, {"w": np.array([1.0])}) == 0.25
    assert store.params["w"][0] == 0.75
    for _ in range(4):
        opt.step(store, {})
    assert opt.current_lr() == 1.0


def test_adamw_first_step_is_sign_scaled():
    store = _Store(w=[1.0, 1.0], untouched=[5.0])
    opt = AdamW(lr=0.1)
    opt.step(store, {"w": np.array([2.0, -0.5])})
    np.testing.assert_allclose(store.params["w"], [0.9, 1.1], atol=1e-6)
    assert store.params["untouched"][0] == 5.0


def test_adamw_weight_decay_is_decoupled():
    store = _Store(w=[2.0])
    AdamW(lr=0.1, weight_decay=0.5).step(store, {"w": np.array([1e-12])})
    # the decay term shrinks the weight even though the gradient is ~0
    assert store.params["w"][0] < 2.0 - 0.1 * 0.5 * 2.0 + 1e-3


def test_make_optimizer():
    assert isinstance(make_optimizer(_small_cfg(optimizer="sgd")), SGD)
    assert isinstance(make_optimizer(_small_cfg()), AdamW)
    with pytest.raises(EngineError):
        make_optimizer(dataclasses.replace(_small_cfg(), optimizer="lion"))


# -- configuration ------------------------------------------------------------------

def test_repository_config_matches_defaults():
    assert load_train_config("config.yaml") == TrainConfig()


def test_config_overrides_and_round_trip(tmp_path):
    cfg = load_train_config("config.yaml", seed=11, mode="zero", tau=None)
    assert (cfg.seed, cfg.mode, cfg.tau) == (11, "zero", None)
    path = tmp_path / "run" / "config.yaml"
    save_train_config(cfg, str(path))
    assert load_train_config(str(path)) == cfg


@pytest.mark.parametrize("raw", [
    {"seeed": 7},
    {"mode": "both"},
    {"group_size": 1},
    {"top_p": 0.0},
    {"lambda_pe": -1.0},
    {"perpo": {"eps_low": 2.0}},
    {"perpo": {"clip": 0.2}},
    {"reward": {"alpha": 0.0, "beta": 0.0, "gamma": 0.0}},
    {"final_answer_marker": "  "},
    [1, 2],
])
def test_bad_configs(raw):
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_unparseable_config(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("seed: [7\n")
    with pytest.raises(ConfigError):
        load_train_config(str(path))


@pytest.mark.parametrize("text", ["- seed\n- 7\n", "7\n", "just a string\n"])
def test_config_must_be_a_mapping(tmp_path, text):
    path = tmp_path / "list.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_train_config(str(path))


# -- PeRPO ------------------------------------------------------------------------

def test_degenerate_step_leaves_policy_untouched():
    cfg = _small_cfg()
    cb = generate_codebook(cfg.codebook_k, cfg.codebook_d, cfg.seed)
    vocab = build_vocab(cfg)
    policy = build_policy(cfg, vocab)
    tasks = gen_synth_tasks(cfg.seed, 2)
    before = policy.to_table()
    _, report = perpo_step(policy, tasks, cfg, cb, policy.snapshot(), np.random.default_rng(0),
                           reward_fn=lambda task, t: 1.0)
    assert report["all_groups_degenerate"]
    assert report["error"] == ALL_GROUPS_DEGENERATE
    assert report["retained"] == 0.0
    assert policy.to_table() == before


def test_perpo_raises_rewarded_first_tokens():
    cfg = _small_cfg(
        group_size=8, top_p=1.0, max_new_tokens=4, optimizer="sgd", lr=0.5, warmup_steps=0,
        grad_clip=0.0, entropy_coef=0.0, perpo=PerpoConfig(beta_kl=0.0),
    )
    cb = generate_codebook(cfg.codebook_k, cfg.codebook_d, cfg.seed)
    vocab = build_vocab(cfg)
    policy = build_policy(cfg, vocab)
    task = gen_synth_tasks(cfg.seed, 1)[0]

    def even_first(task, t):
        return float(response_token_ids(t, vocab)[0] % 2 == 0)

    _, pkey = task_prompt(task, cb, cfg.image_grid)
    first_ctx = policy.context_key(pkey, policy.initial_state())

    def even_mass():
        allowed, p = policy.distribution(first_ctx, TEXT_MODE)
        return float(p[allowed % 2 == 0].sum())

    start = even_mass()
    rng = np.random.default_rng(0)
    ref = policy.snapshot()
    for _ in range(3):
        _, report = perpo_step(policy, [task], cfg, cb, ref, rng, reward_fn=even_first)
        assert 0.0 <= report["retained"] <= 1.0
    assert even_mass() > start


def test_perpo_needs_tasks():
    cfg = _small_cfg()
    policy = build_policy(cfg, build_vocab(cfg))
    with pytest.raises(EmptyBatch):
        perpo_step(policy, [], cfg, CB, policy, np.random.default_rng(0))


# -- pipeline ---------------------------------------------------------------------

def test_evaluation_is_repeatable():
    pipe = ToyTrainingPipeline(_small_cfg())
    assert pipe.evaluate() == pipe.evaluate()


@pytest.mark.parametrize("mode", ["omni", "zero"])
def test_small_run_writes_outputs(tmp_path, mode):
    pipe = ToyTrainingPipeline(_small_cfg(mode=mode))
    report = pipe.train(str(tmp_path))
    assert report["pesft_steps"] == 3 and report["perpo_steps"] == 2
    stages = [m["stage"] for m in report["metrics"]]
    assert stages == ["eval"] + ["pesft"] * 3 + ["perpo"] * 2 + ["eval"]
    for name in ("metrics.jsonl", "policy.json", "report.json"):
        assert (tmp_path / name).is_file()
    assert len((tmp_path / "metrics.jsonl").read_text().splitlines()) == len(report["metrics"])
    assert load_train_config(str(tmp_path / "config.yaml")) == pipe.cfg


def test_metrics_are_byte_identical_across_runs(tmp_path):
    for name in ("a", "b"):
        ToyTrainingPipeline(_small_cfg()).train(str(tmp_path / name))
    for name in ("metrics.jsonl", "policy.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


# -- full reproduction runs ---------------------------------------------------------

@pytest.mark.slow
def test_reproduction_run_learns_the_task():
    cfg = load_train_config("config.yaml")
    start = time.perf_counter()
    report = ToyTrainingPipeline(cfg).train()
    elapsed = time.perf_counter() - start

    assert report["initial_eval"]["acc"] < 0.3
    assert report["final_eval"]["acc"] >= 0.8
    assert report["final_eval"]["reward"] > report["initial_eval"]["reward"]
    perpo = [m["reward"] for m in report["metrics"] if m["stage"] == "perpo"]
    assert np.mean(perpo[-5:]) > np.mean(perpo[:5])
    assert elapsed < 60.0


@pytest.mark.slow
def test_perception_weight_ablation():
    cfg = load_train_config("config.yaml")
    full = ToyTrainingPipeline(cfg).train()
    ablated = ToyTrainingPipeline(dataclasses.replace(cfg, reward=dataclasses.replace(cfg.reward, gamma=0.0))).train()
    assert ablated["final_eval"]["pe"] < full["final_eval"]["pe"]
