from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lmfuzz import lm, rl
from lmfuzz.corpus import BOS, EOS, PAD, UNK, parse_groups, tokenize, vocab
from lmfuzz.coverage import CoverageStats
from lmfuzz.isa import Instruction, operand_fields

V = vocab()
CFG = lm.LmConfig(vocab_size=len(V), context_len=24, layers=1, heads=2, model_dim=16, ff_dim=32, seed=3)


def _params():
    return lm.init(CFG)


# -- disassembler reward -------------------------------------------------------------

GOOD = Instruction("ADDI", rd=1, rs1=0, imm=5)
BAD = [V["ADD"], V["x1"]]  # a slot with a missing operand


def _completion(valid, invalid):
    ids = []
    for i in range(valid + invalid):
        ids += tokenize([GOOD], bos=False, eos=False) if i < valid else BAD
    return ids + [EOS]


# (N, Invalid, reward) by substitution
TABLE = [
    (10, 0, 10), (10, 2, 0), (4, 4, -16), (0, 0, 0), (1, 0, 1), (1, 1, -4), (2, 1, -3),
    (3, 0, 3), (3, 3, -12), (5, 1, 0), (6, 1, 1), (7, 2, -3), (8, 0, 8), (9, 9, -36),
    (12, 3, -3), (15, 3, 0), (16, 3, 1), (20, 4, 0), (25, 5, 0), (32, 0, 32), (32, 1, 27),
    (32, 32, -128),
]


@pytest.mark.parametrize("n,invalid,reward", TABLE)
def test_disasm_reward_table(n, invalid, reward):
    g = rl.gen_text([BOS], _completion(n - invalid, invalid))
    assert (g.N, g.Invalid) == (n, invalid)
    assert rl.disasm_reward(g) == reward


def test_gen_text_invariants():
    with pytest.raises(ValueError):
        rl.GenText((), (), (), 1, 2)
    g = rl.gen_text([BOS], [V["x3"], V["IMM_1"], EOS])  # orphan operands form one slot
    assert (g.N, g.Invalid) == (1, 1)


@given(st.integers(0, 40), st.integers(0, 40))
def test_disasm_reward_is_pure_in_n_and_invalid(valid, invalid):
    g = rl.GenText((), (), (), valid + invalid, invalid)
    assert rl.disasm_reward(g) == valid + invalid - 5 * invalid
    assert rl.disasm_reward(g) == rl.disasm_reward(replace(g, prompt=(1, 2)))


# -- coverage reward -------------------------------------------------------------------

def test_coverage_reward_examples():
    w = rl.ScoreWeights(1, 10, 1)
    assert rl.coverage_reward(CoverageStats(10, 2, 0), 200, w) == pytest.approx(20.05)
    assert rl.coverage_reward(CoverageStats(0, 0, 0), 200, w) == -1
    assert rl.coverage_reward(CoverageStats(50, 0, 0), 200, rl.ScoreWeights(0, 10, 1)) == -1
    with pytest.raises(ValueError):
        rl.ScoreWeights(1, 0, 1)
    with pytest.raises(ValueError):
        rl.ScoreWeights(1, 1, -1)


# -- advantages ----------------------------------------------------------------------

def _rollout(n, reward, values):
    toks = np.array([BOS] + [V["ECALL"]] * n)
    return rl.Rollout(toks, 1, np.zeros(n), np.asarray(values, float), np.zeros((n, len(V)), bool), reward)


def test_gae_examples():
    r = rl.compute_advantages(_rollout(3, 5.0, [0, 0, 0]), 1.0, 1.0)
    assert list(r.advantages) == [5, 5, 5]
    r = rl.compute_advantages(_rollout(4, 0.0, [0] * 4), 1.0, 0.95)
    assert not r.advantages.any()
    # two steps, V = [1, 2], reward 3, gamma 1, lambda 0.5:
    # delta1 = 3 - 2 = 1, delta0 = 0 + 2 - 1 = 1, A0 = 1 + 0.5 * 1
    r = rl.compute_advantages(_rollout(2, 3.0, [1, 2]), 1.0, 0.5)
    assert list(r.advantages) == [1.5, 1.0]
    assert list(r.returns) == [2.5, 3.0]


def _gae_recursive(values, reward, gamma, lam, t=0):
    n = len(values)
    if t == n:
        return []
    r = reward if t == n - 1 else 0.0
    nxt = values[t + 1] if t + 1 < n else 0.0
    delta = r + gamma * nxt - values[t]
    rest = _gae_recursive(values, reward, gamma, lam, t + 1)
    return [delta + (gamma * lam * rest[0] if rest else 0.0)] + rest


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=12), st.floats(-20, 20),
       st.floats(0, 1), st.floats(0, 1))
def test_gae_matches_recursive_oracle(values, reward, gamma, lam):
    r = rl.compute_advantages(_rollout(len(values), reward, values), gamma, lam)
    assert np.allclose(r.advantages, _gae_recursive(values, reward, gamma, lam), atol=1e-9)
    assert np.allclose(r.returns, r.advantages + np.asarray(values))


def test_rollout_alignment_checked():
    with pytest.raises(ValueError):
        rl.Rollout(np.array([BOS]), 1, np.zeros(0), np.zeros(0), np.zeros((0, len(V)), bool), 0.0)
    with pytest.raises(ValueError):
        rl.Rollout(np.array([BOS, 5]), 1, np.zeros(2), np.zeros(1), np.zeros((1, len(V)), bool), 0.0)


# -- clipped objective and KL ------------------------------------------------------------

def test_clipped_objective_examples():
    assert rl.clipped_objective(1.5, 1.0, 0.2) == pytest.approx(1.2)
    # ratio below the band with a negative advantage: clip(0.5) * -1 = -0.8 < -0.5
    assert rl.clipped_objective(0.5, -1.0, 0.2) == pytest.approx(-0.8)
    # ratio above the band with a negative advantage: the unclipped term is the min
    assert rl.clipped_objective(1.5, -1.0, 0.2) == pytest.approx(-1.5)
    assert rl.clipped_objective(1.0, 3.0, 0.2) == pytest.approx(3.0)


@given(st.floats(0, 10), st.floats(-10, 10), st.floats(0.01, 0.99))
def test_clipped_never_exceeds_unclipped(ratio, adv, eps):
    assert rl.clipped_objective(ratio, adv, eps) <= ratio * adv + 1e-12


@given(st.lists(st.tuples(st.floats(-20, 0), st.floats(-20, 0)), min_size=1, max_size=30))
def test_approx_kl_nonnegative(pairs):
    old, new = map(np.array, zip(*pairs))
    assert rl.approx_kl(old, new) >= 0
    assert rl.approx_kl(old, old) == 0


def test_hyper_validation():
    for bad in (dict(clip_eps=0), dict(clip_eps=1), dict(gamma=1.5), dict(gae_lambda=-0.1),
                dict(ppo_epochs=0), dict(batch=0), dict(ref_kl_coef=-1)):
        with pytest.raises(ValueError):
            rl.PpoHyper(**bad)


# -- sampling constraint ------------------------------------------------------------------

def test_slot_budget_never_samples_structural_tokens():
    con = rl.SlotBudget()
    assert set(con.banned([BOS])) == {PAD, BOS, UNK}
    assert not con.done([BOS, V["ECALL"]])


def test_slot_budget_fixes_slot_count():
    con = rl.SlotBudget(2)
    assert EOS in con.banned([BOS, V["ECALL"]])
    two = [BOS, V["ECALL"], V["ADDI"], V["x1"]]
    assert EOS not in con.banned(two) and V["ADD"] in con.banned(two)
    assert not con.done(two) and con.done(two + [V["x0"], V["IMM_1"]])
    assert con.done([BOS, V["ECALL"], V["EBREAK"]])
    # a leading operand run counts as a slot
    assert con.done([BOS, V["x1"], V["ECALL"]])


def test_slot_budget_limit_guard():
    con = rl.SlotBudget(None, limit=10)
    for length in range(1, 10):
        room = 10 - length - 1
        banned = set(con.banned([BOS] * length))
        for m in (V.tokens[i] for i in V.mnemonic_ids):
            assert (V[m] in banned) == (len(operand_fields(m)) > room), (length, m)


def test_sampled_streams_respect_budget():
    con = rl.SlotBudget(3, CFG.context_len + 1)
    out = lm.sample_batch(_params(), [[BOS]] * 40, rng=0, constraint=con)
    for s in out:
        groups = parse_groups(s.tokens)
        assert len(groups) <= 3
        assert all(t not in (PAD, BOS, UNK) for t in s.completion)
        assert len(groups) == 3 or len(s.tokens) == CFG.context_len + 1
        # the guard never lets a mnemonic start that the context cannot finish
        last = s.tokens[groups[-1].start]
        if len(s.tokens) == CFG.context_len + 1 and last in V.mnemonic_ids:
            assert groups[-1].end - groups[-1].start - 1 >= len(operand_fields(V.tokens[last]))


def test_mask_replays_sampler_bans():
    con = rl.SlotBudget(2, CFG.context_len + 1)
    s = lm.sample(_params(), [BOS], seed=4, constraint=con)
    m = con.mask(s.tokens, s.prompt_len)
    assert m.shape == (len(s.completion), len(V))
    for j, t in enumerate(s.completion):
        assert not m[j, t]


# -- PPO update ----------------------------------------------------------------------------

def _batch(params, vp, n=8, seed=0, rewards=None, con=None):
    con = con or rl.SlotBudget(3, CFG.context_len + 1)
    samples = lm.sample_batch(params, [[BOS]] * n, rng=seed, constraint=con)
    rewards = rewards if rewards is not None else [float(i % 3) for i in range(n)]
    return rl.build_rollouts(params, vp, samples, rewards, con)


def test_zero_advantages_move_only_the_value_head():
    params, vp = _params(), rl.init_value_head(CFG.model_dim)
    batch = [replace(r, advantages=np.zeros(r.length), returns=np.ones(r.length))
             for r in _batch(params, vp)]
    hyper = rl.PpoHyper(entropy_coef=0.0, lr=1e-2)
    p2, vp2, m = rl.ppo_update(params, vp, batch, hyper)
    assert p2.to_bytes() == params.to_bytes()
    assert any(not np.array_equal(vp[k], vp2[k]) for k in vp)
    assert m.policy_loss == 0.0


def test_reference_kl_is_inert_at_the_reference():
    params, vp = _params(), rl.init_value_head(CFG.model_dim)
    batch = [replace(r, advantages=np.zeros(r.length)) for r in _batch(params, vp)]
    hyper = rl.PpoHyper(entropy_coef=0.0, ref_kl_coef=1.0)
    p2, _, _ = rl.ppo_update(params, vp, batch, hyper, ref=params)
    assert np.allclose(np.frombuffer(p2.to_bytes(), "<f4"), np.frombuffer(params.to_bytes(), "<f4"),
                       atol=1e-7)


def _ref_kl(params, ref, batch):
    seqs = [r.tokens for r in batch]
    pls = [r.prompt_len for r in batch]
    masks = [r.banned for r in batch]
    lq = rl._reference_logprobs(ref, seqs, pls, masks)
    lp = rl._reference_logprobs(params, seqs, pls, masks)
    return float((np.exp(lp) * (lp - lq)).sum(-1).mean())


def test_reference_kl_pulls_policy_back():
    ref, vp = _params(), rl.init_value_head(CFG.model_dim)
    moved = ref.copy()
    rng = np.random.default_rng(1)
    moved.tensors["tok_emb"] = moved.tensors["tok_emb"] + rng.normal(0, 0.5, ref.tensors["tok_emb"].shape).astype(np.float32)
    batch = [replace(r, advantages=np.zeros(r.length)) for r in _batch(moved, vp)]
    before = _ref_kl(moved, ref, batch)
    hyper = rl.PpoHyper(entropy_coef=0.0, ref_kl_coef=1.0, lr=1e-2, ppo_epochs=1)
    p2, _, _ = rl.ppo_update(moved, vp, batch, hyper, ref=ref)
    assert before > 0 and _ref_kl(p2, ref, batch) < before


def test_positive_advantage_raises_probability():
    params, vp = _params(), rl.init_value_head(CFG.model_dim)
    batch = _batch(params, vp, n=4)
    target = batch[0]
    batch = [replace(r, advantages=np.full(r.length, 1.0 if i == 0 else -1.0)) for i, r in enumerate(batch)]
    hyper = rl.PpoHyper(entropy_coef=0.0, lr=3e-3)
    p2, _, m = rl.ppo_update(params, vp, batch, hyper)
    ev = rl._evaluate(p2, vp, [target.tokens], [target.prompt_len], [target.banned])
    assert ev.logp.sum() > target.logprobs.sum()
    assert m.approx_kl >= 0


def test_stale_policy_detected():
    params, vp = _params(), rl.init_value_head(CFG.model_dim)
    batch = _batch(params, vp)
    batch[0] = replace(batch[0], logprobs=batch[0].logprobs - 0.01)
    with pytest.raises(rl.StalePolicy):
        rl.ppo_update(params, vp, batch)
    with pytest.raises(ValueError):
        rl.ppo_update(params, vp, [])


def test_update_is_deterministic_and_pure():
    params, vp = _params(), rl.init_value_head(CFG.model_dim)
    batch = _batch(params, vp)
    snapshot = params.to_bytes()
    a = rl.ppo_update(params, vp, batch)
    b = rl.ppo_update(params, vp, batch)
    assert params.to_bytes() == snapshot
    assert a[0].to_bytes() == b[0].to_bytes() and a[2] == b[2]


def test_build_rollouts_drops_empty_samples():
    params, vp = _params(), rl.init_value_head(CFG.model_dim)
    samples = lm.sample_batch(params, [[BOS], [BOS]], max_len=1, rng=0)
    assert rl.build_rollouts(params, vp, samples, [1.0, 2.0], rl.SlotBudget()) == []


def test_log_csv_header():
    m = rl.PpoMetrics(1.0, 0.5, 0.25, 2.0, 0.01, 0.1, 3.0, False)
    text = rl.log_csv([rl.log_row(1, 4, m, 0.05)])
    assert text.splitlines() == [
        "epoch,update,mean_reward,loss,approx_kl,kl_flag,entropy,progress",
        "1,4,3,1,0.01,0,2,0.05",
    ]
