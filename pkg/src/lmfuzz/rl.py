"""PPO fine-tuning of the token model against deterministic reward agents.

Rewards are episodic: each generation gets one scalar at its end, which GAE
spreads over the generated tokens. The value head is a small feed-forward
readout of the (detached) final hidden state. An optional KL term toward a
frozen reference policy keeps fine-tuning from collapsing onto the few
instructions that are always valid.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import lm
from .corpus import BOS, EOS, PAD, UNK, detokenize, token_words, vocab
from .coverage import CoverageStats
from .isa import Instruction, disassemble_program, operand_fields


class StalePolicy(RuntimeError):
    """Recorded log-probabilities do not match the parameters being updated."""


# -- reward agents -------------------------------------------------------------

@dataclass(frozen=True)
class GenText:
    prompt: tuple[int, ...]
    completion: tuple[int, ...]
    instrs: tuple[Instruction, ...]
    N: int
    Invalid: int

    def __post_init__(self):
        if self.N < 0 or self.Invalid < 0 or self.Invalid > self.N:
            raise ValueError("need 0 <= Invalid <= N")


def gen_text(prompt: Sequence[int], completion: Sequence[int]) -> GenText:
    """Score a completion the way the disassembler sees it."""
    report = disassemble_program(token_words(completion))
    return GenText(tuple(prompt), tuple(completion), tuple(detokenize(completion).instrs),
                   report.total, report.invalid)


def disasm_reward(g: GenText) -> float:
    return float(g.N - 5 * g.Invalid)


@dataclass(frozen=True)
class ScoreWeights:
    w_standalone: float = 1.0
    w_incremental: float = 10.0
    no_improve_penalty: float = 1.0

    def __post_init__(self):
        if self.w_incremental <= 0:
            raise ValueError("w_incremental must be positive")
        if self.no_improve_penalty < 0:
            raise ValueError("no_improve_penalty must be >= 0")


def coverage_reward(stats: CoverageStats, catalog_size: int, w: ScoreWeights = ScoreWeights()) -> float:
    r = w.w_standalone * stats.standalone / catalog_size + w.w_incremental * stats.incremental
    if stats.incremental == 0:
        r -= w.no_improve_penalty
    return float(r)


# -- generation constraint -------------------------------------------------------

NEVER_SAMPLED = (PAD, BOS, UNK)


class SlotBudget(lm.Constraint):
    """Grammar guard used while sampling.

    Structural tokens (PAD, BOS, UNK) are never sampled. With ``limit`` set
    (the longest sequence the sampler may produce), a mnemonic is banned
    once its operands could no longer fit, so no slot is cut off by the
    context end. With ``slots`` set, the stream holds exactly that many
    instruction slots (prompt included): EOS is banned until the last slot
    has started, further mnemonics are banned after it, and generation
    stops once its operands are complete.
    """

    def __init__(self, slots: int | None = None, limit: int | None = None):
        if slots is not None and slots <= 0:
            raise ValueError("slots must be positive")
        self.slots = slots
        self.limit = limit
        v = vocab()
        self._mn = v.mnemonic_ids
        self._arity = {v[m]: len(operand_fields(m)) for m in (v.tokens[i] for i in v.mnemonic_ids)}
        self._base = list(NEVER_SAMPLED)
        self._no_eos = self._base + [EOS]
        self._no_mn = self._base + sorted(self._mn)
        self._by_arity = {a: sorted(t for t, n in self._arity.items() if n >= a) for a in range(5)}

    def _state(self, seq: Sequence[int]) -> tuple[int, int]:
        """(slots started, index of the last mnemonic or -1)."""
        n, last = 0, -1
        for i, t in enumerate(seq):
            if t in self._mn:
                n += 1
                last = i
        if len(seq) > 1 and seq[0] == BOS and seq[1] not in self._mn and seq[1] != EOS:
            n += 1  # leading operand run is a slot of its own
        return n, last

    def banned(self, seq):
        if self.slots is None:
            out = self._base
        else:
            n, _ = self._state(seq)
            out = self._no_eos if n < self.slots else self._no_mn
        if self.limit is not None:
            room = self.limit - len(seq) - 1  # tokens left after this one
            if room < 3:
                out = out + self._by_arity[room + 1]
        return out

    def done(self, seq):
        if self.slots is None:
            return False
        n, last = self._state(seq)
        if n != self.slots:
            return n > self.slots
        if last < 0:
            return True
        return len(seq) - 1 - last >= self._arity[seq[last]]

    def mask(self, seq: Sequence[int], prompt_len: int) -> np.ndarray:
        """Banned-token mask for every generated position of ``seq``."""
        V = len(vocab())
        out = np.zeros((max(len(seq) - prompt_len, 0), V), dtype=bool)
        for j in range(out.shape[0]):
            out[j, list(self.banned(list(seq[:prompt_len + j])))] = True
        return out


# -- rollouts -----------------------------------------------------------------------

@dataclass
class Rollout:
    tokens: np.ndarray       # full sequence, prompt included
    prompt_len: int
    logprobs: np.ndarray     # one per generated token, under the sampling policy
    values: np.ndarray
    banned: np.ndarray       # [generated, vocab] mask the sampler applied
    reward: float
    advantages: np.ndarray = field(default_factory=lambda: np.zeros(0))
    returns: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        n = len(self.tokens) - self.prompt_len
        if n <= 0:
            raise ValueError("rollout has no generated tokens")
        if len(self.logprobs) != n or len(self.values) != n or len(self.banned) != n:
            raise ValueError("rollout arrays must align with the generated tokens")

    @property
    def length(self) -> int:
        return len(self.tokens) - self.prompt_len


@dataclass(frozen=True)
class PpoHyper:
    clip_eps: float = 0.2
    ppo_epochs: int = 4
    lr: float = 1e-4
    value_lr: float = 1e-3
    gamma: float = 1.0
    gae_lambda: float = 0.95
    kl_warn: float = 0.05
    batch: int = 64
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    stale_tol: float = 1e-3
    ref_kl_coef: float = 0.0  # weight of KL(pi || reference) in the loss


    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must be in (0, 1)")
        if not (0 <= self.gamma <= 1 and 0 <= self.gae_lambda <= 1):
            raise ValueError("gamma and gae_lambda must be in [0, 1]")
        if self.ppo_epochs <= 0 or self.batch <= 0:
            raise ValueError("ppo_epochs and batch must be positive")
        if self.ref_kl_coef < 0:
            raise ValueError("ref_kl_coef must be >= 0")


def compute_advantages(r: Rollout, gamma: float = 1.0, lam: float = 0.95) -> Rollout:
    """GAE with the reward on the last generated token and V(terminal) = 0."""
    n = r.length
    rewards = np.zeros(n)
    rewards[-1] = r.reward
    values = np.asarray(r.values, dtype=np.float64)
    nxt = np.append(values[1:], 0.0)
    delta = rewards + gamma * nxt - values
    adv = np.zeros(n)
    acc = 0.0
    for t in range(n - 1, -1, -1):
        acc = delta[t] + gamma * lam * acc
        adv[t] = acc
    return replace(r, advantages=adv, returns=adv + values)


# -- value head ------------------------------------------------------------------------

VALUE_HIDDEN = 64


def init_value_head(model_dim: int, seed: int = 0, hidden: int = VALUE_HIDDEN) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {
        "value.w1": (rng.standard_normal((model_dim, hidden)) / np.sqrt(model_dim)).astype(np.float32),
        "value.b1": np.zeros(hidden, np.float32),
        "value.w2": np.zeros(hidden, np.float32),
        "value.b2": np.zeros(1, np.float32),
    }


def value_forward(vp: dict[str, np.ndarray], h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.tanh(h.astype(np.float64) @ vp["value.w1"] + vp["value.b1"])
    return a @ vp["value.w2"] + vp["value.b2"][0], a


# -- batched policy evaluation -----------------------------------------------------------

@dataclass
class _Eval:
    logp: np.ndarray
    entropy: np.ndarray
    values: np.ndarray
    probs: np.ndarray
    lp_all: np.ndarray
    index: tuple[np.ndarray, np.ndarray, np.ndarray]
    hidden: np.ndarray
    act: np.ndarray
    cache: object
    shape: tuple[int, ...]


def _evaluate(params: lm.Params, vp, seqs: Sequence[np.ndarray], prompt_lens: Sequence[int],
              banned: Sequence[np.ndarray]) -> _Eval:
    ids = lm.pad_batch(seqs)
    inputs = ids[:, :-1]
    logits, hf, cache = lm._forward(params, inputs)
    bi = np.concatenate([np.full(len(s) - p, b) for b, (s, p) in enumerate(zip(seqs, prompt_lens))])
    ti = np.concatenate([np.arange(p - 1, len(s) - 1) for s, p in zip(seqs, prompt_lens)])
    tgt = ids[bi, ti + 1]
    mask = np.concatenate(banned)
    z = np.where(mask, -np.inf, logits[bi, ti].astype(np.float64))
    lp = lm.log_softmax(z)
    probs = np.exp(lp)
    logp = lp[np.arange(len(tgt)), tgt]
    entropy = -(probs * np.where(mask, 0.0, lp)).sum(-1)
    h = hf[bi, ti]
    values, act = value_forward(vp, h)
    return _Eval(logp, entropy, values, probs, np.where(mask, 0.0, lp), (bi, ti, tgt),
                 h, act, cache, logits.shape)


def build_rollouts(params: lm.Params, vp, samples: Sequence[lm.SampleResult],
                   rewards: Sequence[float], constraint: SlotBudget,
                   hyper: PpoHyper = PpoHyper()) -> list[Rollout]:
    """Attach values, sampler masks and advantages to sampled generations.

    Samples with no generated tokens are dropped.
    """
    keep = [i for i, s in enumerate(samples) if len(s.tokens) > s.prompt_len]
    if not keep:
        return []
    seqs = [np.asarray(samples[i].tokens) for i in keep]
    pls = [samples[i].prompt_len for i in keep]
    masks = [constraint.mask(samples[i].tokens, samples[i].prompt_len) for i in keep]
    ev = _evaluate(params, vp, seqs, pls, masks)
    out, off = [], 0
    for j, i in enumerate(keep):
        n = len(seqs[j]) - pls[j]
        r = Rollout(seqs[j], pls[j], np.asarray(samples[i].logprobs, dtype=np.float64),
                    ev.values[off:off + n].copy(), masks[j], float(rewards[i]))
        out.append(compute_advantages(r, hyper.gamma, hyper.gae_lambda))
        off += n
    return out


# -- PPO update ------------------------------------------------------------------------------

def clipped_objective(ratio, adv, eps: float):
    """Per-sample PPO surrogate min(r*A, clip(r, 1-eps, 1+eps)*A)."""
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    return np.minimum(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv)


def approx_kl(logp_old: np.ndarray, logp_new: np.ndarray) -> float:
    """k3 estimator of KL(old || new) from samples drawn under ``old``."""
    log_r = np.asarray(logp_new, np.float64) - np.asarray(logp_old, np.float64)
    return float(np.mean(np.expm1(log_r) - log_r)) if log_r.size else 0.0


@dataclass
class PpoOptim:
    policy: lm.Adam
    value: lm.Adam

    @classmethod
    def create(cls, hyper: PpoHyper) -> "PpoOptim":
        return cls(lm.Adam(lr=hyper.lr), lm.Adam(lr=hyper.value_lr))


@dataclass(frozen=True)
class PpoMetrics:
    loss: float
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    clip_frac: float
    mean_reward: float
    kl_flag: bool


def _reference_logprobs(ref: lm.Params, seqs, pls, masks) -> np.ndarray:
    """Masked log-probabilities of the reference policy at every generated position."""
    ids = lm.pad_batch(seqs)
    logits, _, _ = lm._forward(ref, ids[:, :-1])
    bi = np.concatenate([np.full(len(s) - p, b) for b, (s, p) in enumerate(zip(seqs, pls))])
    ti = np.concatenate([np.arange(p - 1, len(s) - 1) for s, p in zip(seqs, pls)])
    mask = np.concatenate(masks)
    lq = lm.log_softmax(np.where(mask, -np.inf, logits[bi, ti].astype(np.float64)))
    return np.where(mask, 0.0, lq)


def ppo_update(params: lm.Params, value_params: dict[str, np.ndarray], batch: Sequence[Rollout],
               hyper: PpoHyper = PpoHyper(), optim: PpoOptim | None = None,
               ref: lm.Params | None = None
               ) -> tuple[lm.Params, dict[str, np.ndarray], PpoMetrics]:
    """Clipped-surrogate PPO on one batch of rollouts.

    Advantages are whitened over the batch. With ``ref`` given and
    ``hyper.ref_kl_coef`` > 0, the exact per-position KL(pi || ref) over the
    vocabulary is added to the loss. ``optim`` carries Adam state across
    calls; a fresh one is made if omitted. Inputs are not modified.
    """
    if not batch:
        raise ValueError("empty rollout batch")
    optim = optim or PpoOptim.create(hyper)
    params = params.copy()
    vp = {k: v.copy() for k, v in value_params.items()}
    seqs = [r.tokens for r in batch]
    pls = [r.prompt_len for r in batch]
    masks = [r.banned for r in batch]
    old = np.concatenate([r.logprobs for r in batch])
    adv = np.concatenate([r.advantages for r in batch])
    ret = np.concatenate([r.returns for r in batch])
    std = adv.std()
    adv_n = (adv - adv.mean()) / std if std > 1e-8 else np.zeros_like(adv)
    N = len(old)
    eps = hyper.clip_eps
    beta = hyper.ref_kl_coef if ref is not None else 0.0
    lq = _reference_logprobs(ref, seqs, pls, masks) if beta else None
    hist = []
    for epoch in range(hyper.ppo_epochs):
        ev = _evaluate(params, vp, seqs, pls, masks)
        if epoch == 0:
            drift = float(np.max(np.abs(ev.logp - old)))
            if drift > hyper.stale_tol:
                raise StalePolicy(f"log-prob drift {drift:.2e} exceeds {hyper.stale_tol:g}")
        ratio = np.exp(ev.logp - old)
        unclipped = ratio * adv_n
        surrogate = clipped_objective(ratio, adv_n, eps)
        policy_loss = -float(surrogate.mean())
        value_loss = 0.5 * float(np.mean((ev.values - ret) ** 2))
        ent = float(ev.entropy.mean())
        if beta:
            diff = ev.lp_all - lq
            ref_kl = (ev.probs * diff).sum(-1)
        else:
            ref_kl = np.zeros(N)
        hist.append((policy_loss + hyper.value_coef * value_loss - hyper.entropy_coef * ent
                     + beta * float(ref_kl.mean()),
                     policy_loss, value_loss, ent,
                     float(np.mean(np.abs(ratio - 1) > eps))))

        # d loss / d log pi(a): only where the unclipped branch is the minimum
        live = unclipped <= surrogate
        dlogp = np.where(live, -adv_n * ratio / N, 0.0)
        bi, ti, tgt = ev.index
        dz = -dlogp[:, None] * ev.probs
        dz[np.arange(N), tgt] += dlogp
        if hyper.entropy_coef:
            dz += (hyper.entropy_coef / N) * ev.probs * (ev.lp_all + ev.entropy[:, None])
        if beta:
            dz += (beta / N) * ev.probs * (diff - ref_kl[:, None])
        dlogits = np.zeros(ev.shape, dtype=params.dtype)
        np.add.at(dlogits, (bi, ti), dz.astype(params.dtype))
        grads = lm._backward(params, ev.cache, dlogits)
        optim.policy.step(params.tensors, grads)

        dv = hyper.value_coef * (ev.values - ret) / N
        da = (dv[:, None] * vp["value.w2"]) * (1 - ev.act ** 2)
        h = ev.hidden.astype(np.float64)
        vgrads = {
            "value.w2": ev.act.T @ dv,
            "value.b2": np.array([dv.sum()]),
            "value.w1": h.T @ da,
            "value.b1": da.sum(0),
        }
        optim.value.step(vp, vgrads)

    final = _evaluate(params, vp, seqs, pls, masks)
    kl = approx_kl(old, final.logp)
    loss, pl, vl, ent, cf = (float(np.mean(c)) for c in zip(*hist))
    rewards = [r.reward for r in batch]
    return params, vp, PpoMetrics(loss, pl, vl, ent, kl, cf, float(np.mean(rewards)),
                                  kl > hyper.kl_warn)


# -- training log ------------------------------------------------------------------------------

LOG_HEADER = ["epoch", "update", "mean_reward", "loss", "approx_kl", "kl_flag", "entropy", "progress"]


def log_row(epoch: int, update: int, m: PpoMetrics, progress: float) -> list:
    """``progress`` is the stage metric: invalid-rate (stage 2) or
    incremental coverage (stage 3)."""
    return [epoch, update, f"{m.mean_reward:.6g}", f"{m.loss:.6g}", f"{m.approx_kl:.6g}",
            int(m.kl_flag), f"{m.entropy:.6g}", f"{progress:.6g}"]


def log_csv(rows: Sequence[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    w.writerows(rows)
    return buf.getvalue()
