"""Small decoder-only transformer in plain numpy.

Pre-norm blocks, learned positional embeddings, output projection tied to
the token embedding. Backward pass is hand-written; ``loss_and_grad`` is
checked against central differences in the test suite.

Initialisation: weights ~ N(0, 0.02**2); the two residual output
projections per block (attention out, feed-forward out) use
0.02 / sqrt(2 * layers). Biases zero, layer-norm gains one.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

PAD = 0
LN_EPS = 1e-5
GELU_C = float(np.sqrt(2.0 / np.pi))
CHECKPOINT_MAGIC = b"RVLM"
CHECKPOINT_VERSION = 1


class ConfigInvalid(ValueError):
    pass


class SequenceTooLong(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    context_len: int = 128
    layers: int = 4
    heads: int = 4
    model_dim: int = 128
    ff_dim: int = 512
    seed: int = 0

    def validate(self) -> None:
        for name in ("vocab_size", "context_len", "layers", "heads", "model_dim", "ff_dim"):
            if getattr(self, name) <= 0:
                raise ConfigInvalid(f"{name} must be positive")
        if self.model_dim % self.heads:
            raise ConfigInvalid(f"model_dim={self.model_dim} not divisible by heads={self.heads}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    def param_count(self) -> int:
        d, f = self.model_dim, self.ff_dim
        per_layer = 4 * d * d + 2 * d * f + 9 * d + f
        return self.vocab_size * d + self.context_len * d + self.layers * per_layer + 2 * d


def param_names(config: LmConfig) -> list[str]:
    names = ["tok_emb", "pos_emb"]
    for i in range(config.layers):
        names += [f"{i}.{n}" for n in (
            "ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_o", "b_o",
            "ln2_g", "ln2_b", "w_1", "b_1", "w_2", "b_2",
        )]
    return names + ["lnf_g", "lnf_b"]


@dataclass
class Params:
    config: LmConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "Params":
        return Params(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "Params":
        return Params(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    @property
    def dtype(self):
        return self.tensors["tok_emb"].dtype

    def count(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def to_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(self.tensors[n], dtype="<f4").tobytes()
                        for n in param_names(self.config))


def _shapes(config: LmConfig) -> dict[str, tuple[int, ...]]:
    d, f, V, C = config.model_dim, config.ff_dim, config.vocab_size, config.context_len
    shapes = {"tok_emb": (V, d), "pos_emb": (C, d), "lnf_g": (d,), "lnf_b": (d,)}
    for i in range(config.layers):
        shapes.update({
            f"{i}.ln1_g": (d,), f"{i}.ln1_b": (d,),
            f"{i}.w_qkv": (d, 3 * d), f"{i}.b_qkv": (3 * d,),
            f"{i}.w_o": (d, d), f"{i}.b_o": (d,),
            f"{i}.ln2_g": (d,), f"{i}.ln2_b": (d,),
            f"{i}.w_1": (d, f), f"{i}.b_1": (f,),
            f"{i}.w_2": (f, d), f"{i}.b_2": (d,),
        })
    return shapes


def init(config: LmConfig, dtype=np.float32) -> Params:
    config.validate()
    rng = np.random.default_rng(config.seed)
    shapes = _shapes(config)
    resid_std = 0.02 / np.sqrt(2 * config.layers)
    tensors = {}
    for name in param_names(config):
        shape = shapes[name]
        short = name.split(".")[-1]
        if short.endswith("_g"):
            t = np.ones(shape)
        elif short.startswith("b_") or short.endswith("_b"):
            t = np.zeros(shape)
        elif short in ("w_o", "w_2"):
            t = rng.normal(0.0, resid_std, shape)
        else:
            t = rng.normal(0.0, 0.02, shape)
        tensors[name] = t.astype(dtype)
    return Params(config, tensors)


# -- primitives ---------------------------------------------------------------

def _ln(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _ln_back(dy, g, cache):
    xhat, rstd = cache
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(red), dy.sum(red)


def _gelu(x):
    t = np.tanh(GELU_C * x * (1.0 + 0.044715 * x * x))
    return 0.5 * x * (1.0 + t), t


def _gelu_back(dy, x, t):
    dt = (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def softmax(x: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(x))


def _as_batch(ids) -> tuple[np.ndarray, bool]:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim != 2:
        raise ShapeMismatch("token ids must be 1-D or 2-D")
    return arr, False


# -- full-sequence forward / backward ----------------------------------------

def _forward(params: Params, ids: np.ndarray):
    cfg = params.config
    B, T = ids.shape
    if T > cfg.context_len:
        raise SequenceTooLong(f"{T} tokens > context_len {cfg.context_len}")
    if T == 0:
        raise ShapeMismatch("empty sequence")
    H, hd = cfg.heads, cfg.head_dim
    p = params.tensors
    dt = params.dtype
    x = p["tok_emb"][ids] + p["pos_emb"][:T]
    causal = np.tril(np.ones((T, T), dtype=bool))
    scale = dt.type(1.0 / np.sqrt(hd))
    layer_caches = []
    for i in range(cfg.layers):
        h1, ln1c = _ln(x, p[f"{i}.ln1_g"], p[f"{i}.ln1_b"])
        qkv = h1 @ p[f"{i}.w_qkv"] + p[f"{i}.b_qkv"]
        q, k, v = (qkv[..., j * cfg.model_dim:(j + 1) * cfg.model_dim]
                   .reshape(B, T, H, hd).transpose(0, 2, 1, 3) for j in range(3))
        s = (q @ k.transpose(0, 1, 3, 2)) * scale
        s = np.where(causal, s, -np.inf)
        s = s - s.max(-1, keepdims=True)
        e = np.exp(s)
        att = e / e.sum(-1, keepdims=True)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.model_dim)
        x = x + o @ p[f"{i}.w_o"] + p[f"{i}.b_o"]
        h2, ln2c = _ln(x, p[f"{i}.ln2_g"], p[f"{i}.ln2_b"])
        a1 = h2 @ p[f"{i}.w_1"] + p[f"{i}.b_1"]
        g1, t1 = _gelu(a1)
        x = x + g1 @ p[f"{i}.w_2"] + p[f"{i}.b_2"]
        layer_caches.append((h1, ln1c, q, k, v, att, o, h2, ln2c, a1, g1, t1))
    hf, lnfc = _ln(x, p["lnf_g"], p["lnf_b"])
    logits = hf @ p["tok_emb"].T
    return logits, hf, (ids, layer_caches, hf, lnfc)


def _backward(params: Params, cache, dlogits: np.ndarray, dhidden: np.ndarray | None = None):
    cfg = params.config
    p = params.tensors
    ids, layer_caches, hf, lnfc = cache
    B, T = ids.shape
    H, hd, d = cfg.heads, cfg.head_dim, cfg.model_dim
    scale = p["tok_emb"].dtype.type(1.0 / np.sqrt(hd))
    g: dict[str, np.ndarray] = {}
    flat = lambda a: a.reshape(-1, a.shape[-1])

    g["tok_emb"] = flat(dlogits).T @ flat(hf)
    dhf = dlogits @ p["tok_emb"]
    if dhidden is not None:
        dhf = dhf + dhidden
    dx, g["lnf_g"], g["lnf_b"] = _ln_back(dhf, p["lnf_g"], lnfc)

    for i in reversed(range(cfg.layers)):
        h1, ln1c, q, k, v, att, o, h2, ln2c, a1, g1, t1 = layer_caches[i]
        # feed-forward
        g[f"{i}.w_2"] = flat(g1).T @ flat(dx)
        g[f"{i}.b_2"] = flat(dx).sum(0)
        dg1 = dx @ p[f"{i}.w_2"].T
        da1 = _gelu_back(dg1, a1, t1)
        g[f"{i}.w_1"] = flat(h2).T @ flat(da1)
        g[f"{i}.b_1"] = flat(da1).sum(0)
        dh2 = da1 @ p[f"{i}.w_1"].T
        dln, g[f"{i}.ln2_g"], g[f"{i}.ln2_b"] = _ln_back(dh2, p[f"{i}.ln2_g"], ln2c)
        dx = dx + dln
        # attention
        g[f"{i}.w_o"] = flat(o).T @ flat(dx)
        g[f"{i}.b_o"] = flat(dx).sum(0)
        do = (dx @ p[f"{i}.w_o"].T).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        datt = do @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        ds = att * (datt - (datt * att).sum(-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.concatenate(
            [t.transpose(0, 2, 1, 3).reshape(B, T, d) for t in (dq, dk, dv)], axis=-1)
        g[f"{i}.w_qkv"] = flat(h1).T @ flat(dqkv)
        g[f"{i}.b_qkv"] = flat(dqkv).sum(0)
        dh1 = dqkv @ p[f"{i}.w_qkv"].T
        dln, g[f"{i}.ln1_g"], g[f"{i}.ln1_b"] = _ln_back(dh1, p[f"{i}.ln1_g"], ln1c)
        dx = dx + dln

    g["pos_emb"] = np.zeros_like(p["pos_emb"])
    g["pos_emb"][:T] = dx.sum(0)
    np.add.at(g["tok_emb"], ids.reshape(-1), flat(dx))
    return g


def forward(params: Params, seq) -> np.ndarray:
    """Logits, one row per input position (``[T, V]`` or ``[B, T, V]``)."""
    ids, single = _as_batch(seq)
    logits, _, _ = _forward(params, ids)
    return logits[0] if single else logits


def forward_hidden(params: Params, seq) -> tuple[np.ndarray, np.ndarray]:
    ids, single = _as_batch(seq)
    logits, hf, _ = _forward(params, ids)
    return (logits[0], hf[0]) if single else (logits, hf)


def nll_loss(logits: np.ndarray, targets) -> float:
    """Mean next-token NLL over positions whose target is not PAD."""
    return _nll(np.asarray(logits), np.asarray(targets))[0]


def _nll(logits: np.ndarray, targets: np.ndarray):
    if logits.shape[:-1] != targets.shape:
        raise ShapeMismatch(f"logits {logits.shape} vs targets {targets.shape}")
    mask = targets != PAD
    n = int(mask.sum())
    lp = log_softmax(logits)
    if n == 0:
        return 0.0, np.zeros_like(logits)
    picked = np.take_along_axis(lp, targets[..., None], -1)[..., 0]
    loss = float(-(picked * mask).sum() / n)
    dlogits = np.exp(lp)
    np.put_along_axis(dlogits, targets[..., None],
                      np.take_along_axis(dlogits, targets[..., None], -1) - 1.0, -1)
    dlogits *= (mask / n)[..., None]
    return loss, dlogits.astype(logits.dtype)


def loss_and_grad(params: Params, batch) -> tuple[float, dict[str, np.ndarray]]:
    """Next-token loss on a padded batch ``[B, T+1]`` and its gradient."""
    ids, _ = _as_batch(batch)
    inputs, targets = ids[:, :-1], ids[:, 1:]
    logits, _, cache = _forward(params, inputs)
    loss, dlogits = _nll(logits, targets)
    return loss, _backward(params, cache, dlogits)


grad = loss_and_grad


# -- optimisation -------------------------------------------------------------

def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= s
    return norm


class Adam:
    def __init__(self, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip: float = 1.0):
        self.lr, self.beta1, self.beta2, self.eps, self.clip = lr, beta1, beta2, eps, clip
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> float:
        norm = clip_by_global_norm(grads, self.clip)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * np.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for name, gr in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(gr)
                self.v[name] = np.zeros_like(gr)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * gr
            v *= b2
            v += (1 - b2) * gr * gr
            if self.lr:
                tensors[name] -= (lr_t * m / (np.sqrt(v) + self.eps)).astype(tensors[name].dtype)
        return norm


def pad_batch(seqs: Sequence[Sequence[int]], max_len: int | None = None) -> np.ndarray:
    n = max(len(s) for s in seqs)
    if max_len is not None:
        n = min(n, max_len)
    out = np.full((len(seqs), n), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        s = list(s)[:n]
        out[i, :len(s)] = s
    return out


def train(params: Params, corpus: Sequence[Sequence[int]], lr: float = 3e-4, batch: int = 32,
          epochs: int = 1, seed: int = 0, log: Callable[[int, float], None] | None = None
          ) -> tuple[Params, list[float]]:
    """Teacher-forced training; ``corpus`` holds BOS..EOS token lists.

    Sequences longer than ``context_len + 1`` are truncated. Returns the new
    parameters and the mean loss of each epoch.
    """
    if lr < 0 or batch <= 0 or epochs <= 0:
        raise ValueError("hyperparameters must be positive")
    params = params.copy()
    opt = Adam(lr=lr)
    limit = params.config.context_len + 1
    rng = np.random.default_rng(seed)
    order = np.arange(len(corpus))
    curve = []
    for epoch in range(epochs):
        rng.shuffle(order)
        losses, weights = [], []
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            ids = pad_batch([corpus[i] for i in idx], limit)
            loss, grads = loss_and_grad(params, ids)
            opt.step(params.tensors, grads)
            losses.append(loss)
            weights.append(int((ids[:, 1:] != PAD).sum()))
        epoch_loss = float(np.average(losses, weights=weights))
        curve.append(epoch_loss)
        if log:
            log(epoch, epoch_loss)
    return params, curve


def evaluate(params: Params, corpus: Sequence[Sequence[int]], batch: int = 64) -> float:
    limit = params.config.context_len + 1
    total = count = 0.0
    for start in range(0, len(corpus), batch):
        ids = pad_batch(corpus[start:start + batch], limit)
        logits = forward(params, ids[:, :-1])
        n = int((ids[:, 1:] != PAD).sum())
        total += nll_loss(logits, ids[:, 1:]) * n
        count += n
    return total / count if count else 0.0


# -- sampling -------------------------------------------------------------------

@dataclass
class SampleResult:
    tokens: list[int]
    logprobs: list[float]  # one per generated (non-prompt) token
    prompt_len: int

    @property
    def completion(self) -> list[int]:
        return self.tokens[self.prompt_len:]


class Constraint:
    """Per-step generation hook.

    ``banned(seq)`` returns token ids that may not be sampled next;
    ``done(seq)`` ends a sequence before sampling. Both see the full token
    list generated so far (prompt included).
    """

    def banned(self, seq: list[int]) -> Sequence[int]:
        return ()

    def done(self, seq: list[int]) -> bool:
        return False


def _tempered_logprobs(logits: np.ndarray, temperature: float, top_k: int | None,
                       banned: np.ndarray | None) -> np.ndarray:
    z = logits.astype(np.float64) / temperature
    if banned is not None:
        z = np.where(banned, -np.inf, z)
    if top_k:
        k = min(top_k, z.shape[-1])
        kth = np.partition(z, -k, axis=-1)[..., -k][..., None]
        z = np.where(z >= kth, z, -np.inf)
    return log_softmax(z)


def _decode_step(params: Params, kcache, vcache, tok: np.ndarray, pos: int):
    cfg = params.config
    p = params.tensors
    B = tok.shape[0]
    H, hd, d = cfg.heads, cfg.head_dim, cfg.model_dim
    scale = params.dtype.type(1.0 / np.sqrt(hd))
    x = p["tok_emb"][tok] + p["pos_emb"][pos]
    for i in range(cfg.layers):
        h1, _ = _ln(x, p[f"{i}.ln1_g"], p[f"{i}.ln1_b"])
        qkv = h1 @ p[f"{i}.w_qkv"] + p[f"{i}.b_qkv"]
        q = qkv[:, :d].reshape(B, H, hd)
        kcache[i][:, :, pos] = qkv[:, d:2 * d].reshape(B, H, hd)
        vcache[i][:, :, pos] = qkv[:, 2 * d:].reshape(B, H, hd)
        K = kcache[i][:, :, :pos + 1]
        V = vcache[i][:, :, :pos + 1]
        s = np.einsum("bhd,bhtd->bht", q, K) * scale
        s = s - s.max(-1, keepdims=True)
        e = np.exp(s)
        att = e / e.sum(-1, keepdims=True)
        o = np.einsum("bht,bhtd->bhd", att, V).reshape(B, d)
        x = x + o @ p[f"{i}.w_o"] + p[f"{i}.b_o"]
        h2, _ = _ln(x, p[f"{i}.ln2_g"], p[f"{i}.ln2_b"])
        g1, _ = _gelu(h2 @ p[f"{i}.w_1"] + p[f"{i}.b_1"])
        x = x + g1 @ p[f"{i}.w_2"] + p[f"{i}.b_2"]
    hf, _ = _ln(x, p["lnf_g"], p["lnf_b"])
    return hf @ p["tok_emb"].T


def sample_batch(params: Params, prompts: Sequence[Sequence[int]], temperature: float = 1.0,
                 top_k: int | None = None, max_len: int | None = None,
                 rng: np.random.Generator | int = 0, eos_id: int = 2,
                 constraint: Constraint | None = None) -> list[SampleResult]:
    """Autoregressive sampling for a batch of prompts with a KV cache.

    Sequences may be at most ``context_len + 1`` tokens long (the last token
    is never fed back). Generation of a sequence stops at EOS, at
    ``max_len`` tokens, or when ``constraint.done`` says so.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    cfg = params.config
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    limit = cfg.context_len + 1
    max_len = limit if max_len is None else min(max_len, limit)
    B = len(prompts)
    seqs = [list(pr) for pr in prompts]
    if any(not s for s in seqs):
        raise ValueError("prompts must be non-empty (start with BOS)")
    if any(len(s) >= limit for s in seqs):
        raise SequenceTooLong("prompt does not fit in the context")
    logps: list[list[float]] = [[] for _ in range(B)]
    active = np.array([len(s) < max_len for s in seqs])
    for b in range(B):
        if constraint is not None and active[b] and constraint.done(seqs[b]):
            active[b] = False
    shape = (B, cfg.heads, cfg.context_len, cfg.head_dim)
    kcache = [np.zeros(shape, dtype=params.dtype) for _ in range(cfg.layers)]
    vcache = [np.zeros(shape, dtype=params.dtype) for _ in range(cfg.layers)]
    V = cfg.vocab_size
    pos = 0
    while active.any() and pos < cfg.context_len:
        tok = np.array([s[pos] if pos < len(s) else PAD for s in seqs])
        logits = _decode_step(params, kcache, vcache, tok, pos)
        pos += 1
        need = [b for b in range(B) if active[b] and len(seqs[b]) == pos]
        if not need:
            continue
        banned = None
        if constraint is not None:
            banned = np.zeros((len(need), V), dtype=bool)
            for j, b in enumerate(need):
                banned[j, list(constraint.banned(seqs[b]))] = True
        lp = _tempered_logprobs(logits[need], temperature, top_k, banned)
        if top_k == 1:
            choice = lp.argmax(-1)
        else:
            cdf = np.cumsum(np.exp(lp), -1)
            u = rng.random(len(need)) * cdf[:, -1]
            choice = np.minimum((cdf < u[:, None]).sum(-1), V - 1)
        for j, b in enumerate(need):
            t = int(choice[j])
            seqs[b].append(t)
            logps[b].append(float(lp[j, t]))
            if t == eos_id or len(seqs[b]) >= max_len or (
                    constraint is not None and constraint.done(seqs[b])):
                active[b] = False
    return [SampleResult(seqs[b], logps[b], len(prompts[b])) for b in range(B)]


def sample(params: Params, prompt: Sequence[int], temperature: float = 1.0,
           top_k: int | None = None, max_len: int | None = None, seed: int = 0,
           constraint: Constraint | None = None) -> SampleResult:
    return sample_batch(params, [prompt], temperature, top_k, max_len, seed,
                        constraint=constraint)[0]


def token_logprobs(logits: np.ndarray, tokens: np.ndarray, temperature: float = 1.0,
                   banned: np.ndarray | None = None) -> np.ndarray:
    """log pi(token | prefix) for each position, under the tempered policy."""
    lp = _tempered_logprobs(logits, temperature, None, banned)
    return np.take_along_axis(lp, tokens[..., None], -1)[..., 0]


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path: str | Path, params: Params, extra: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    """Header (magic, version, JSON config) then little-endian float32 tensors
    in ``param_names`` order, then any ``extra`` tensors in sorted-key order."""
    extra = extra or {}
    header = json.dumps({
        "config": asdict(params.config),
        "extra": {k: list(v.shape) for k, v in extra.items()},
        "meta": meta or {},
    }, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    buf.write(params.to_bytes())
    for k in sorted(extra):
        buf.write(np.ascontiguousarray(extra[k], dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[Params, dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen])
    config = LmConfig(**header["config"])
    offset = 12 + hlen
    shapes = _shapes(config)

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape)) * 4
        arr = np.frombuffer(data[offset:offset + n], dtype="<f4").reshape(shape).astype(np.float32)
        offset += n
        return arr

    tensors = {name: take(shapes[name]) for name in param_names(config)}
    extra = {k: take(tuple(s)) for k, s in header["extra"].items()}
    return Params(config, tensors), extra, header["meta"]
