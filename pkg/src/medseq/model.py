"""Decoder-only autoregressive transformer in plain numpy (float64).

Pre-norm GPT-2-style blocks, learned positions, GELU MLP, embeddings tied
to the output projection. The backward pass is written out by hand and is
verified against central finite differences in the test suite, so every
operation here sticks to straightforward, differentiable numpy.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy.special import erf

from .sequencer import TokenSequence

LN_EPS = 1e-5
CKPT_MAGIC = "medseq-ckpt v1"


class ModelError(Exception):
    pass


class ConfigError(ModelError):
    pass


class SequenceTooLong(ModelError):
    pass


class PrefixTooLong(ModelError):
    pass


class UnknownTokenId(ModelError):
    pass


class AllPositionsMasked(ModelError):
    pass


class EmptyCorpus(ModelError):
    pass


class NonFiniteLoss(ModelError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass
class ModelConfig:
    vocab_size: int
    context_len: int = 256
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 2
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    batch_size: int = 32
    n_steps: int = 1000
    seed: int = 0
    eval_every: int = 50

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.context_len < 8:
            raise ConfigError("context_len must be >= 8")
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be >= 1")
        self.betas = tuple(self.betas)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def param_specs(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Declared tensor order; init, Adam, and checkpoints all follow it."""
    d, h = config.d_model, 4 * config.d_model
    specs = [("tok_emb", (config.vocab_size, d)),
             ("pos_emb", (config.context_len, d))]
    for i in range(config.n_layers):
        p = f"l{i}."
        specs += [
            (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
            (p + "wq", (d, d)), (p + "bq", (d,)),
            (p + "wk", (d, d)), (p + "bk", (d,)),
            (p + "wv", (d, d)), (p + "bv", (d,)),
            (p + "wo", (d, d)), (p + "bo", (d,)),
            (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
            (p + "w1", (d, h)), (p + "b1", (h,)),
            (p + "w2", (h, d)), (p + "b2", (d,)),
        ]
    specs += [("lnf.g", (d,)), ("lnf.b", (d,))]
    return specs


def init_params(config: ModelConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    """Normal(0, 0.02) weights, identity norms, zero biases; tied output."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params = {}
    for name, shape in param_specs(config):
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif name.endswith((".b", "bq", "bk", "bv", "bo", "b1", "b2")):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, 0.02, size=shape)
    return params


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _layernorm_bwd(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x * _SQRT1_2))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x * _SQRT1_2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _check_ids(ids, vocab_size):
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise UnknownTokenId(
            f"token ids must be in [0, {vocab_size}), got range "
            f"[{ids.min()}, {ids.max()}]")


def _forward_cached(params, config, ids):
    """Full forward pass; returns logits and the cache for backward."""
    ids = np.asarray(ids, dtype=np.int64)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
    b, t = ids.shape
    if t > config.context_len:
        raise SequenceTooLong(f"sequence length {t} > context_len {config.context_len}")
    _check_ids(ids, config.vocab_size)

    E = params["tok_emb"]
    h = E[ids] + params["pos_emb"][:t]
    mask = np.tril(np.ones((t, t), dtype=bool))
    scale = 1.0 / math.sqrt(config.d_head)
    layers = []
    for i in range(config.n_layers):
        p = f"l{i}."
        h_in = h
        n1, ln1c = _layernorm(h, params[p + "ln1.g"], params[p + "ln1.b"])
        n1_2d = n1.reshape(b * t, -1)
        q = _split_heads((n1_2d @ params[p + "wq"] + params[p + "bq"]).reshape(b, t, -1), config.n_heads)
        k = _split_heads((n1_2d @ params[p + "wk"] + params[p + "bk"]).reshape(b, t, -1), config.n_heads)
        v = _split_heads((n1_2d @ params[p + "wv"] + params[p + "bv"]).reshape(b, t, -1), config.n_heads)
        scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * scale
        scores = np.where(mask, scores, -np.inf)
        scores -= scores.max(axis=-1, keepdims=True)
        exps = np.exp(scores)
        attn = exps / exps.sum(axis=-1, keepdims=True)
        ctx = _merge_heads(np.matmul(attn, v))
        ctx_2d = ctx.reshape(b * t, -1)
        attn_out = (ctx_2d @ params[p + "wo"] + params[p + "bo"]).reshape(b, t, -1)
        h = h_in + attn_out
        mid = h
        n2, ln2c = _layernorm(h, params[p + "ln2.g"], params[p + "ln2.b"])
        n2_2d = n2.reshape(b * t, -1)
        pre = n2_2d @ params[p + "w1"] + params[p + "b1"]
        f = _gelu(pre)
        mlp_out = (f @ params[p + "w2"] + params[p + "b2"]).reshape(b, t, -1)
        h = mid + mlp_out
        layers.append({"n1_2d": n1_2d, "ln1c": ln1c, "q": q, "k": k, "v": v,
                       "attn": attn, "ctx_2d": ctx_2d, "ln2c": ln2c,
                       "n2_2d": n2_2d, "pre": pre, "f": f})
    nf, lnfc = _layernorm(h, params["lnf.g"], params["lnf.b"])
    logits = nf.reshape(b * t, -1) @ E.T
    logits = logits.reshape(b, t, -1)
    cache = {"ids": ids, "layers": layers, "nf": nf, "lnfc": lnfc,
             "b": b, "t": t, "scale": scale}
    return (logits[0] if squeeze else logits), cache


def forward(params: dict, config: ModelConfig, ids) -> np.ndarray:
    """Logits over the vocabulary for every position; (T, V) or (B, T, V)."""
    logits, _ = _forward_cached(params, config, ids)
    return logits


def attention_maps(params: dict, config: ModelConfig, ids) -> list[np.ndarray]:
    """Per-layer attention matrices, for the normalization/causality tests."""
    _, cache = _forward_cached(params, config, ids)
    return [layer["attn"] for layer in cache["layers"]]


def loss_and_grads(params: dict, config: ModelConfig, inputs, targets,
                   pad_id: int = 0):
    """Mean next-token cross-entropy (nats) over non-PAD targets + exact grads.

    `targets` is `inputs` shifted left by one; positions whose target is
    PAD are excluded from both the loss and the gradients.
    """
    logits, cache = _forward_cached(params, config, np.asarray(inputs))
    if logits.ndim == 2:
        logits = logits[None]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.ndim == 1:
        targets = targets[None]
    b, t = cache["b"], cache["t"]
    mask = targets != pad_id
    count = int(mask.sum())
    if count == 0:
        raise AllPositionsMasked("every target position is PAD")

    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    tiled = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -math.fsum(tiled[mask].tolist()) / count

    probs = np.exp(logp)
    dlogits = probs
    np.subtract.at(dlogits.reshape(b * t, -1),
                   (np.arange(b * t), targets.reshape(-1)), 1.0)
    dlogits *= (mask[..., None] / count)

    grads = {name: np.zeros_like(arr) for name, arr in params.items()}
    E = params["tok_emb"]
    nf = cache["nf"]
    dlog_2d = dlogits.reshape(b * t, -1)
    grads["tok_emb"] += dlog_2d.T @ nf.reshape(b * t, -1)
    dnf = (dlog_2d @ E).reshape(b, t, -1)
    dh, dg, db = _layernorm_bwd(dnf, params["lnf.g"], cache["lnfc"])
    grads["lnf.g"] += dg
    grads["lnf.b"] += db

    scale = cache["scale"]
    for i in reversed(range(config.n_layers)):
        p = f"l{i}."
        L = cache["layers"][i]
        # MLP branch
        dmlp_2d = dh.reshape(b * t, -1)
        grads[p + "w2"] += L["f"].T @ dmlp_2d
        grads[p + "b2"] += dmlp_2d.sum(axis=0)
        df = dmlp_2d @ params[p + "w2"].T
        dpre = df * _gelu_grad(L["pre"])
        grads[p + "w1"] += L["n2_2d"].T @ dpre
        grads[p + "b1"] += dpre.sum(axis=0)
        dn2 = (dpre @ params[p + "w1"].T).reshape(b, t, -1)
        dmid, dg, db = _layernorm_bwd(dn2, params[p + "ln2.g"], L["ln2c"])
        grads[p + "ln2.g"] += dg
        grads[p + "ln2.b"] += db
        dh = dh + dmid
        # attention branch
        dattn_2d = dh.reshape(b * t, -1)
        grads[p + "wo"] += L["ctx_2d"].T @ dattn_2d
        grads[p + "bo"] += dattn_2d.sum(axis=0)
        dctx = _split_heads((dattn_2d @ params[p + "wo"].T).reshape(b, t, -1),
                            config.n_heads)
        dA = np.matmul(dctx, L["v"].transpose(0, 1, 3, 2))
        dv = np.matmul(L["attn"].transpose(0, 1, 3, 2), dctx)
        A = L["attn"]
        dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True))
        dq = np.matmul(dS, L["k"]) * scale
        dk = np.matmul(dS.transpose(0, 1, 3, 2), L["q"]) * scale
        dq_2d = _merge_heads(dq).reshape(b * t, -1)
        dk_2d = _merge_heads(dk).reshape(b * t, -1)
        dv_2d = _merge_heads(dv).reshape(b * t, -1)
        grads[p + "wq"] += L["n1_2d"].T @ dq_2d
        grads[p + "bq"] += dq_2d.sum(axis=0)
        grads[p + "wk"] += L["n1_2d"].T @ dk_2d
        grads[p + "bk"] += dk_2d.sum(axis=0)
        grads[p + "wv"] += L["n1_2d"].T @ dv_2d
        grads[p + "bv"] += dv_2d.sum(axis=0)
        dn1 = (dq_2d @ params[p + "wq"].T + dk_2d @ params[p + "wk"].T
               + dv_2d @ params[p + "wv"].T).reshape(b, t, -1)
        dres, dg, db = _layernorm_bwd(dn1, params[p + "ln1.g"], L["ln1c"])
        grads[p + "ln1.g"] += dg
        grads[p + "ln1.b"] += db
        dh = dh + dres

    ids = cache["ids"]
    np.add.at(grads["tok_emb"], ids.reshape(-1), dh.reshape(b * t, -1))
    grads["pos_emb"][:t] += dh.sum(axis=0)
    return loss, grads


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(params, grads, state: AdamState, lr: float,
               betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0) -> None:
    """In-place decoupled AdamW; decay applies to matrices only."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, p in params.items():
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * (g * g)
        mhat = state.m[k] / c1
        vhat = state.v[k] / c2
        if weight_decay and p.ndim >= 2:
            p -= lr * weight_decay * p
        p -= lr * mhat / (np.sqrt(vhat) + eps)


# -- training ----------------------------------------------------------------

def split_fraction(patient_id: str, seed: int) -> float:
    """Stable hash of a patient id into [0, 1); drives the 95/2.5/2.5 split."""
    digest = hashlib.sha256(f"{seed}:{patient_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2.0 ** 64


def split_corpus(corpus: list[TokenSequence], seed: int):
    train, val, test = [], [], []
    for s in corpus:
        f = split_fraction(s.patient_id, seed)
        if f < 0.95:
            train.append(s)
        elif f < 0.975:
            val.append(s)
        else:
            test.append(s)
    return train, val, test


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[tuple[int, float, float]]   # (step, train_loss, val_loss|nan)
    best_step: int
    best_val_loss: float
    splits: tuple[int, int, int]

    def save_history(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step,train_loss,val_loss\n")
            for step, tr, va in self.history:
                va_s = "" if math.isnan(va) else repr(va)
                fh.write(f"{step},{repr(tr)},{va_s}\n")


def _make_batch(seqs: list[np.ndarray], pad_id: int):
    lmax = max(len(s) for s in seqs)
    inputs = np.full((len(seqs), lmax - 1), pad_id, dtype=np.int64)
    targets = np.full((len(seqs), lmax - 1), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        inputs[i, :len(s) - 1] = s[:-1]
        targets[i, :len(s) - 1] = s[1:]
    return inputs, targets


def _eval_loss(params, config, seqs, pad_id) -> float:
    total, count = [], 0
    for i in range(0, len(seqs), config.batch_size):
        inputs, targets = _make_batch(seqs[i:i + config.batch_size], pad_id)
        logits, cache = _forward_cached(params, config, inputs)
        mask = targets != pad_id
        m = logits.max(axis=-1, keepdims=True)
        z = logits - m
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        logp = np.take_along_axis(z - lse, targets[..., None], axis=-1)[..., 0]
        total.extend((-logp[mask]).tolist())
        count += int(mask.sum())
    return math.fsum(total) / max(count, 1)


def train(corpus: list[TokenSequence], config: ModelConfig,
          pad_id: int = 0, log=None) -> TrainResult:
    """AdamW training with linear warmup over the first 5% of steps.

    The corpus is split 95/2.5/2.5 by a seeded hash of patient_id; the
    returned parameters are the snapshot with the best validation loss.
    Fully deterministic for a fixed (corpus, config).
    """
    if not corpus:
        raise EmptyCorpus("training corpus is empty")
    too_long = max(len(s.tokens) for s in corpus)
    if too_long > config.context_len + 1:
        raise SequenceTooLong(
            f"corpus has a {too_long}-token sequence; max is context_len+1 "
            f"= {config.context_len + 1} (truncate first)")
    train_seqs, val_seqs, _ = split_corpus(corpus, config.seed)
    if not train_seqs:
        raise EmptyCorpus("95% train split is empty")
    tr = [np.asarray(s.tokens, dtype=np.int64) for s in train_seqs]
    va = [np.asarray(s.tokens, dtype=np.int64) for s in val_seqs]

    params = init_params(config)
    opt = AdamState.for_params(params)
    rng = np.random.default_rng(config.seed)
    warmup = max(1, round(0.05 * config.n_steps))
    order = rng.permutation(len(tr))
    cursor = 0
    history = []
    best_val = math.inf
    best_step = 0
    best_params = {k: p.copy() for k, p in params.items()}

    for step in range(1, config.n_steps + 1):
        batch_idx = []
        for _ in range(min(config.batch_size, len(tr))):
            if cursor == len(order):
                order = rng.permutation(len(tr))
                cursor = 0
            batch_idx.append(order[cursor])
            cursor += 1
        inputs, targets = _make_batch([tr[i] for i in batch_idx], pad_id)
        loss, grads = loss_and_grads(params, config, inputs, targets, pad_id)
        if not math.isfinite(loss):
            raise NonFiniteLoss(step)
        lr = config.learning_rate * (step / warmup if step <= warmup else 1.0)
        adamw_step(params, grads, opt, lr, config.betas,
                   weight_decay=config.weight_decay)
        val_loss = math.nan
        if va and (step % config.eval_every == 0 or step == config.n_steps):
            val_loss = _eval_loss(params, config, va, pad_id)
            if val_loss < best_val:
                best_val = val_loss
                best_step = step
                best_params = {k: p.copy() for k, p in params.items()}
        history.append((step, loss, val_loss))
        if log is not None and (step % config.eval_every == 0 or step == 1):
            log(f"step {step}/{config.n_steps} loss {loss:.4f}"
                + (f" val {val_loss:.4f}" if not math.isnan(val_loss) else ""))

    if not va:
        best_params = params
        best_val = math.nan
        best_step = config.n_steps
    return TrainResult(best_params, history, best_step, best_val,
                       (len(tr), len(va), len(corpus) - len(tr) - len(va)))


# -- sampling ----------------------------------------------------------------

def select_tokens(logits: np.ndarray, u: np.ndarray, temperature: float,
                  top_k: int) -> np.ndarray:
    """Map uniform draws to token ids; batched over rows.

    temperature 0 is exact argmax (smallest id on ties); otherwise sample
    from softmax(logits/temperature) over the top_k highest logits (ties
    broken toward smaller ids; top_k=0 means unrestricted) by inverting
    the CDF at u.
    """
    logits = np.atleast_2d(logits)
    n, v = logits.shape
    if temperature < 0:
        raise ModelError("temperature must be >= 0")
    if temperature == 0.0 or top_k == 1:
        return logits.argmax(axis=1)
    z = logits / temperature
    if top_k and top_k < v:
        order = np.argsort(-z, axis=1, kind="stable")[:, :top_k]
        allowed = np.zeros_like(z, dtype=bool)
        np.put_along_axis(allowed, order, True, axis=1)
        z = np.where(allowed, z, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    cdf = np.cumsum(p, axis=1)
    picks = (cdf <= np.asarray(u)[:, None]).sum(axis=1)
    last_nonzero = v - 1 - np.argmax((p > 0.0)[:, ::-1], axis=1)
    return np.minimum(picks, last_nonzero)


def sample_next(params: dict, config: ModelConfig, prefix,
                temperature: float = 1.0, top_k: int = 0,
                rng: np.random.Generator | None = None) -> int:
    """Sample (or argmax) the next token after `prefix`."""
    prefix = np.asarray(prefix, dtype=np.int64)
    if len(prefix) >= config.context_len + 1:
        raise PrefixTooLong(
            f"prefix length {len(prefix)} leaves no room in context "
            f"{config.context_len}")
    logits = forward(params, config, prefix)[-1]
    if temperature == 0.0 or top_k == 1:
        return int(logits.argmax())
    if rng is None:
        raise ModelError("sampling with temperature > 0 needs an rng stream")
    u = rng.random()
    return int(select_tokens(logits[None], np.array([u]), temperature, top_k)[0])


def next_token_distribution(params: dict, config: ModelConfig, prefix) -> np.ndarray:
    """softmax of the final-position logits."""
    logits = forward(params, config, np.asarray(prefix, dtype=np.int64))[-1]
    z = logits - logits.max()
    p = np.exp(z)
    return p / p.sum()


# -- incremental decoding (KV cache) ----------------------------------------

class DecoderState:
    __slots__ = ("n_rows", "cur_len", "k_cache", "v_cache", "next_logits")

    def __init__(self, n_rows, cur_len, k_cache, v_cache, next_logits):
        self.n_rows = n_rows
        self.cur_len = cur_len
        self.k_cache = k_cache
        self.v_cache = v_cache
        self.next_logits = next_logits


class TransformerDecoder:
    """Batched incremental decoding sessions over fixed parameters.

    Start a session with a shared prompt; each `advance` feeds one sampled
    token per row and refreshes `next_logits`. Parameters are never
    mutated, so sessions may run concurrently.
    """

    def __init__(self, params: dict, config: ModelConfig):
        self.params = params
        self.config = config

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def context_len(self) -> int:
        return self.config.context_len

    def start(self, prompt: list[int], n_rows: int) -> DecoderState:
        cfg = self.config
        prompt = np.asarray(prompt, dtype=np.int64)
        if len(prompt) == 0:
            raise PrefixTooLong("prompt must hold at least one token")
        if len(prompt) > cfg.context_len:
            raise PrefixTooLong(f"prompt length {len(prompt)} exceeds context")
        _, cache = _forward_cached(self.params, cfg, prompt[None, :])
        t0 = len(prompt)
        shape = (cfg.n_layers, n_rows, cfg.n_heads, cfg.context_len, cfg.d_head)
        k_cache = np.zeros(shape)
        v_cache = np.zeros(shape)
        for i, layer in enumerate(cache["layers"]):
            k_cache[i, :, :, :t0] = layer["k"][0]
            v_cache[i, :, :, :t0] = layer["v"][0]
        nf = cache["nf"][0, -1]
        logits = nf @ self.params["tok_emb"].T
        next_logits = np.broadcast_to(logits, (n_rows, cfg.vocab_size)).copy()
        return DecoderState(n_rows, t0, k_cache, v_cache, next_logits)

    def advance(self, state: DecoderState, tokens: np.ndarray) -> None:
        cfg = self.config
        t = state.cur_len
        if t >= cfg.context_len:
            raise SequenceTooLong("decoder session exceeded context window")
        tokens = np.asarray(tokens, dtype=np.int64)
        _check_ids(tokens, cfg.vocab_size)
        p = self.params
        h = p["tok_emb"][tokens] + p["pos_emb"][t]
        scale = 1.0 / math.sqrt(cfg.d_head)
        for i in range(cfg.n_layers):
            pre = f"l{i}."
            n1, _ = _layernorm(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = (n1 @ p[pre + "wq"] + p[pre + "bq"]).reshape(state.n_rows, cfg.n_heads, cfg.d_head)
            k = (n1 @ p[pre + "wk"] + p[pre + "bk"]).reshape(state.n_rows, cfg.n_heads, cfg.d_head)
            v = (n1 @ p[pre + "wv"] + p[pre + "bv"]).reshape(state.n_rows, cfg.n_heads, cfg.d_head)
            state.k_cache[i, :, :, t] = k
            state.v_cache[i, :, :, t] = v
            keys = state.k_cache[i, :, :, :t + 1]
            vals = state.v_cache[i, :, :, :t + 1]
            scores = np.einsum("bhd,bhtd->bht", q, keys) * scale
            scores -= scores.max(axis=-1, keepdims=True)
            e = np.exp(scores)
            attn = e / e.sum(axis=-1, keepdims=True)
            ctx = np.einsum("bht,bhtd->bhd", attn, vals).reshape(state.n_rows, cfg.d_model)
            h = h + ctx @ p[pre + "wo"] + p[pre + "bo"]
            n2, _ = _layernorm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
            h = h + _gelu(n2 @ p[pre + "w1"] + p[pre + "b1"]) @ p[pre + "w2"] + p[pre + "b2"]
        nf, _ = _layernorm(h, p["lnf.g"], p["lnf.b"])
        state.next_logits = nf @ p["tok_emb"].T
        state.cur_len = t + 1


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, params: dict, config: ModelConfig) -> None:
    """Header (magic + config JSON) then raw little-endian f64 tensors."""
    cfg = asdict(config)
    with open(path, "wb") as fh:
        fh.write((CKPT_MAGIC + "\n").encode())
        fh.write((json.dumps(cfg, sort_keys=True) + "\n").encode())
        for name, _ in param_specs(config):
            fh.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, ModelConfig]:
    with open(path, "rb") as fh:
        magic = fh.readline().decode().rstrip("\n")
        if magic != CKPT_MAGIC:
            raise ModelError(f"bad checkpoint magic {magic!r}")
        cfg_raw = json.loads(fh.readline().decode())
        config = ModelConfig(**cfg_raw)
        params = {}
        for name, shape in param_specs(config):
            n = int(np.prod(shape))
            buf = fh.read(n * 8)
            if len(buf) != n * 8:
                raise ModelError(f"checkpoint truncated at tensor {name}")
            params[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise ModelError("trailing bytes after final tensor")
    return params, config
