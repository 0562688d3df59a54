import math

import numpy as np
import pytest
from scipy.special import erf

from medseq.sequencer import TokenSequence
from medseq.model import (AdamState, AllPositionsMasked, ConfigError,
                          EmptyCorpus, ModelConfig, NonFiniteLoss,
                          PrefixTooLong, SequenceTooLong, TransformerDecoder,
                          UnknownTokenId, adamw_step, attention_maps, forward,
                          init_params, load_checkpoint, loss_and_grads,
                          next_token_distribution, sample_next,
                          save_checkpoint, select_tokens, split_corpus,
                          split_fraction, train)

CFG = ModelConfig(vocab_size=23, context_len=16, d_model=16, n_heads=2,
                  n_layers=2, seed=3)


@pytest.fixture(scope="module")
def params():
    return init_params(CFG)


@pytest.fixture(scope="module")
def batch():
    rng = np.random.default_rng(0)
    inputs = rng.integers(0, CFG.vocab_size, (2, 10))
    targets = np.roll(inputs, -1, axis=1)
    targets[:, -1] = 0
    return inputs, targets


def test_init_deterministic_and_identity_norms():
    a = init_params(CFG)
    b = init_params(CFG)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    for k in a:
        if k.endswith(".g"):
            assert (a[k] == 1.0).all()
        if k.endswith(".b"):
            assert (a[k] == 0.0).all()


def test_config_divisibility():
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=10, d_model=6, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=10, context_len=4)


def test_vocab_one_forced_distribution():
    cfg = ModelConfig(vocab_size=1, context_len=8, d_model=8, n_heads=2,
                      n_layers=1)
    p = init_params(cfg)
    logits = forward(p, cfg, np.zeros((1, 5), dtype=int))
    probs = np.exp(logits - logits.max(-1, keepdims=True))
    probs /= probs.sum(-1, keepdims=True)
    assert np.all(probs == 1.0)
    loss, _ = loss_and_grads(p, cfg, np.zeros((1, 5), dtype=int),
                             np.zeros((1, 5), dtype=int), pad_id=-1)
    assert loss == 0.0


def test_causality_every_future_position(params, batch):
    inputs, _ = batch
    base = forward(params, CFG, inputs)
    T = inputs.shape[1]
    for t in range(1, T):
        mutated = inputs.copy()
        mutated[:, t] = (mutated[:, t] + 7) % CFG.vocab_size
        out = forward(params, CFG, mutated)
        assert np.array_equal(base[:, :t], out[:, :t]), f"position {t}"


def test_attention_rows_normalized_and_causal(params, batch):
    inputs, _ = batch
    for attn in attention_maps(params, CFG, inputs):
        assert np.abs(attn.sum(axis=-1) - 1.0).max() < 1e-9
        t = attn.shape[-1]
        upper = attn[..., ~np.tril(np.ones((t, t), dtype=bool))]
        assert (upper == 0.0).all()


def test_output_softmax_normalized(params, batch):
    inputs, _ = batch
    logits = forward(params, CFG, inputs)
    z = np.exp(logits - logits.max(-1, keepdims=True))
    probs = z / z.sum(-1, keepdims=True)
    assert np.abs(probs.sum(-1) - 1.0).max() < 1e-9


def test_unknown_token_and_too_long(params):
    with pytest.raises(UnknownTokenId):
        forward(params, CFG, np.array([0, 99]))
    with pytest.raises(SequenceTooLong):
        forward(params, CFG, np.zeros(17, dtype=int))


def _reference_forward(params, cfg, ids):
    """Straight-line reimplementation: explicit per-position loops."""
    d, H = cfg.d_model, cfg.n_heads
    dh = d // H
    T = len(ids)

    def ln(x, g, b):
        mu = x.mean()
        var = ((x - mu) ** 2).mean()
        return g * (x - mu) / math.sqrt(var + 1e-5) + b

    h = [params["tok_emb"][ids[t]] + params["pos_emb"][t] for t in range(T)]
    for i in range(cfg.n_layers):
        p = f"l{i}."
        n1 = [ln(h[t], params[p + "ln1.g"], params[p + "ln1.b"]) for t in range(T)]
        q = [n1[t] @ params[p + "wq"] + params[p + "bq"] for t in range(T)]
        k = [n1[t] @ params[p + "wk"] + params[p + "bk"] for t in range(T)]
        v = [n1[t] @ params[p + "wv"] + params[p + "bv"] for t in range(T)]
        ctx = []
        for t in range(T):
            out = np.zeros(d)
            for head in range(H):
                sl = slice(head * dh, (head + 1) * dh)
                scores = np.array([q[t][sl] @ k[j][sl] / math.sqrt(dh)
                                   for j in range(t + 1)])
                w = np.exp(scores - scores.max())
                w /= w.sum()
                out[sl] = sum(w[j] * v[j][sl] for j in range(t + 1))
            ctx.append(out)
        h = [h[t] + ctx[t] @ params[p + "wo"] + params[p + "bo"] for t in range(T)]
        n2 = [ln(h[t], params[p + "ln2.g"], params[p + "ln2.b"]) for t in range(T)]
        for t in range(T):
            pre = n2[t] @ params[p + "w1"] + params[p + "b1"]
            act = 0.5 * pre * (1.0 + erf(pre / math.sqrt(2.0)))
            h[t] = h[t] + act @ params[p + "w2"] + params[p + "b2"]
    nf = [ln(h[t], params["lnf.g"], params["lnf.b"]) for t in range(T)]
    return np.stack([nf[t] @ params["tok_emb"].T for t in range(T)])


def test_forward_matches_reference_implementation():
    cfg = ModelConfig(vocab_size=11, context_len=8, d_model=8, n_heads=2,
                      n_layers=1, seed=9)
    p = init_params(cfg)
    ids = np.array([1, 4, 7, 2, 9, 0])
    got = forward(p, cfg, ids)
    want = _reference_forward(p, cfg, ids)
    assert np.abs(got - want).max() < 1e-10


def test_loss_near_log_vocab_at_init(params, batch):
    inputs, targets = batch
    loss, _ = loss_and_grads(params, CFG, inputs, targets, pad_id=-1)
    assert abs(loss - math.log(CFG.vocab_size)) / math.log(CFG.vocab_size) < 0.05


def test_all_positions_masked(params):
    with pytest.raises(AllPositionsMasked):
        loss_and_grads(params, CFG, np.zeros((1, 4), dtype=int),
                       np.zeros((1, 4), dtype=int), pad_id=0)


def test_pad_positions_do_not_affect_loss(params):
    rng = np.random.default_rng(4)
    a = rng.integers(1, CFG.vocab_size, (1, 8))
    ta = np.roll(a, -1); ta[:, -1] = 0
    b = np.concatenate([a, np.zeros((1, 4), dtype=int)], axis=1)
    tb = np.concatenate([ta, np.zeros((1, 4), dtype=int)], axis=1)
    la, _ = loss_and_grads(params, CFG, a, ta, pad_id=0)
    lb, _ = loss_and_grads(params, CFG, b, tb, pad_id=0)
    assert la == pytest.approx(lb, abs=1e-12)


def test_batch_permutation_loss_invariance(params):
    rng = np.random.default_rng(5)
    inputs = rng.integers(1, CFG.vocab_size, (6, 9))
    targets = np.roll(inputs, -1, axis=1)
    targets[:, -1] = 0
    perm = rng.permutation(6)
    l1, _ = loss_and_grads(params, CFG, inputs, targets)
    l2, _ = loss_and_grads(params, CFG, inputs[perm], targets[perm])
    assert abs(l1 - l2) < 1e-10       # fsum makes this exact in practice


def test_gradients_match_finite_differences(params, batch):
    inputs, targets = batch
    _, grads = loss_and_grads(params, CFG, inputs, targets)
    rng = np.random.default_rng(12)
    eps = 1e-4
    for name, p in params.items():
        flat = p.reshape(-1)
        for i in rng.choice(flat.size, size=min(8, flat.size), replace=False):
            keep = flat[i]
            flat[i] = keep + eps
            lp, _ = loss_and_grads(params, CFG, inputs, targets)
            flat[i] = keep - eps
            lm, _ = loss_and_grads(params, CFG, inputs, targets)
            flat[i] = keep
            fd = (lp - lm) / (2 * eps)
            an = grads[name].reshape(-1)[i]
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-4)
            assert rel < 1e-4, f"{name}[{i}]: analytic {an} vs fd {fd}"


def test_adamw_moments_and_decay():
    cfg = ModelConfig(vocab_size=5, context_len=8, d_model=8, n_heads=2,
                      n_layers=1)
    p = init_params(cfg)
    state = AdamState.for_params(p)
    grads = {k: np.ones_like(v) for k, v in p.items()}
    before = p["l0.wq"].copy()
    adamw_step(p, grads, state, lr=0.1, weight_decay=0.1)
    assert state.t == 1
    assert not np.array_equal(p["l0.wq"], before)
    assert state.m["l0.wq"].shape == p["l0.wq"].shape


def test_split_corpus_fractions_and_stability():
    corpus = [TokenSequence([1, 2], None, f"p{i}") for i in range(4000)]
    tr, va, te = split_corpus(corpus, seed=0)
    assert len(tr) + len(va) + len(te) == 4000
    assert 0.93 < len(tr) / 4000 < 0.97
    assert split_fraction("p17", 0) == split_fraction("p17", 0)
    assert split_fraction("p17", 0) != split_fraction("p17", 1)
    tr2, _, _ = split_corpus(list(reversed(corpus)), seed=0)
    assert {s.patient_id for s in tr} == {s.patient_id for s in tr2}


def _memorization_corpus():
    seq = [1, 5, 9, 7, 5, 9, 11, 4, 2]
    return [TokenSequence(list(seq), None, f"p{i}") for i in range(300)]


def test_train_memorizes_repeated_sequence():
    cfg = ModelConfig(vocab_size=16, context_len=16, d_model=32, n_heads=2,
                      n_layers=2, n_steps=400, batch_size=16,
                      learning_rate=3e-3, seed=1, eval_every=50)
    res = train(_memorization_corpus(), cfg)
    assert res.best_val_loss < 0.05
    # training loss decreases: final 10%-window mean < first 10%-window mean
    losses = [h[1] for h in res.history]
    k = max(1, len(losses) // 10)
    assert np.mean(losses[-k:]) < np.mean(losses[:k])


def test_train_deterministic():
    cfg = ModelConfig(vocab_size=16, context_len=16, d_model=16, n_heads=2,
                      n_layers=1, n_steps=40, batch_size=8,
                      learning_rate=1e-3, seed=7, eval_every=10)
    r1 = train(_memorization_corpus(), cfg)
    r2 = train(_memorization_corpus(), cfg)
    assert r1.history == r2.history
    assert all(np.array_equal(r1.params[k], r2.params[k]) for k in r1.params)


def test_train_errors():
    cfg = ModelConfig(vocab_size=16, context_len=16, d_model=16, n_heads=2,
                      n_layers=1, n_steps=5)
    with pytest.raises(EmptyCorpus):
        train([], cfg)
    with pytest.raises(SequenceTooLong):
        train([TokenSequence(list(range(1, 3)) * 12, None, "p0")], cfg)


def test_history_csv(tmp_path):
    cfg = ModelConfig(vocab_size=16, context_len=16, d_model=16, n_heads=2,
                      n_layers=1, n_steps=6, batch_size=4, eval_every=3)
    res = train(_memorization_corpus(), cfg)
    path = tmp_path / "loss.csv"
    res.save_history(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,train_loss,val_loss"
    assert len(lines) == 7


# -- sampling -----------------------------------------------------------------

def test_select_tokens_argmax_and_ties():
    logits = np.array([[1.0, 3.0, 3.0, 0.0]])
    assert select_tokens(logits, np.array([0.5]), 0.0, 0)[0] == 1  # smallest id
    assert select_tokens(logits, np.array([0.5]), 1.7, 1)[0] == 1  # top_k=1


def test_select_tokens_top_k_restricts():
    logits = np.array([[0.0, 10.0, 9.0, 8.0]])
    picks = {int(select_tokens(logits, np.array([u]), 5.0, 2)[0])
             for u in np.linspace(0.001, 0.999, 200)}
    assert picks <= {1, 2}


def test_select_tokens_frequencies_match_softmax():
    logits = np.array([2.0, 1.0, 0.0])
    z = np.exp(logits - logits.max())
    probs = z / z.sum()
    rng = np.random.default_rng(8)
    n = 100_000
    u = rng.random(n)
    picks = select_tokens(np.tile(logits, (n, 1)), u, 1.0, 0)
    for k in range(3):
        p_hat = (picks == k).mean()
        assert abs(p_hat - probs[k]) < 3 * math.sqrt(probs[k] * (1 - probs[k]) / n)


def test_sample_next_contract(params):
    prefix = np.array([1, 2, 3])
    t0 = sample_next(params, CFG, prefix, temperature=0.0)
    assert t0 == int(forward(params, CFG, prefix)[-1].argmax())
    assert sample_next(params, CFG, prefix, temperature=2.0, top_k=1) == t0
    with pytest.raises(PrefixTooLong):
        sample_next(params, CFG, np.zeros(17, dtype=int), temperature=0.0)
    dist = next_token_distribution(params, CFG, prefix)
    assert dist.sum() == pytest.approx(1.0, abs=1e-12)


# -- incremental decoder -------------------------------------------------------

def test_decoder_matches_full_forward(params):
    dec = TransformerDecoder(params, CFG)
    prompt = [1, 4, 7]
    st = dec.start(prompt, 2)
    seqs = [list(prompt), list(prompt)]
    rng = np.random.default_rng(3)
    for _ in range(6):
        for row in range(2):
            want = forward(params, CFG, np.array(seqs[row]))[-1]
            assert np.abs(st.next_logits[row] - want).max() < 1e-12
        toks = rng.integers(0, CFG.vocab_size, 2)
        dec.advance(st, toks)
        for row in range(2):
            seqs[row].append(int(toks[row]))


def test_decoder_context_guard(params):
    dec = TransformerDecoder(params, CFG)
    with pytest.raises(PrefixTooLong):
        dec.start([], 1)
    with pytest.raises(PrefixTooLong):
        dec.start(list(range(1, 2)) * 17, 1)
    st = dec.start([1] * 16, 1)
    with pytest.raises(SequenceTooLong):
        dec.advance(st, np.array([1]))


# -- checkpoints ---------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, params):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, CFG)
    loaded, cfg = load_checkpoint(path)
    assert cfg == CFG
    assert all(np.array_equal(loaded[k], params[k]) for k in params)
    save_checkpoint(tmp_path / "m2.ckpt", loaded, cfg)
    assert (tmp_path / "m2.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_truncated(tmp_path, params):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, CFG)
    data = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(data[:-16])
    with pytest.raises(Exception):
        load_checkpoint(tmp_path / "bad.ckpt")
