import math

import numpy as np
import pytest

from medseq.vocab import CodeSystem, EOS_ID, build_vocab
from medseq.synth import default_spec, spec_code_lists

NEG = -1e30


@pytest.fixture(scope="session")
def default_vocab():
    return build_vocab(spec_code_lists(default_spec()))


@pytest.fixture(scope="session")
def tiny_vocab():
    """Two single-token diagnosis codes, for hand-built decoders."""
    return build_vocab({CodeSystem.ICD10CM: ["Z00", "I10"]})


class BigramDecoder:
    """Hand-built monthly automaton over a real vocabulary.

    Each month emits a dx slot (healthy w.p. 1-p, sick w.p. p; sick is
    absorbing), a cost token while sick, then a gap token; after `months`
    months it emits EOS. Exact chain probabilities are enumerable, which
    makes it the oracle model for the Monte Carlo engine.
    """

    context_len = 200

    def __init__(self, vocab, p_sick=0.3, months=12,
                 cost_surface="COST:B6", gap_surface="GAP:D15_30"):
        self.p = p_sick
        self.months = months
        self.h_dx = vocab.id_of("DX:Z00")
        self.s_dx = vocab.id_of("DX:I10")
        self.cost = vocab.id_of(cost_surface)
        self.gap = vocab.id_of(gap_surface)
        self.vocab_size = len(vocab)

    class _State:
        __slots__ = ("sick", "month", "slot", "n_rows", "next_logits")

    def start(self, prompt, n_rows):
        st = self._State()
        st.sick = np.zeros(n_rows, dtype=bool)
        st.month = np.zeros(n_rows, dtype=int)
        st.slot = ["dx"] * n_rows
        st.n_rows = n_rows
        st.next_logits = self._logits(st)
        return st

    def _logits(self, st):
        out = np.full((st.n_rows, self.vocab_size), NEG)
        for i in range(st.n_rows):
            if st.slot[i] == "dx":
                if st.month[i] >= self.months:
                    out[i, EOS_ID] = 0.0
                elif st.sick[i]:
                    out[i, self.s_dx] = 0.0
                else:
                    out[i, self.h_dx] = math.log(1.0 - self.p)
                    out[i, self.s_dx] = math.log(self.p)
            elif st.slot[i] == "cost":
                out[i, self.cost] = 0.0
            else:
                out[i, self.gap] = 0.0
        return out

    def advance(self, st, tokens):
        for i, t in enumerate(np.asarray(tokens)):
            t = int(t)
            if st.slot[i] == "dx":
                if t == self.s_dx:
                    st.sick[i] = True
                    st.slot[i] = "cost"
                elif t == self.h_dx:
                    st.slot[i] = "gap"
            elif st.slot[i] == "cost":
                st.slot[i] = "gap"
            else:
                st.month[i] += 1
                st.slot[i] = "dx"
        st.next_logits = self._logits(st)


class ScriptedDecoder:
    """Replays a fixed continuation for each known prompt.

    Logits are one-hot on the scripted token, so any temperature samples
    the script deterministically. Used as the oracle "model" in pipeline
    upper-bound tests.
    """

    def __init__(self, scripts: dict, vocab_size: int, context_len: int = 512):
        self.scripts = {tuple(k): list(v) for k, v in scripts.items()}
        self.vocab_size = vocab_size
        self.context_len = context_len

    class _State:
        __slots__ = ("tails", "pos", "n_rows", "next_logits")

    def start(self, prompt, n_rows):
        tail = self.scripts.get(tuple(prompt))
        if tail is None:
            tail = [EOS_ID]
        st = self._State()
        st.tails = [list(tail) for _ in range(n_rows)]
        st.pos = [0] * n_rows
        st.n_rows = n_rows
        st.next_logits = self._logits(st)
        return st

    def _logits(self, st):
        out = np.full((st.n_rows, self.vocab_size), NEG)
        for i in range(st.n_rows):
            tail = st.tails[i]
            t = tail[st.pos[i]] if st.pos[i] < len(tail) else EOS_ID
            out[i, t] = 0.0
        return out

    def advance(self, st, tokens):
        for i in range(st.n_rows):
            st.pos[i] += 1
        st.next_logits = self._logits(st)


@pytest.fixture
def bigram_decoder(tiny_vocab):
    return BigramDecoder(tiny_vocab)
