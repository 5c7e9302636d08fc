"""Character-level recurrent language model over a unit inventory.

The model is causal (a single forward LSTM), so it can score prefixes
incrementally during beam search: ``start``/``step`` carry cached hidden
state and return the next-unit log-probabilities in O(1) per extension.
The softmax head starts at exactly zero, making an untrained model score
every unit uniformly.
"""

from __future__ import annotations

import numpy as np

from .kernels import Rng, log_softmax_rows, resolve_dtype, sigmoid
from .layers import Dense, LstmDirection, SeqBatch
from .optim import NesterovSgd, StallSchedule


class CharLm:
    """Next-unit LSTM LM; inputs are one-hot unit ids plus a start symbol."""

    KIND = "charlm"

    def __init__(self, n_units, hidden, rng=None, dtype="float64"):
        rng = rng or Rng(0)
        dt = resolve_dtype(dtype) if isinstance(dtype, str) else dtype
        self.n_units = int(n_units)
        self.hidden = int(hidden)
        self.dtype = dt
        self.rnn = LstmDirection("lm.rnn", self.n_units + 1, hidden, rng, dt)
        self.head = Dense("lm.head", hidden, self.n_units, rng, dt, zero_init=True)

    @property
    def bos(self):
        return self.n_units  # extra one-hot slot for the start of sequence

    def params(self):
        return self.rnn.params() + self.head.params()

    # -- batched training path ------------------------------------------------

    def _one_hot_inputs(self, seqs, max_len):
        b = len(seqs)
        x = np.zeros((max_len, b, self.n_units + 1), dtype=self.dtype)
        for j, s in enumerate(seqs):
            x[0, j, self.bos] = 1.0
            for t, u in enumerate(s[:-1]):
                x[t + 1, j, u] = 1.0
        return x

    def sequence_nll(self, seqs):
        """Total negative log-likelihood and unit count over id sequences."""
        loss, count, _ = self._forward_nll(seqs)
        return loss, count

    def _forward_nll(self, seqs, with_cache=False):
        lengths = np.array([len(s) for s in seqs], dtype=np.int64)
        T = int(lengths.max())
        x = self._one_hot_inputs(seqs, T)
        h, cache_rnn = self.rnn.forward(x, lengths)
        logits, cache_head = self.head.forward(h)
        logp = log_softmax_rows(logits)
        nll = 0.0
        for j, s in enumerate(seqs):
            nll -= float(logp[np.arange(len(s)), j, s].sum())
        count = int(lengths.sum())
        if with_cache:
            return nll, count, (logp, lengths, cache_rnn, cache_head, seqs)
        return nll, count, None

    def train_step_grads(self, seqs):
        """Total NLL, unit count; gradients of the per-unit mean accumulate
        into the params."""
        nll, count, cache = self._forward_nll(seqs, with_cache=True)
        logp, lengths, cache_rnn, cache_head, _ = cache
        dlogits = np.exp(logp)
        for j, s in enumerate(seqs):
            dlogits[np.arange(len(s)), j, s] -= 1.0
            dlogits[len(s):, j, :] = 0.0
        dlogits /= count
        dh = self.head.backward(dlogits, cache_head)
        self.rnn.backward(dh, cache_rnn)
        return nll, count

    # -- incremental scoring path ----------------------------------------------

    def _cell(self, x, h, c):
        w = np.concatenate([self.rnn.w[g].value for g in "ifog"], axis=1)
        u = np.concatenate([self.rnn.u[g].value for g in "ifog"], axis=1)
        b = np.concatenate([self.rnn.b[g].value for g in "ifog"])
        pre = x @ w + h @ u + b
        H = self.hidden
        i = sigmoid(pre[:H])
        f = sigmoid(pre[H : 2 * H])
        o = sigmoid(pre[2 * H : 3 * H])
        g = np.tanh(pre[3 * H :])
        c_new = f * c + i * g
        h_new = o * np.tanh(c_new)
        return h_new, c_new

    def _advance(self, state, unit_slot):
        h, c = state
        x = np.zeros(self.n_units + 1, dtype=self.dtype)
        x[unit_slot] = 1.0
        h, c = self._cell(x, h, c)
        logits, _ = self.head.forward(h[None, :])
        lp = log_softmax_rows(logits)[0]
        return (h, c), lp

    def start(self):
        """State after the start symbol, with next-unit log-probs."""
        zeros = np.zeros(self.hidden, dtype=self.dtype)
        return self._advance((zeros, zeros), self.bos)

    def step(self, state, unit):
        if not 0 <= unit < self.n_units:
            raise ValueError(f"unit {unit} outside inventory of size {self.n_units}")
        return self._advance(state, unit)


def lm_logprob(lm, units):
    """Sum of log p(u_t | u_<t); the empty prefix scores 0."""
    total = 0.0
    state, lp = lm.start()
    for u in units:
        if not 0 <= u < lm.n_units:
            raise ValueError(f"unit {u} outside inventory of size {lm.n_units}")
        total += float(lp[u])
        state, lp = lm.step(state, u)
    return total


def perplexity(lm, seqs):
    nll, count = lm.sequence_nll(seqs)
    return float(np.exp(nll / max(1, count)))


def train_lm(train_seqs, n_units, hidden, config, heldout_seqs=None, rng=None, log=None):
    """Cross-entropy training; returns the model and per-epoch records."""
    if not train_seqs:
        raise ValueError("empty training corpus")
    rng = rng or Rng(config.seed)
    lm = CharLm(n_units, hidden, rng.derive("lm.init"), config.dtype)
    if heldout_seqs is None:
        n_held = max(1, len(train_seqs) // 10)
        heldout_seqs = train_seqs[-n_held:]
        train_seqs = train_seqs[:-n_held] or heldout_seqs
    opt = NesterovSgd(lm.params(), config.lm_lr, config.momentum, config.clip_norm)
    sched = StallSchedule(config.lm_lr, config.lr_decay, config.lr_patience)
    shuffle = rng.derive("lm.shuffle").stream("order")
    records = []
    for epoch in range(1, config.lm_epochs + 1):
        order = shuffle.permutation(len(train_seqs))
        total, count = 0.0, 0
        for lo in range(0, len(order), config.batch_size):
            batch = [train_seqs[i] for i in order[lo : lo + config.batch_size]]
            opt.zero_grads()
            nll, n = lm.train_step_grads(batch)
            opt.step()
            total += nll
            count += n
        held_nll, held_n = lm.sequence_nll(heldout_seqs)
        rec = {
            "epoch": epoch,
            "train_loss": total / max(1, count),
            "heldout_loss": held_nll / max(1, held_n),
            "heldout_ppl": float(np.exp(held_nll / max(1, held_n))),
        }
        records.append(rec)
        if log is not None:
            log(rec)
        opt.lr = sched.update(rec["heldout_loss"])
    return lm, records
