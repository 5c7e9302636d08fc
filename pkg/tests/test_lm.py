"""Character LM: uniform init, incremental scoring, trainability."""

import math

import numpy as np
import pytest

from mlctc.config import Config
from mlctc.kernels import Rng
from mlctc.lm import CharLm, lm_logprob, perplexity, train_lm


class TestScoring:
    def test_empty_prefix_scores_zero(self):
        lm = CharLm(4, 8, Rng(0))
        assert lm_logprob(lm, []) == 0.0

    def test_untrained_model_is_uniform(self):
        lm = CharLm(4, 8, Rng(0))
        got = lm_logprob(lm, [2, 0, 3])
        assert abs(got - 3 * math.log(1 / 4)) < 1e-12

    def test_chain_rule_is_exact(self):
        lm = CharLm(5, 8, Rng(1))
        # give the model non-trivial weights so the check is not vacuous
        for p in lm.head.params():
            p.value[...] = Rng(2).uniform(p.name, -0.5, 0.5, p.value.shape)
        prefix = [1, 4, 2]
        full = lm_logprob(lm, prefix + [3])
        state, lp = lm.start()
        for u in prefix:
            state, lp = lm.step(state, u)
        increment = float(lp[3])
        assert abs(full - (lm_logprob(lm, prefix) + increment)) < 1e-12

    def test_incremental_matches_batched_evaluation(self):
        lm = CharLm(4, 8, Rng(3))
        for p in lm.head.params():
            p.value[...] = Rng(4).uniform(p.name, -0.5, 0.5, p.value.shape)
        seq = [0, 2, 1, 3, 3, 0]
        nll, count = lm.sequence_nll([seq])
        assert count == len(seq)
        assert abs(-nll - lm_logprob(lm, seq)) < 1e-12

    def test_oov_unit_rejected(self):
        lm = CharLm(4, 8, Rng(0))
        with pytest.raises(ValueError):
            lm_logprob(lm, [4])
        with pytest.raises(ValueError):
            lm.step(lm.start()[0], 7)


class TestTraining:
    def test_repeated_pattern_reaches_tiny_perplexity(self):
        cfg = Config(lm_epochs=30, lm_lr=0.5, batch_size=16)
        seqs = [[0, 1] * 8 for _ in range(32)]
        lm, recs = train_lm(seqs, n_units=2, hidden=12, config=cfg,
                            heldout_seqs=[[0, 1] * 8], rng=Rng(5))
        assert recs[-1]["heldout_ppl"] <= 1.1

    def test_zero_lr_leaves_perplexity_at_init(self):
        cfg = Config(lm_epochs=2, lm_lr=0.0)
        seqs = [[0, 1, 2] for _ in range(8)]
        held = [[2, 1, 0]]
        before = perplexity(CharLm(3, 8, Rng(6)), held)
        lm, recs = train_lm(seqs, n_units=3, hidden=8, config=cfg,
                            heldout_seqs=held, rng=Rng(6))
        assert recs[-1]["heldout_ppl"] == pytest.approx(before, abs=1e-9)
        assert before == pytest.approx(3.0, abs=1e-9)  # uniform over 3 units

    def test_beats_uniform_on_structured_text(self):
        cfg = Config(lm_epochs=10, lm_lr=0.3, batch_size=8)
        rng = np.random.default_rng(0)
        seqs = [([0, 1, 2, 3] * 5)[: rng.integers(8, 20)] for _ in range(40)]
        lm, recs = train_lm(seqs, n_units=4, hidden=12, config=cfg, rng=Rng(7))
        assert recs[-1]["heldout_ppl"] < 4.0

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            train_lm([], n_units=3, hidden=4, config=Config())

    def test_gradients_match_finite_differences(self):
        from helpers import check_layer_grads

        lm = CharLm(3, 4, Rng(8))
        seqs = [[0, 2, 1], [1, 1]]

        def compute():
            nll, count = lm.train_step_grads(seqs)
            return nll / count

        check_layer_grads(lm.params(), compute, tol=1e-4)
