"""Language identifier, vector extraction, tiling, and code-net pretraining."""

import numpy as np
import pytest

from mlctc.config import Config
from mlctc.corpus import generate_corpus, pad_features
from mlctc.kernels import Rng
from mlctc.langcodes import (
    CodeNet,
    LidNet,
    NotTrainedError,
    emit_nlc,
    extract_lfv,
    pretrain_code_net,
    stack_lfv,
    train_lid,
)
from mlctc.layers import SeqBatch


def tiny_corpus(seed=11, langs=2, **kw):
    args = dict(languages=langs, train_utts=24, test_utts=8, feat_dim=12,
                phone_count=6, alphabet_size=4, utt_min_units=6, utt_max_units=10,
                min_frames=12, lid_epochs=6, lid_frames_per_lang=1200)
    args.update(kw)
    cfg = Config(**args)
    return cfg, generate_corpus(cfg, Rng(seed))


class TestTrainLid:
    def test_separable_languages_reach_90_percent(self):
        cfg, corpus = tiny_corpus()
        lid, recs = train_lid(corpus, cfg, Rng(1))
        assert recs[-1]["heldout_acc"] >= 0.9

    def test_zero_lr_leaves_parameters_unchanged(self):
        cfg, corpus = tiny_corpus(lid_lr=0.0, lid_epochs=2)
        ref = LidNet(corpus.feat_dim, cfg.lid_hidden, cfg.lfv_dim, 2,
                     Rng(1).derive("lid.init"), cfg.dtype)
        lid, _ = train_lid(corpus, cfg, Rng(1))
        for a, b in zip(ref.params(), lid.params()):
            assert np.array_equal(a.value, b.value)

    def test_four_languages_beat_chance(self):
        cfg, corpus = tiny_corpus(seed=7, langs=4, feat_dim=16, lid_epochs=4)
        lid, recs = train_lid(corpus, cfg, Rng(7))
        assert recs[-1]["heldout_acc"] > 0.25

    def test_single_language_rejected(self):
        cfg, corpus = tiny_corpus(langs=1)
        with pytest.raises(ValueError, match="two languages"):
            train_lid(corpus, cfg, Rng(0))


class TestExtract:
    def _trained(self):
        cfg, corpus = tiny_corpus()
        lid, _ = train_lid(corpus, cfg, Rng(2))
        return cfg, corpus, lid

    def test_untrained_extractor_rejected(self):
        lid = LidNet(8, 8, 4, 2, Rng(0))
        with pytest.raises(NotTrainedError):
            extract_lfv(lid, SeqBatch(np.zeros((3, 1, 8)), np.array([3])))

    def test_output_width_and_padding(self):
        cfg, corpus, lid = self._trained()
        sb = pad_features(corpus.utterances("test")[:3], np.float64)
        lv = extract_lfv(lid, sb)
        assert lv.data.shape == (sb.frames, 3, cfg.lfv_dim)
        mask = sb.mask()
        assert np.array_equal(lv.data * mask, lv.data)

    def test_identical_frames_give_identical_vectors(self):
        cfg, corpus, lid = self._trained()
        frame = corpus.utterances("test")[0].features[0].astype(np.float64)
        batch = np.stack([frame, frame])
        out = lid.language_vectors(batch)
        assert np.array_equal(out[0], out[1])

    def test_frame_permutation_equivariance(self):
        cfg, corpus, lid = self._trained()
        utt = corpus.utterances("test")[0]
        frames = utt.features.astype(np.float64)
        perm = np.random.default_rng(0).permutation(frames.shape[0])
        assert np.allclose(
            lid.language_vectors(frames)[perm], lid.language_vectors(frames[perm]),
            atol=1e-15,
        )

    def test_language_vectors_separate_language_means(self):
        cfg, corpus, lid = self._trained()
        names = sorted(corpus.languages)
        means, spreads = [], []
        for name in names:
            frames = np.concatenate(
                [u.features for u in corpus.by_language("test", name)]
            ).astype(np.float64)
            lv = lid.language_vectors(frames)
            means.append(lv.mean(axis=0))
            spreads.append(lv.std(axis=0))
        direction = means[0] - means[1]
        direction /= np.linalg.norm(direction)
        gap = abs(float((means[0] - means[1]) @ direction))
        pooled = float(np.sqrt(0.5 * (spreads[0] ** 2 + spreads[1] ** 2) @ direction ** 2))
        assert gap >= 2.0 * pooled


class TestStack:
    def test_tiles_k_copies(self):
        lv = SeqBatch(np.arange(12.0).reshape(3, 1, 4), np.array([3]))
        out = stack_lfv(lv, 12)
        assert out.data.shape == (3, 1, 12)
        assert np.array_equal(out.data[..., :4], lv.data)
        assert np.array_equal(out.data[..., 4:8], lv.data)

    def test_k_equal_one_is_identity(self):
        lv = SeqBatch(np.random.default_rng(0).standard_normal((2, 2, 4)), np.array([2, 2]))
        assert np.array_equal(stack_lfv(lv, 4).data, lv.data)

    def test_indivisible_width_rejected(self):
        lv = SeqBatch(np.zeros((2, 1, 4)), np.array([2]))
        with pytest.raises(ValueError, match="multiple"):
            stack_lfv(lv, 10)

    def test_tile_average_recovers_original(self):
        lv = SeqBatch(np.random.default_rng(1).standard_normal((3, 2, 4)), np.array([3, 3]))
        tiled = stack_lfv(lv, 20).data.reshape(3, 2, 5, 4)
        # every tile is a bitwise copy, so averaging them is exact recovery
        for k in range(5):
            assert np.array_equal(tiled[:, :, k, :], lv.data)
        assert np.allclose(tiled.mean(axis=2), lv.data, atol=1e-15)


class TestCodeNet:
    def _setup(self, **kw):
        cfg, corpus = tiny_corpus(lfv_dim=4, main_width=8, **kw)
        lid, _ = train_lid(corpus, cfg, Rng(3))
        net = CodeNet(cfg.feat_dim, cfg.lfv_dim, cfg.main_width,
                      Rng(4).derive("nlc.init"), cfg.dtype)
        return cfg, corpus, lid, net

    def test_pretraining_beats_mean_predictor(self):
        cfg, corpus, lid, net = self._setup(nlc_epochs=6, batch_size=8)
        recs = pretrain_code_net(net, lid, corpus.utterances("train"),
                                 corpus.utterances("test"), cfg, Rng(5))
        assert recs[-1]["heldout_loss"] < recs[-1]["mean_predictor_loss"]
        assert recs[0]["train_loss"] > recs[-1]["train_loss"]

    def test_zero_lr_keeps_mse(self):
        cfg, corpus, lid, net = self._setup(nlc_epochs=2, nlc_lr=0.0)
        recs = pretrain_code_net(net, lid, corpus.utterances("train"),
                                 corpus.utterances("test"), cfg, Rng(5))
        assert recs[0]["heldout_loss"] == pytest.approx(recs[-1]["heldout_loss"], rel=1e-12)

    def test_emit_shape_matches_frames(self):
        cfg, corpus, lid, net = self._setup()
        net.pretrained = True
        sb = pad_features(corpus.utterances("test")[:2], np.float64)
        lv = extract_lfv(lid, sb)
        codes = emit_nlc(net, sb, lv)
        assert codes.data.shape == (sb.frames, 2, cfg.main_width)
        assert np.array_equal(codes.lengths, sb.lengths)

    def test_width_mismatch_rejected(self):
        cfg, corpus, lid, net = self._setup()
        sb = pad_features(corpus.utterances("test")[:2], np.float64)
        bad_lv = SeqBatch(np.zeros((sb.frames, 2, 3)), sb.lengths)
        with pytest.raises(ValueError):
            net.forward(sb, bad_lv)

    def test_gradients_through_both_inputs(self):
        from helpers import check_layer_grads

        net = CodeNet(3, 2, 4, Rng(9))
        rng = np.random.default_rng(0)
        feats = SeqBatch(rng.standard_normal((4, 2, 3)), np.array([4, 3]))
        feats = feats.with_data(feats.data * feats.mask())
        lv = SeqBatch(rng.standard_normal((4, 2, 2)) * feats.mask(), np.array([4, 3]))
        w = rng.standard_normal((4, 2, 4)) * feats.mask()

        def compute():
            codes, cache = net.forward(feats, lv, with_cache=True)
            net.backward(w, cache)
            return float((w * codes.data).sum())

        check_layer_grads(net.params(), compute, tol=1e-4, max_coords=40)
