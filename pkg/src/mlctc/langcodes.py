"""Language vectors and modulation-coefficient production.

A frame-level feedforward language identifier with a narrow bottleneck
supplies per-frame language vectors (its bottleneck activations). Tiling
those vectors to a layer's width gives fixed "stacked" coefficients; the
recurrent code network is pretrained to regress exactly that stacking from
acoustic features plus language vectors, and later adapts freely when the
assembled system is trained jointly.
"""

from __future__ import annotations

import numpy as np

from .kernels import Rng, log_softmax_rows, resolve_dtype, softmax_rows
from .layers import BiLstm, Dense, SeqBatch
from .optim import NesterovSgd, StallSchedule


class NotTrainedError(RuntimeError):
    pass


class LidNet:
    """Frame-level language identifier with a bottleneck second-to-last
    hidden layer; the bottleneck activations are the language vectors."""

    KIND = "lid"

    def __init__(self, feat_dim, hidden, bottleneck, n_langs, rng=None, dtype="float64"):
        rng = rng or Rng(0)
        dt = resolve_dtype(dtype) if isinstance(dtype, str) else dtype
        self.feat_dim = feat_dim
        self.hidden = hidden
        self.bottleneck = bottleneck
        self.n_langs = n_langs
        self.dtype = dt
        self.enc1 = Dense("lid.enc1", feat_dim, hidden, rng, dt)
        self.enc2 = Dense("lid.enc2", hidden, hidden, rng, dt)
        self.bott = Dense("lid.bott", hidden, bottleneck, rng, dt)
        self.post = Dense("lid.post", bottleneck, hidden, rng, dt)
        self.head = Dense("lid.head", hidden, n_langs, rng, dt)
        self.trained = False

    def params(self):
        return (
            self.enc1.params() + self.enc2.params() + self.bott.params()
            + self.post.params() + self.head.params()
        )

    def _forward(self, x):
        caches = []
        acts = [x]
        h = x
        for layer in (self.enc1, self.enc2, self.bott, self.post):
            z, cache = layer.forward(h)
            h = np.tanh(z)
            caches.append((cache, h))
            acts.append(h)
        logits, head_cache = self.head.forward(h)
        return logits, (caches, head_cache, acts)

    def logits(self, frames):
        out, _ = self._forward(np.asarray(frames, dtype=self.dtype))
        return out

    def train_step_grads(self, frames, labels):
        """Mean cross-entropy and gradients for one frame minibatch."""
        logits, (caches, head_cache, _) = self._forward(frames)
        logp = log_softmax_rows(logits)
        n = frames.shape[0]
        loss = -float(logp[np.arange(n), labels].sum()) / n
        dlogits = np.exp(logp)
        dlogits[np.arange(n), labels] -= 1.0
        dlogits /= n
        dh = self.head.backward(dlogits, head_cache)
        for layer, (cache, tanh_out) in zip(
            (self.post, self.bott, self.enc2, self.enc1), reversed(caches)
        ):
            dh = layer.backward(dh * (1.0 - tanh_out * tanh_out), cache)
        return loss

    def language_vectors(self, frames):
        """Per-frame bottleneck activations (deterministic, frame-local)."""
        if not self.trained:
            raise NotTrainedError("language identifier has not been trained")
        h = np.asarray(frames, dtype=self.dtype)
        for layer in (self.enc1, self.enc2, self.bott):
            z, _ = layer.forward(h)
            h = np.tanh(z)
        return h

    def accuracy(self, frames, labels):
        pred = np.argmax(self.logits(frames), axis=1)
        return float(np.mean(pred == labels))


def frame_dataset(utts, lang_order, per_lang, stream):
    """Deterministic frame subsample: (frames, labels) over the languages."""
    xs, ys = [], []
    for li, name in enumerate(lang_order):
        frames = np.concatenate([u.features for u in utts if u.lang == name])
        take = min(per_lang, frames.shape[0])
        idx = stream.choice(frames.shape[0], size=take, replace=False)
        xs.append(frames[idx])
        ys.append(np.full(take, li, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys)


def train_lid(corpus, config, rng: Rng, log=None):
    """Cross-entropy training of the language identifier on single frames."""
    lang_order = sorted(corpus.languages)
    if len(lang_order) < 2:
        raise ValueError("language identification needs at least two languages")
    net = LidNet(
        corpus.feat_dim, config.lid_hidden, config.lfv_dim, len(lang_order),
        rng.derive("lid.init"), config.dtype,
    )
    data_stream = rng.derive("lid.data").stream("frames")
    x_tr, y_tr = frame_dataset(corpus.utterances("train"), lang_order, config.lid_frames_per_lang, data_stream)
    x_te, y_te = frame_dataset(corpus.utterances("test"), lang_order, 2000, data_stream)
    x_tr = x_tr.astype(net.dtype)
    x_te = x_te.astype(net.dtype)
    opt = NesterovSgd(net.params(), config.lid_lr, config.momentum, config.clip_norm)
    shuffle = rng.derive("lid.shuffle").stream("order")
    records = []
    batch = 256
    for epoch in range(1, config.lid_epochs + 1):
        order = shuffle.permutation(x_tr.shape[0])
        total = 0.0
        for lo in range(0, len(order), batch):
            sel = order[lo : lo + batch]
            opt.zero_grads()
            total += net.train_step_grads(x_tr[sel], y_tr[sel]) * len(sel)
            opt.step()
        net.trained = True
        rec = {
            "epoch": epoch,
            "train_loss": total / x_tr.shape[0],
            "heldout_acc": net.accuracy(x_te, y_te),
        }
        records.append(rec)
        if log is not None:
            log(rec)
    net.lang_order = lang_order
    return net, records


def extract_lfv(lid: LidNet, features: SeqBatch):
    """Per-frame language vectors for a padded batch; padding stays zero."""
    t, b, d = features.data.shape
    flat = lid.language_vectors(features.data.reshape(t * b, d))
    lv = flat.reshape(t, b, lid.bottleneck) * features.mask(lid.dtype)
    return features.with_data(lv)


def stack_lfv(lv: SeqBatch, width):
    """Tile each frame's language vector to ``width`` (width % d must be 0)."""
    d = lv.dim
    if width % d != 0:
        raise ValueError(f"cannot stack width-{d} vectors to {width}: not a multiple")
    return lv.with_data(np.tile(lv.data, (1, 1, width // d)))


class CodeNet:
    """Two summed-direction BiLSTM layers over [features; language vector]
    with a linear head of the modulation width."""

    KIND = "nlc"

    def __init__(self, feat_dim, lfv_dim, width, rng=None, dtype="float64"):
        rng = rng or Rng(0)
        dt = resolve_dtype(dtype) if isinstance(dtype, str) else dtype
        self.feat_dim = feat_dim
        self.lfv_dim = lfv_dim
        self.width = width
        self.dtype = dt
        self.rnn1 = BiLstm("nlc.rnn1", feat_dim + lfv_dim, width, "pairwise_sum", rng, dt)
        self.rnn2 = BiLstm("nlc.rnn2", width, width, "pairwise_sum", rng, dt)
        self.out = Dense("nlc.out", width, width, rng, dt)
        self.pretrained = False

    def params(self):
        return self.rnn1.params() + self.rnn2.params() + self.out.params()

    def forward(self, features: SeqBatch, lv: SeqBatch, with_cache=False):
        if lv.dim != self.lfv_dim or features.dim != self.feat_dim:
            raise ValueError(
                f"code net expects dims ({self.feat_dim}, {self.lfv_dim}), "
                f"got ({features.dim}, {lv.dim})"
            )
        x = features.with_data(np.concatenate([features.data, lv.data], axis=-1))
        h1, c1 = self.rnn1.forward(x)
        h2, c2 = self.rnn2.forward(h1)
        z, c3 = self.out.forward(h2.data)
        mask = features.mask(z.dtype)
        codes = features.with_data(z * mask)
        if with_cache:
            return codes, (c1, c2, c3, mask)
        return codes

    def backward(self, dcodes, cache):
        c1, c2, c3, mask = cache
        dz = self.out.backward(dcodes * mask, c3)
        dh1 = self.rnn2.backward(dz, c2)
        dx = self.rnn1.backward(dh1, c1)
        return dx[:, :, : self.feat_dim], dx[:, :, self.feat_dim :]


def emit_nlc(codenet: CodeNet, features: SeqBatch, lv: SeqBatch):
    """Evaluation-mode coefficient emission."""
    return codenet.forward(features, lv)


def masked_mse(pred: SeqBatch, target: SeqBatch):
    mask = pred.mask()
    diff = (pred.data - target.data) * mask
    denom = float(mask.sum()) * pred.dim
    return float((diff * diff).sum()) / denom, 2.0 * diff / denom


def pretrain_code_net(codenet, lid, train_utts, heldout_utts, config, rng: Rng, log=None):
    """Regress tiled language vectors from features + language vectors.

    Reports the held-out MSE next to the constant mean predictor's MSE (the
    constant is the per-dimension mean of the training targets).
    """
    from .corpus import pad_features  # local import to avoid a cycle

    if codenet.width % codenet.lfv_dim != 0:
        raise ValueError("code width must be a multiple of the vector width")
    opt = NesterovSgd(codenet.params(), config.nlc_lr, config.momentum, config.clip_norm)
    sched = StallSchedule(config.nlc_lr, config.lr_decay, config.lr_patience)
    shuffle = rng.derive("nlc.shuffle").stream("order")
    dt = resolve_dtype(config.dtype)

    def batches(utts, order=None):
        seq = [utts[i] for i in order] if order is not None else utts
        for lo in range(0, len(seq), config.batch_size):
            group = seq[lo : lo + config.batch_size]
            feats = pad_features(group, dt)
            lv = extract_lfv(lid, feats)
            target = stack_lfv(lv, codenet.width)
            yield feats, lv, target

    # constant mean predictor fitted on training targets
    tsum = np.zeros(codenet.width)
    tcount = 0
    for feats, lv, target in batches(train_utts):
        mask = feats.mask()
        tsum += (target.data * mask).sum(axis=(0, 1))
        tcount += int(mask.sum())
    mean_const = tsum / max(1, tcount)

    def heldout_stats():
        err = 0.0
        base = 0.0
        count = 0
        for feats, lv, target in batches(heldout_utts):
            codes = codenet.forward(feats, lv)
            mask = feats.mask()
            err += float((((codes.data - target.data) * mask) ** 2).sum())
            base += float((((mean_const - target.data) * mask) ** 2).sum())
            count += int(mask.sum()) * codenet.width
        return err / max(1, count), base / max(1, count)

    records = []
    for epoch in range(1, config.nlc_epochs + 1):
        order = shuffle.permutation(len(train_utts))
        total, nb = 0.0, 0
        for feats, lv, target in batches(train_utts, order):
            opt.zero_grads()
            codes, cache = codenet.forward(feats, lv, with_cache=True)
            mse, dcodes = masked_mse(codes, target)
            codenet.backward(dcodes.astype(dt), cache)
            opt.step()
            total += mse
            nb += 1
        held_mse, base_mse = heldout_stats()
        rec = {
            "epoch": epoch,
            "train_loss": total / max(1, nb),
            "heldout_loss": held_mse,
            "mean_predictor_loss": base_mse,
        }
        records.append(rec)
        if log is not None:
            log(rec)
        opt.lr = sched.update(held_mse)
    codenet.pretrained = True
    return records
