"""Network assembly and training.

Monolingual subnets (3 BiLSTM layers, max-merged) are CTC-pretrained per
language, their output layers discarded, and their last hidden layers
concatenated per frame as input to a main network of four BiLSTM layers
split 2+2. Between the two halves the activations are multiplied by
per-frame coefficients: all ones (no adaptation), tiled language vectors,
or the output of the jointly trainable code network. Joint training reaches
every parameter: subnets, code network, and both main-network halves.
"""

from __future__ import annotations

import copy

import numpy as np

from .corpus import pad_features, sort_and_batch, utterance_target
from .ctc import ctc_loss_batch, greedy_decode, min_frames_required
from .kernels import Rng, log_softmax_backward, log_softmax_rows, resolve_dtype
from .langcodes import extract_lfv, stack_lfv
from .layers import BiLstm, Dense, SeqBatch, dropout, dropout_backward
from .metrics import score
from .optim import NesterovSgd, StallSchedule

ABLATION_MODES = ("no_adaptation", "stacked_lfv_modulation", "nlc_modulation")


class DependencyError(RuntimeError):
    """A training stage is missing one of its prerequisites."""


class CtcStack:
    """A tower of BiLSTM layers with a detachable affine CTC head."""

    def __init__(self, name, input_dim, width, depth, n_units, rng, dtype="float64",
                 merge="pairwise_max"):
        dt = resolve_dtype(dtype) if isinstance(dtype, str) else dtype
        self.name = name
        self.input_dim = input_dim
        self.width = width
        self.depth = depth
        self.dtype = dt
        self.layers = []
        d = input_dim
        for i in range(depth):
            layer = BiLstm(f"{name}.rnn{i + 1}", d, width, merge, rng, dt)
            self.layers.append(layer)
            d = layer.d_out
        self.head = Dense(f"{name}.out", d, n_units, rng, dt) if n_units else None

    def params(self, with_head=True):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        if with_head and self.head is not None:
            out.extend(self.head.params())
        return out

    def forward_hidden(self, sb: SeqBatch, training=False, dropout_rate=0.0, drop_gen=None):
        caches = []
        h = sb
        for layer in self.layers:
            h, cache = layer.forward(h)
            dropped, keep = dropout(h.data, dropout_rate, drop_gen, training)
            h = h.with_data(dropped)
            caches.append((cache, keep))
        return h, caches

    def backward_hidden(self, dout, caches):
        for layer, (cache, keep) in zip(reversed(self.layers), reversed(caches)):
            dout = layer.backward(dropout_backward(dout, keep), cache)
        return dout

    def forward_logp(self, sb: SeqBatch, training=False, dropout_rate=0.0, drop_gen=None):
        if self.head is None:
            raise DependencyError(f"{self.name}: output layer was discarded")
        h, caches = self.forward_hidden(sb, training, dropout_rate, drop_gen)
        logits, head_cache = self.head.forward(h.data)
        logp = log_softmax_rows(logits)
        return logp, (caches, head_cache, logp)

    def backward_logp(self, dlogp, cache):
        caches, head_cache, logp = cache
        dlogits = log_softmax_backward(dlogp, logp)
        dout = self.head.backward(dlogits, head_cache)
        return self.backward_hidden(dout, caches)


class Subnet:
    """Monolingual feature extractor: 3 max-merged BiLSTM layers plus a CTC
    head that is discarded when the subnet joins the superstructure."""

    KIND = "subnet"
    DEPTH = 3

    def __init__(self, lang, target_kind, input_dim, width, inventory, rng=None, dtype="float64"):
        rng = rng or Rng(0)
        self.lang = lang
        self.target_kind = target_kind
        self.inventory = inventory
        self.width = width
        self.stack = CtcStack(f"subnet.{lang}.{target_kind}", input_dim, width,
                              self.DEPTH, len(inventory), rng, dtype)
        self.trained = False

    def params(self, with_head=True):
        return self.stack.params(with_head)

    def discard_head(self):
        self.stack.head = None


class MainNet:
    """Two 2-layer BiLSTM halves with the modulation site between them."""

    def __init__(self, input_dim, width, n_units, rng=None, dtype="float64"):
        rng = rng or Rng(0)
        dt = resolve_dtype(dtype) if isinstance(dtype, str) else dtype
        self.input_dim = input_dim
        self.width = width
        self.dtype = dt
        self.part1 = [
            BiLstm("main.part1.rnn1", input_dim, width, "pairwise_max", rng, dt),
            BiLstm("main.part1.rnn2", width, width, "pairwise_max", rng, dt),
        ]
        self.part2 = [
            BiLstm("main.part2.rnn1", width, width, "pairwise_max", rng, dt),
            BiLstm("main.part2.rnn2", width, width, "pairwise_max", rng, dt),
        ]
        self.head = Dense("main.out", width, n_units, rng, dt)

    def params(self):
        out = []
        for layer in self.part1 + self.part2:
            out.extend(layer.params())
        out.extend(self.head.params())
        return out


class Superstructure:
    """Assembled system: subnets in parallel, code path, split main network."""

    KIND = "joint"

    def __init__(self, subnets, codenet, main, inventory, mode="nlc_modulation", dropout_rate=0.2):
        if mode not in ABLATION_MODES:
            raise ValueError(f"unknown ablation mode {mode!r}")
        self.subnets = list(subnets)
        self.codenet = codenet
        self.main = main
        self.inventory = inventory
        self.mode = mode
        self.dropout_rate = dropout_rate

    def params(self):
        out = []
        for sn in self.subnets:
            out.extend(sn.params(with_head=False))
        if self.mode == "nlc_modulation":
            out.extend(self.codenet.params())
        out.extend(self.main.params())
        return out

    def _subnets_forward(self, features):
        outs = []
        caches = []
        for sn in self.subnets:
            h, cache = sn.stack.forward_hidden(features)
            outs.append(h.data)
            caches.append(cache)
        return outs, caches

    def _subnets_backward(self, dout, caches):
        splits = np.cumsum([sn.width for sn in self.subnets])[:-1]
        douts = np.split(dout, splits, axis=-1)
        for sn, cache, d in zip(self.subnets, caches, douts):
            sn.stack.backward_hidden(d, cache)

    def _codes(self, features, lv, shape, training):
        if self.mode == "no_adaptation":
            data = np.ones(shape, dtype=self.main.dtype)
            return SeqBatch(data, features.lengths), None
        if self.mode == "stacked_lfv_modulation":
            return stack_lfv(lv, self.main.width), None
        codes, cache = self.codenet.forward(features, lv, with_cache=True)
        return codes, cache

    def forward(self, features: SeqBatch, lv: SeqBatch, training=False, drop_gen=None,
                codes_override=None, want_cache=False):
        """Log-posteriors (T, B, |inventory|); evaluation mode is deterministic."""
        if lv.frames != features.frames or not np.array_equal(lv.lengths, features.lengths):
            raise ValueError("language-vector frames do not match the feature frames")
        sub_outs, sub_cache = self._subnets_forward(features)
        x = SeqBatch(np.concatenate(sub_outs, axis=-1), features.lengths)

        rate = self.dropout_rate if training else 0.0
        h = x
        p1_caches = []
        for layer in self.main.part1:
            h, cache = layer.forward(h)
            dropped, keep = dropout(h.data, rate, drop_gen, training)
            h = h.with_data(dropped)
            p1_caches.append((cache, keep))
        part1_out = h

        if codes_override is not None:
            codes, code_cache = codes_override, None
        else:
            codes, code_cache = self._codes(features, lv, part1_out.data.shape, training)
        if codes.data.shape != part1_out.data.shape:
            raise ValueError(
                f"modulation width mismatch: codes {codes.data.shape} vs acts {part1_out.data.shape}"
            )
        modulated = part1_out.with_data(part1_out.data * codes.data)

        h = modulated
        p2_caches = []
        for layer in self.main.part2:
            h, cache = layer.forward(h)
            dropped, keep = dropout(h.data, rate, drop_gen, training)
            h = h.with_data(dropped)
            p2_caches.append((cache, keep))

        logits, head_cache = self.main.head.forward(h.data)
        logp = log_softmax_rows(logits)
        if not want_cache:
            return logp, None
        cache = {
            "sub_cache": sub_cache,
            "p1_caches": p1_caches,
            "p2_caches": p2_caches,
            "head_cache": head_cache,
            "logp": logp,
            "part1_out": part1_out,
            "codes": codes,
            "code_cache": code_cache,
        }
        return logp, cache

    def backward(self, dlogp, cache):
        """Propagate loss cotangents into every parameter; returns diagnostics
        including the gradient arriving at the (post-dropout) Part 1 output."""
        dlogits = log_softmax_backward(dlogp, cache["logp"])
        dout = self.main.head.backward(dlogits, cache["head_cache"])
        for layer, (lcache, keep) in zip(reversed(self.main.part2), reversed(cache["p2_caches"])):
            dout = layer.backward(dropout_backward(dout, keep), lcache)

        codes = cache["codes"]
        part1_out = cache["part1_out"]
        d_part1 = dout * codes.data
        d_codes = dout * part1_out.data
        if cache["code_cache"] is not None:
            self.codenet.backward(d_codes, cache["code_cache"])

        dout = d_part1
        for layer, (lcache, keep) in zip(reversed(self.main.part1), reversed(cache["p1_caches"])):
            dout = layer.backward(dropout_backward(dout, keep), lcache)

        self._subnets_backward(dout, cache["sub_cache"])
        return {"d_part1": d_part1, "d_codes": d_codes}

    def loss_and_grads(self, features, lv, targets, training=False, drop_gen=None,
                       codes_override=None):
        logp, cache = self.forward(features, lv, training=training, drop_gen=drop_gen,
                                   codes_override=codes_override, want_cache=True)
        losses, grad = ctc_loss_batch(logp, features.lengths, targets,
                                      blank=self.inventory.blank_id)
        diag = self.backward(grad / len(targets), cache)
        diag["losses"] = losses
        return float(losses.mean()), diag


def ablate(s: Superstructure, mode):
    """An independent copy of the assembly running under ``mode``."""
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}")
    variant = copy.deepcopy(s)
    variant.mode = mode
    return variant


def assemble(subnets, codenet, lid, inventory, config, rng: Rng):
    """Wire pre-trained parts together under a freshly initialized main net."""
    for sn in subnets:
        if not sn.trained:
            raise DependencyError(f"subnet {sn.lang}/{sn.target_kind} is not trained")
    if not codenet.pretrained:
        raise DependencyError("code network is not pretrained")
    if not lid.trained:
        raise DependencyError("language identifier is not trained")
    width = config.main_width
    if codenet.width != width:
        raise ValueError(f"code width {codenet.width} != main width {width}")
    input_dim = sum(sn.width for sn in subnets)
    subnets = [copy.deepcopy(sn) for sn in subnets]
    for sn in subnets:
        sn.discard_head()
    main = MainNet(input_dim, width, len(inventory), rng.derive("main.init"), config.dtype)
    return Superstructure(subnets, codenet=copy.deepcopy(codenet), main=main,
                          inventory=inventory, mode="nlc_modulation",
                          dropout_rate=config.dropout)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _drop_infeasible(utts, targets_fn):
    kept, skipped = [], 0
    for u in utts:
        if min_frames_required(targets_fn(u)) <= u.frames:
            kept.append(u)
        else:
            skipped += 1
    return kept, skipped


def _epoch_batches(utts, epoch, config, inventory, target_kind, dt, shuffle):
    policy = "ascending_length" if epoch == 1 else "shuffled"
    return sort_and_batch(
        utts, config.batch_size, policy, inventory=inventory,
        target_kind=target_kind, dtype=dt,
        shuffle_stream=None if epoch == 1 else shuffle,
    )


def train_subnet(train_utts, heldout_utts, target_kind, width, inventory, config,
                 rng: Rng, log=None, checkpoint=None, epochs=None):
    """CTC-train one monolingual subnet; reports per-epoch loss and CER.

    Both utterance lists must come from a single language; the first epoch
    is sorted ascending by length, later ones are shuffled by seed.
    """
    if not train_utts:
        raise ValueError("no training utterances")
    langs = sorted({u.lang for u in train_utts} | {u.lang for u in heldout_utts})
    if len(langs) != 1:
        raise ValueError(f"subnet corpus mixes languages: {langs}")
    lang = langs[0]
    feat_dim = train_utts[0].features.shape[1]
    dt = resolve_dtype(config.dtype)
    net = Subnet(lang, target_kind, feat_dim, width, inventory,
                 rng.derive(f"subnet.{lang}.{target_kind}.init"), config.dtype)
    target_fn = lambda u: utterance_target(u, inventory, target_kind)
    train_utts, skipped = _drop_infeasible(train_utts, target_fn)
    opt = NesterovSgd(net.params(), config.lr, config.momentum, config.clip_norm)
    sched = StallSchedule(config.lr, config.lr_decay, config.lr_patience)
    shuffle = rng.derive(f"subnet.{lang}.{target_kind}.shuffle").stream("order")
    records = []
    for epoch in range(1, (epochs or config.subnet_epochs) + 1):
        total, n_seen = 0.0, 0
        for batch in _epoch_batches(train_utts, epoch, config, inventory, target_kind, dt, shuffle):
            opt.zero_grads()
            logp, cache = net.stack.forward_logp(batch.features)
            losses, grad = ctc_loss_batch(logp, batch.features.lengths, batch.targets,
                                          blank=inventory.blank_id)
            net.stack.backward_logp(grad / len(batch.targets), cache)
            opt.step()
            total += float(losses.sum())
            n_seen += len(batch.targets)
        net.trained = True
        held_loss = evaluate_loss(net.stack, heldout_utts, inventory, target_kind, config, dt)
        cer = evaluate_greedy_cer(stack_logp_fn(net.stack, dt), heldout_utts, inventory,
                                  target_kind, config.batch_size)
        rec = {"epoch": epoch, "train_loss": total / max(1, n_seen),
               "heldout_loss": held_loss, "cer": cer, "skipped": skipped, "lr": opt.lr}
        records.append(rec)
        if log is not None:
            log(rec)
        if checkpoint is not None:
            checkpoint(epoch, net, held_loss)
        opt.lr = sched.update(held_loss)
    return net, records


def build_baseline(corpus, inventory, config, rng: Rng):
    stack = CtcStack("baseline", corpus.feat_dim, config.main_width, 4, len(inventory),
                     rng.derive("baseline.init"), config.dtype)
    return stack


def train_stack(stack, train_utts, heldout, inventory, target_kind, config, rng: Rng,
                log=None, checkpoint=None, epochs=None, stage="baseline", lr=None):
    """Generic CTC training loop for a plain BiLSTM tower."""
    dt = stack.dtype
    target_fn = lambda u: utterance_target(u, inventory, target_kind)
    train_utts, skipped = _drop_infeasible(train_utts, target_fn)
    base_lr = lr if lr is not None else config.lr
    opt = NesterovSgd(stack.params(), base_lr, config.momentum, config.clip_norm)
    sched = StallSchedule(base_lr, config.lr_decay, config.lr_patience)
    shuffle = rng.derive(f"{stage}.shuffle").stream("order")
    records = []
    for epoch in range(1, (epochs or config.joint_epochs) + 1):
        total, n_seen = 0.0, 0
        for batch in _epoch_batches(train_utts, epoch, config, inventory, target_kind, dt, shuffle):
            opt.zero_grads()
            logp, cache = stack.forward_logp(batch.features)
            losses, grad = ctc_loss_batch(logp, batch.features.lengths, batch.targets,
                                          blank=inventory.blank_id)
            stack.backward_logp(grad / len(batch.targets), cache)
            opt.step()
            total += float(losses.sum())
            n_seen += len(batch.targets)
        held_loss = evaluate_loss(stack, heldout, inventory, target_kind, config, dt)
        cer = evaluate_greedy_cer(stack_logp_fn(stack, dt), heldout, inventory,
                                  target_kind, config.batch_size)
        rec = {"epoch": epoch, "train_loss": total / max(1, n_seen),
               "heldout_loss": held_loss, "cer": cer, "skipped": skipped, "lr": opt.lr}
        records.append(rec)
        if log is not None:
            log(rec)
        if checkpoint is not None:
            checkpoint(epoch, stack, held_loss)
        opt.lr = sched.update(held_loss)
    return records


def train_joint(s: Superstructure, corpus, lid, config, rng: Rng, log=None,
                checkpoint=None, epochs=None):
    """Fine-tune the assembled system on all languages' grapheme targets."""
    dt = resolve_dtype(config.dtype)
    inventory = s.inventory
    train_utts = corpus.utterances("train")
    heldout = corpus.utterances("test")
    target_fn = lambda u: utterance_target(u, inventory, "grapheme")
    train_utts, skipped = _drop_infeasible(train_utts, target_fn)
    opt = NesterovSgd(s.params(), config.lr, config.momentum, config.clip_norm)
    sched = StallSchedule(config.lr, config.lr_decay, config.lr_patience)
    shuffle = rng.derive("joint.shuffle").stream("order")
    drop_rng = rng.derive("joint.dropout")
    target_lang = config.target_lang
    records = []
    for epoch in range(1, (epochs or config.joint_epochs) + 1):
        drop_gen = drop_rng.stream(f"epoch{epoch}")
        total, n_seen = 0.0, 0
        for batch in _epoch_batches(train_utts, epoch, config, inventory, "grapheme", dt, shuffle):
            lv = extract_lfv(lid, batch.features)
            opt.zero_grads()
            _, diag = s.loss_and_grads(batch.features, lv, batch.targets,
                                       training=True, drop_gen=drop_gen)
            opt.step()
            total += float(diag["losses"].sum())
            n_seen += len(batch.targets)
        held_loss = evaluate_joint_loss(s, lid, heldout, config, dt)
        cer_target = evaluate_greedy_cer(
            joint_logp_fn(s, lid, dt),
            [u for u in heldout if u.lang == target_lang],
            inventory, "grapheme", config.batch_size)
        rec = {"epoch": epoch, "train_loss": total / max(1, n_seen),
               "heldout_loss": held_loss, "cer": cer_target, "skipped": skipped, "lr": opt.lr}
        records.append(rec)
        if log is not None:
            log(rec)
        if checkpoint is not None:
            checkpoint(epoch, s, held_loss)
        opt.lr = sched.update(held_loss)
    return records


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

def stack_logp_fn(stack, dtype):
    def fn(group):
        feats = pad_features(group, dtype)
        logp, _ = stack.forward_logp(feats)
        return logp, feats.lengths
    return fn


def joint_logp_fn(s: Superstructure, lid, dtype):
    def fn(group):
        feats = pad_features(group, dtype)
        lv = extract_lfv(lid, feats)
        logp, _ = s.forward(feats, lv)
        return logp, feats.lengths
    return fn


def evaluate_loss(stack, utts, inventory, target_kind, config, dtype):
    total, n = 0.0, 0
    for batch in sort_and_batch(utts, config.batch_size, "ascending_length",
                                inventory=inventory, target_kind=target_kind, dtype=dtype):
        logp, _ = stack.forward_logp(batch.features)
        losses, _ = ctc_loss_batch(logp, batch.features.lengths, batch.targets,
                                   blank=inventory.blank_id)
        total += float(losses.sum())
        n += len(batch.targets)
    return total / max(1, n)


def evaluate_joint_loss(s, lid, utts, config, dtype):
    total, n = 0.0, 0
    for batch in sort_and_batch(utts, config.batch_size, "ascending_length",
                                inventory=s.inventory, target_kind="grapheme", dtype=dtype):
        lv = extract_lfv(lid, batch.features)
        logp, _ = s.forward(batch.features, lv)
        losses, _ = ctc_loss_batch(logp, batch.features.lengths, batch.targets,
                                   blank=s.inventory.blank_id)
        total += float(losses.sum())
        n += len(batch.targets)
    return total / max(1, n)


def evaluate_greedy_cer(logp_fn, utts, inventory, target_kind, batch_size):
    """Held-out character error rate under greedy decoding."""
    refs, hyps = [], []
    ordered = sorted(utts, key=lambda u: u.frames)
    for lo in range(0, len(ordered), batch_size):
        group = ordered[lo : lo + batch_size]
        logp, lengths = logp_fn(group)
        for j, u in enumerate(group):
            ids = greedy_decode(logp[: lengths[j], j, :], blank=inventory.blank_id)
            hyps.append(inventory.names(ids))
            refs.append(u.units if target_kind == "grapheme" else u.phones)
    total, _ = score(refs, hyps, level="char")
    return total.rate
