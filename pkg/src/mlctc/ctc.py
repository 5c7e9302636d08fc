"""CTC loss and decoding.

The loss runs a forward-backward sweep over the blank-extended label lattice
entirely in log space and returns the exact gradient with respect to the
frame log-posteriors. Decoding offers greedy best-path search and a prefix
beam search with optional character-LM shallow fusion. Beam pruning ranks
hypotheses by their best single path (plus the weighted LM score), which
makes beam width 1 coincide with greedy best-path decoding; the final
hypothesis is selected by total prefix probability, so an exhaustive beam
returns the maximum-probability labeling.
"""

from __future__ import annotations

import math

import numpy as np

NEG_INF = -np.inf


class CtcInfeasibleError(ValueError):
    """The target cannot be aligned to the available frames."""


def collapse(path, blank=0):
    """Map a frame-level path to a labeling: merge adjacent repeats, drop blanks."""
    out = []
    prev = None
    for u in path:
        if u != prev and u != blank:
            out.append(u)
        prev = u
    return out


def min_frames_required(target):
    """Fewest frames that admit an alignment: one per label plus a separating
    blank between adjacent repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def extended_labels(target, blank=0):
    """Blank-interleaved label sequence of length 2L+1."""
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def validate_posterior(logp, atol=1e-6):
    row = np.logaddexp.reduce(np.asarray(logp, dtype=np.float64), axis=-1)
    if not np.allclose(row, 0.0, atol=atol):
        raise ValueError(f"posterior rows are not normalized (max |logsumexp| = {np.abs(row).max():.3g})")


def ctc_loss_batch(logp, lengths, targets, blank=0):
    """Forward-backward CTC over a padded batch.

    logp: (T, B, C) log-posteriors (padding rows are ignored).
    lengths: (B,) valid frame counts. targets: list of B id sequences.
    Returns (losses (B,), grad (T, B, C)) with grad = d(loss_b)/d(logp);
    each loss is -log p(target | posteriors).
    """
    logp = np.asarray(logp)
    T, B, C = logp.shape
    lengths = np.asarray(lengths, dtype=np.int64)
    for b, tgt in enumerate(targets):
        need = min_frames_required(tgt)
        if need > lengths[b]:
            raise CtcInfeasibleError(
                f"utterance {b}: target needs >= {need} frames, has {int(lengths[b])}"
            )
        if tgt and max(tgt) >= C:
            raise ValueError(f"utterance {b}: target id {max(tgt)} outside {C} classes")

    lp = logp.astype(np.float64, copy=False)
    s_sizes = np.array([2 * len(t) + 1 for t in targets], dtype=np.int64)
    S = int(s_sizes.max())
    ext = np.zeros((B, S), dtype=np.int64)
    for b, tgt in enumerate(targets):
        ext[b, : s_sizes[b]] = extended_labels(tgt, blank)
    valid_s = np.arange(S)[None, :] < s_sizes[:, None]

    allow_skip = np.zeros((B, S), dtype=bool)
    allow_skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2]) & valid_s[:, 2:]

    rows = np.arange(B)[:, None]
    lp_lab = lp[:, rows, ext]  # (T, B, S)

    alpha = np.full((T, B, S), NEG_INF)
    alpha[0, :, 0] = lp_lab[0, :, 0]
    has2 = s_sizes > 1
    if S > 1:
        alpha[0, has2, 1] = lp_lab[0, has2, 1]

    active = np.arange(T)[:, None] < lengths[None, :]  # (T, B)
    buf1 = np.empty((B, S))
    buf2 = np.empty((B, S))
    for t in range(1, T):
        prev = alpha[t - 1]
        buf1[:, 0] = NEG_INF
        buf1[:, 1:] = prev[:, :-1]
        buf2[:, :2] = NEG_INF
        buf2[:, 2:] = prev[:, :-2]
        acc = np.logaddexp(prev, buf1)
        acc = np.logaddexp(acc, np.where(allow_skip, buf2, NEG_INF))
        acc += lp_lab[t]
        alpha[t] = np.where(active[t][:, None], acc, prev)

    last = alpha[T - 1]
    final1 = last[rows[:, 0], s_sizes - 1]
    final2 = np.where(has2, last[rows[:, 0], np.maximum(s_sizes - 2, 0)], NEG_INF)
    log_p = np.logaddexp(final1, final2)
    if np.any(np.isneginf(log_p)):
        bad = int(np.flatnonzero(np.isneginf(log_p))[0])
        raise CtcInfeasibleError(f"utterance {bad}: no feasible alignment path")
    losses = -log_p

    # beta excludes the emission at t, so alpha + beta counts each frame once
    beta = np.full((T, B, S), NEG_INF)
    init = np.full((B, S), NEG_INF)
    init[rows[:, 0], s_sizes - 1] = 0.0
    init[has2, s_sizes[has2] - 2] = 0.0
    beta[T - 1] = init
    send2 = np.zeros((B, S), dtype=bool)
    send2[:, :-2] = allow_skip[:, 2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + lp_lab[t + 1]
        buf1[:, -1] = NEG_INF
        buf1[:, :-1] = nxt[:, 1:]
        buf2[:, -2:] = NEG_INF
        buf2[:, :-2] = nxt[:, 2:]
        acc = np.logaddexp(nxt, buf1)
        acc = np.logaddexp(acc, np.where(send2, buf2, NEG_INF))
        # hold the final-frame initialization until t drops below len-1
        beta[t] = np.where((t >= lengths - 1)[:, None], init, acc)

    with np.errstate(invalid="ignore"):
        occ = np.exp(alpha + beta - log_p[None, :, None])
    occ[~np.isfinite(occ)] = 0.0
    occ *= active[:, :, None]

    grad = np.zeros((T, B, C))
    tt = np.broadcast_to(np.arange(T)[:, None, None], (T, B, S))
    bb = np.broadcast_to(np.arange(B)[None, :, None], (T, B, S))
    kk = np.broadcast_to(ext[None, :, :], (T, B, S))
    np.add.at(grad, (tt, bb, kk), occ)
    grad = -grad
    return losses, grad.astype(logp.dtype, copy=False)


def ctc_loss(logp, target, blank=0, validate=True):
    """Loss and gradient for one utterance; logp is (T, C) log-posteriors."""
    logp = np.asarray(logp)
    if validate:
        validate_posterior(logp)
    losses, grad = ctc_loss_batch(
        logp[:, None, :], np.array([logp.shape[0]]), [list(target)], blank=blank
    )
    return float(losses[0]), grad[:, 0, :]


def greedy_decode(logp, blank=0):
    """Per-frame argmax (ties to the lowest id), collapsed."""
    path = np.argmax(np.asarray(logp), axis=-1)
    return collapse(path.tolist(), blank)


class _Hyp:
    __slots__ = ("pb", "pnb", "vb", "vnb", "lm_score", "lm_state", "next_lp", "parent", "last")

    def __init__(self, pb, pnb, vb, vnb, lm_score, lm_state=None, parent=None, last=None):
        self.pb = pb
        self.pnb = pnb
        self.vb = vb
        self.vnb = vnb
        self.lm_score = lm_score
        self.lm_state = lm_state
        self.next_lp = None
        self.parent = parent
        self.last = last


def _lm_next(hyp, lm):
    """Lazily materialize this hypothesis' LM state and next-unit log-probs."""
    if hyp.next_lp is None:
        if hyp.parent is None:
            hyp.lm_state, hyp.next_lp = lm.start()
        else:
            _lm_next(hyp.parent, lm)
            hyp.lm_state, hyp.next_lp = lm.step(hyp.parent.lm_state, hyp.last)
    return hyp.next_lp


def beam_search(logp, lm=None, beam=16, lm_weight=0.0, wb_unit=None, blank=0):
    """CTC prefix beam search with shallow LM fusion.

    Returns (labels, score) where score = log p_ctc(labels) +
    lm_weight * log p_lm(labels). The word-boundary unit is scored by the LM
    like any other unit. With lm_weight 0 no LM is consulted.
    """
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    logp = np.asarray(logp, dtype=np.float64)
    T, C = logp.shape
    if wb_unit is not None and not (0 <= wb_unit < C):
        raise ValueError(f"word-boundary unit {wb_unit} outside inventory of size {C}")
    use_lm = lm is not None and lm_weight != 0.0

    root = _Hyp(0.0, NEG_INF, 0.0, NEG_INF, 0.0)
    beams = {(): root}
    for t in range(T):
        frame = logp[t]
        cand = {}

        def slot(prefix):
            h = cand.get(prefix)
            if h is None:
                h = _Hyp(NEG_INF, NEG_INF, NEG_INF, NEG_INF, 0.0)
                cand[prefix] = h
            return h

        for prefix, h in beams.items():
            tot = np.logaddexp(h.pb, h.pnb)
            vmax = max(h.vb, h.vnb)
            stay = slot(prefix)
            stay.lm_score = h.lm_score
            stay.lm_state, stay.next_lp, stay.parent, stay.last = h.lm_state, h.next_lp, h.parent, h.last
            stay.pb = np.logaddexp(stay.pb, tot + frame[blank])
            stay.vb = max(stay.vb, vmax + frame[blank])
            if prefix:
                lastu = prefix[-1]
                stay.pnb = np.logaddexp(stay.pnb, h.pnb + frame[lastu])
                stay.vnb = max(stay.vnb, h.vnb + frame[lastu])
            if use_lm:
                next_lp = _lm_next(h, lm)
            for c in range(C):
                if c == blank:
                    continue
                child = prefix + (c,)
                node = slot(child)
                if prefix and c == prefix[-1]:
                    pnb_add = h.pb + frame[c]
                    v_add = h.vb + frame[c]
                else:
                    pnb_add = tot + frame[c]
                    v_add = vmax + frame[c]
                node.pnb = np.logaddexp(node.pnb, pnb_add)
                node.vnb = max(node.vnb, v_add)
                if node.parent is None:
                    node.parent = h
                    node.last = c
                    if use_lm:
                        node.lm_score = h.lm_score + next_lp[c]

        ranked = sorted(
            cand.items(),
            key=lambda kv: (
                -(max(kv[1].vb, kv[1].vnb) + lm_weight * kv[1].lm_score),
                len(kv[0]),
                kv[0],
            ),
        )
        beams = dict(ranked[:beam])

    def total(h):
        return float(np.logaddexp(h.pb, h.pnb) + lm_weight * h.lm_score)

    best_prefix, best_h = min(beams.items(), key=lambda kv: (-total(kv[1]), len(kv[0]), kv[0]))
    return list(best_prefix), total(best_h)


def beam_decode(logp, lm=None, beam=16, lm_weight=0.0, wb_unit=None, blank=0):
    """Best labeling under prefix beam search; see beam_search."""
    labels, _ = beam_search(logp, lm=lm, beam=beam, lm_weight=lm_weight, wb_unit=wb_unit, blank=blank)
    return labels
