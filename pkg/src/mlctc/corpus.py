"""Synthetic multilingual corpus generation and on-disk corpus I/O.

Each language is a "coloring" of a shared phone space: utterance transcripts
come from a per-language character bigram chain, graphemes map to phones
from a global prototype set, and every phone emits a few frames of its
prototype vector pushed through the language's affine transform plus noise.
Languages partially share graphemes and phones but disagree on how they are
paired, so recovering the grapheme from audio alone is ambiguous without
knowing the language; the language offset directions are orthogonal to the
phone prototypes, which keeps single frames linearly separable by language.

Also here: the corpus filter (minimum frames, maximum transcript length),
length-sorted or seeded-shuffle batching with zero padding, unit-inventory
construction, and the manifest/feature/transcript file formats.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernels import Rng
from .layers import SeqBatch

BLANK = "<blank>"
WORD_BOUNDARY = "|"

LANGUAGE_NAMES = ("alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel")
GRAPHEME_POOL = "abcdefghijklmnopqrstuvwxyz"

# documented generation constants (not config keys)
DURATION_MIN, DURATION_MAX = 3, 8      # frames emitted per phone
OFFSET_SCALE = 1.2                     # language offset magnitude
COLOR_JITTER = 0.25                    # off-identity mass of the affine map
MAX_CONDITION = 10.0                   # conditioning bound for the affine map
WB_PROB = 0.18                         # bigram mass from a letter to the boundary
MIN_CONFLICT = 0.5                     # required cross-language pairing disagreement

FEATURE_MAGIC = b"MPCF"
FEATURE_VERSION = 1


@dataclass
class SynthLanguage:
    name: str
    alphabet: list            # sorted graphemes
    g2p: dict                 # grapheme -> phone name (boundary maps to itself)
    coloring_a: np.ndarray    # (D, D) affine map, condition number <= 10
    coloring_b: np.ndarray    # (D,) offset
    bigram: np.ndarray        # (A+1, A+1) row-stochastic over alphabet + boundary
    start: np.ndarray         # (A,) start distribution over the alphabet

    def units(self):
        return self.alphabet + [WORD_BOUNDARY]


@dataclass
class Utterance:
    uid: str
    lang: str
    units: list               # grapheme transcript incl. boundary tokens
    phones: list              # parallel phone transcript (boundary stays itself)
    features: np.ndarray      # (T, feat_dim) float32

    @property
    def frames(self):
        return self.features.shape[0]


@dataclass
class Corpus:
    languages: dict           # name -> SynthLanguage
    phones: list              # global phone names, boundary last
    prototypes: np.ndarray    # (len(phones), D)
    feat_dim: int
    splits: dict = field(default_factory=dict)   # split -> list[Utterance]
    drop_report: dict = field(default_factory=dict)

    def utterances(self, split):
        return self.splits[split]

    def by_language(self, split, lang):
        return [u for u in self.splits[split] if u.lang == lang]


# ---------------------------------------------------------------------------
# language construction
# ---------------------------------------------------------------------------

def _orthonormal_rows(stream, n, dim):
    q, _ = np.linalg.qr(stream.standard_normal((dim, dim)))
    return q[:n]


def _draw_coloring(stream, dim):
    while True:
        a = np.eye(dim) + COLOR_JITTER * stream.standard_normal((dim, dim)) / np.sqrt(dim)
        if np.linalg.cond(a) <= MAX_CONDITION:
            return a


def _conflict_fraction(languages):
    """Share of (language, grapheme) slots whose phone is paired with a
    different grapheme by some other language."""
    conflicted = 0
    total = 0
    for lang in languages:
        for g in lang.alphabet:
            p = lang.g2p[g]
            total += 1
            for other in languages:
                if other is lang:
                    continue
                for g2, p2 in other.g2p.items():
                    if p2 == p and g2 != g:
                        conflicted += 1
                        break
                else:
                    continue
                break
    return conflicted / max(1, total)


def build_language_set(config, rng: Rng):
    """Deterministically construct the phone prototypes and languages."""
    if config.languages < 1:
        raise ValueError("need at least one language")
    if config.languages > len(LANGUAGE_NAMES):
        raise ValueError(f"at most {len(LANGUAGE_NAMES)} languages supported")
    if config.phone_count + config.languages > config.feat_dim:
        raise ValueError(
            "feat_dim must exceed phone_count + languages so offsets can be "
            "orthogonal to the prototypes"
        )
    n_letter_phones = config.phone_count - 1
    if config.alphabet_size > n_letter_phones:
        raise ValueError("alphabet_size cannot exceed the letter phone count")
    pool_size = min(len(GRAPHEME_POOL), config.alphabet_size + 2)

    proto_stream = rng.stream("corpus.prototypes")
    basis = _orthonormal_rows(proto_stream, config.phone_count + config.languages, config.feat_dim)
    phones = [f"p{i:02d}" for i in range(1, n_letter_phones + 1)] + [WORD_BOUNDARY]
    prototypes = basis[: config.phone_count]

    names = list(LANGUAGE_NAMES[: config.languages])
    letter_phones = phones[:-1]

    for attempt in range(200):
        languages = []
        for li, name in enumerate(names):
            stream = rng.stream(f"corpus.lang.{name}.{attempt}")
            alphabet = sorted(
                str(c) for c in stream.choice(list(GRAPHEME_POOL[:pool_size]),
                                              size=config.alphabet_size, replace=False)
            )
            assignment = stream.permutation(len(letter_phones))[: config.alphabet_size]
            g2p = {g: letter_phones[int(k)] for g, k in zip(alphabet, assignment)}
            g2p[WORD_BOUNDARY] = WORD_BOUNDARY

            a = _draw_coloring(stream, config.feat_dim)
            b = OFFSET_SCALE * basis[config.phone_count + li]

            n_units = config.alphabet_size + 1
            bigram = np.zeros((n_units, n_units))
            for row in range(n_units):
                weights = stream.gamma(1.0, size=config.alphabet_size)
                weights /= weights.sum()
                if row < config.alphabet_size:  # letter row: reserve boundary mass
                    bigram[row, : config.alphabet_size] = (1.0 - WB_PROB) * weights
                    bigram[row, -1] = WB_PROB
                else:  # boundary row: never boundary-to-boundary
                    bigram[row, : config.alphabet_size] = weights
            start = bigram[-1, : config.alphabet_size].copy()
            start /= start.sum()
            languages.append(SynthLanguage(name, list(alphabet), g2p, a, b, bigram, start))
        if _conflict_fraction(languages) >= MIN_CONFLICT:
            break
    return phones, prototypes, languages


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _sample_transcript(lang: SynthLanguage, n_units, stream):
    units = []
    idx = int(stream.choice(len(lang.alphabet), p=lang.start))
    units.append(lang.alphabet[idx])
    state = idx
    for _ in range(n_units - 1):
        state = int(stream.choice(lang.bigram.shape[1], p=lang.bigram[state]))
        units.append(lang.alphabet[state] if state < len(lang.alphabet) else WORD_BOUNDARY)
    while units and units[-1] == WORD_BOUNDARY:
        units.pop()
    return units


def synthesize_utterance(lang, phones, prototypes, noise_sigma, n_units, stream, uid):
    """One utterance: transcript from the bigram chain, frames from colored
    phone prototypes plus Gaussian noise."""
    if not lang.alphabet:
        raise ValueError(f"language {lang.name} has an empty alphabet")
    units = _sample_transcript(lang, n_units, stream)
    phone_seq = [lang.g2p[u] for u in units]
    index = {p: i for i, p in enumerate(phones)}
    rows = []
    for p in phone_seq:
        dur = int(stream.integers(DURATION_MIN, DURATION_MAX + 1))
        rows.extend([index[p]] * dur)
    base = prototypes[rows] @ lang.coloring_a.T + lang.coloring_b
    feats = base + noise_sigma * stream.standard_normal(base.shape)
    return Utterance(uid, lang.name, units, phone_seq, feats.astype(np.float32))


@dataclass
class DropReport:
    too_short: int = 0
    too_long: int = 0
    empty: int = 0

    @property
    def total(self):
        return self.too_short + self.too_long + self.empty

    def as_dict(self):
        return {"too_short": self.too_short, "too_long": self.too_long, "empty": self.empty}


def filter_utterances(utts, min_frames, max_transcript):
    """Keep utterances with enough frames, short-enough transcripts, and a
    non-empty transcript; count drops per reason."""
    kept = []
    report = DropReport()
    for u in utts:
        if not u.units:
            report.empty += 1
        elif u.frames < min_frames:
            report.too_short += 1
        elif len(u.units) > max_transcript:
            report.too_long += 1
        else:
            kept.append(u)
    return kept, report


def generate_corpus(config, rng: Rng):
    """Build the full train/test corpus; filtering is applied during
    generation and every language is topped up to the requested counts."""
    phones, prototypes, languages = build_language_set(config, rng)
    corpus = Corpus({l.name: l for l in languages}, phones, prototypes, config.feat_dim)
    report = DropReport()
    for split, count in (("train", config.train_utts), ("test", config.test_utts)):
        split_utts = []
        for lang in languages:
            stream = rng.stream(f"corpus.gen.{lang.name}.{split}")
            kept = []
            serial = 0
            while len(kept) < count:
                n_units = int(stream.integers(config.utt_min_units, config.utt_max_units + 1))
                uid = f"{lang.name}-{split}-{serial:05d}"
                serial += 1
                utt = synthesize_utterance(
                    lang, phones, prototypes, config.noise_sigma, n_units, stream, uid
                )
                ok, drop = filter_utterances([utt], config.min_frames, config.max_transcript)
                kept.extend(ok)
                report.too_short += drop.too_short
                report.too_long += drop.too_long
                report.empty += drop.empty
            split_utts.extend(kept)
        corpus.splits[split] = split_utts
    corpus.drop_report = report.as_dict()
    return corpus


# ---------------------------------------------------------------------------
# unit inventories
# ---------------------------------------------------------------------------

class UnitInventory:
    """Ordered acoustic units with the blank reserved at index 0 and the
    word boundary at index 1."""

    def __init__(self, units):
        if len(set(units)) != len(units):
            raise ValueError("inventory units must be unique")
        self.units = list(units)
        if not self.units or self.units[0] != BLANK:
            raise ValueError("inventory must start with the blank")
        if len(self.units) < 2 or self.units[1] != WORD_BOUNDARY:
            raise ValueError("inventory must reserve the word boundary at index 1")
        self._ids = {u: i for i, u in enumerate(self.units)}

    def __len__(self):
        return len(self.units)

    def __eq__(self, other):
        return isinstance(other, UnitInventory) and self.units == other.units

    @property
    def blank_id(self):
        return 0

    @property
    def wb_id(self):
        return 1

    def id_of(self, unit):
        if unit not in self._ids:
            raise KeyError(f"unit {unit!r} not in inventory")
        return self._ids[unit]

    def ids(self, units):
        return [self.id_of(u) for u in units]

    def names(self, ids):
        return [self.units[i] for i in ids]


def build_inventory(languages, mode):
    """Construct an inventory: one language's graphemes, the grapheme union,
    or the global phone set. Ordering is deterministic: blank, boundary,
    then sorted units."""
    if not languages:
        raise ValueError("need at least one language")
    if mode == "per_language":
        if len(languages) != 1:
            raise ValueError("per_language inventory takes exactly one language")
        units = sorted(languages[0].alphabet)
    elif mode == "joint_graphemes":
        union = set()
        for lang in languages:
            union.update(lang.alphabet)
        units = sorted(union)
    elif mode == "global_phones":
        union = set()
        for lang in languages:
            union.update(p for p in lang.g2p.values() if p != WORD_BOUNDARY)
        units = sorted(union)
    else:
        raise ValueError(f"unknown inventory mode {mode!r}")
    if not units:
        raise ValueError("inventory would be empty")
    return UnitInventory([BLANK, WORD_BOUNDARY] + units)


def utterance_target(utt: Utterance, inventory: UnitInventory, kind="grapheme"):
    seq = utt.units if kind == "grapheme" else utt.phones
    return inventory.ids(seq)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    features: SeqBatch
    targets: list
    utts: list


def sort_and_batch(utts, batch_size, policy, inventory=None, target_kind="grapheme",
                   dtype=np.float64, shuffle_stream=None):
    """Group utterances into zero-padded batches.

    policy "ascending_length" sorts by frame count (stable), so batch max
    lengths never decrease; "shuffled" uses the provided stream.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if policy == "ascending_length":
        ordered = sorted(utts, key=lambda u: u.frames)
    elif policy == "shuffled":
        if shuffle_stream is None:
            raise ValueError("shuffled policy needs a stream")
        perm = shuffle_stream.permutation(len(utts))
        ordered = [utts[i] for i in perm]
    else:
        raise ValueError(f"unknown batching policy {policy!r}")
    batches = []
    for lo in range(0, len(ordered), batch_size):
        group = ordered[lo : lo + batch_size]
        feats = pad_features(group, dtype)
        targets = None
        if inventory is not None:
            targets = [utterance_target(u, inventory, target_kind) for u in group]
        batches.append(Batch(feats, targets, group))
    return batches


def pad_features(group, dtype=np.float64):
    t_max = max(u.frames for u in group)
    dim = group[0].features.shape[1]
    data = np.zeros((t_max, len(group), dim), dtype=dtype)
    lengths = np.zeros(len(group), dtype=np.int64)
    for j, u in enumerate(group):
        data[: u.frames, j, :] = u.features
        lengths[j] = u.frames
    return SeqBatch(data, lengths)


# ---------------------------------------------------------------------------
# linear separability self-test
# ---------------------------------------------------------------------------

def linear_language_separability(corpus, frames_per_lang=2000, seed=0):
    """Held-out frame accuracy of a closed-form linear classifier on single
    frames; the corpus construction is meant to keep this >= 0.9."""
    names = sorted(corpus.languages)
    picks = {"train": [], "test": []}
    labels = {"train": [], "test": []}
    stream = Rng(seed).stream("corpus.probe")
    for split in ("train", "test"):
        for li, name in enumerate(names):
            frames = np.concatenate([u.features for u in corpus.by_language(split, name)])
            take = min(frames_per_lang, frames.shape[0])
            idx = stream.choice(frames.shape[0], size=take, replace=False)
            picks[split].append(frames[idx])
            labels[split].append(np.full(take, li))
    x_tr = np.concatenate(picks["train"]).astype(np.float64)
    y_tr = np.concatenate(labels["train"])
    x_te = np.concatenate(picks["test"]).astype(np.float64)
    y_te = np.concatenate(labels["test"])
    # linear discriminant with a shared covariance estimate
    means = np.stack([x_tr[y_tr == i].mean(axis=0) for i in range(len(names))])
    centered = x_tr - means[y_tr]
    cov = centered.T @ centered / x_tr.shape[0] + 1e-6 * np.eye(x_tr.shape[1])
    w = np.linalg.solve(cov, means.T)  # (D, L)
    scores = x_te @ w - 0.5 * np.sum(means.T * w, axis=0)[None, :]
    pred = np.argmax(scores, axis=1)
    return float(np.mean(pred == y_te))


# ---------------------------------------------------------------------------
# on-disk formats
# ---------------------------------------------------------------------------

def write_feature_file(path, features):
    features = np.asarray(features, dtype=np.float32)
    t, d = features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<HII", FEATURE_VERSION, t, d))
        fh.write(features.astype("<f4").tobytes())


def read_feature_file(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEATURE_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, t, d = struct.unpack("<HII", fh.read(10))
        if version != FEATURE_VERSION:
            raise ValueError(f"{path}: unsupported feature-file version {version}")
        payload = fh.read(4 * t * d)
        if len(payload) != 4 * t * d:
            raise ValueError(f"{path}: truncated payload")
        return np.frombuffer(payload, dtype="<f4").reshape(t, d).copy()


def write_corpus(corpus: Corpus, root):
    root = Path(root)
    (root / "feats").mkdir(parents=True, exist_ok=True)
    (root / "text").mkdir(parents=True, exist_ok=True)
    lines = []
    for split in sorted(corpus.splits):
        for u in corpus.splits[split]:
            lines.append(f"{u.uid}\t{u.lang}\t{split}\t{u.frames}\t{' '.join(u.units)}\n")
            write_feature_file(root / "feats" / f"{u.uid}.mpcf", u.features)
            (root / "text" / f"{u.uid}.txt").write_text(" ".join(u.units) + "\n", encoding="utf-8")
    (root / "manifest.tsv").write_text("".join(lines), encoding="utf-8")
    meta = {
        "feat_dim": corpus.feat_dim,
        "phones": corpus.phones,
        "drop_report": corpus.drop_report,
        "languages": {
            name: {"alphabet": lang.alphabet, "g2p": lang.g2p}
            for name, lang in sorted(corpus.languages.items())
        },
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_corpus(root):
    """Read a corpus directory back; language colorings are not stored, only
    what training needs (alphabets and grapheme-to-phone maps)."""
    root = Path(root)
    meta = json.loads((root / "meta.json").read_text(encoding="utf-8"))
    languages = {}
    for name, entry in meta["languages"].items():
        languages[name] = SynthLanguage(
            name=name,
            alphabet=list(entry["alphabet"]),
            g2p=dict(entry["g2p"]),
            coloring_a=np.empty(0),
            coloring_b=np.empty(0),
            bigram=np.empty(0),
            start=np.empty(0),
        )
    corpus = Corpus(languages, list(meta["phones"]), np.empty(0), int(meta["feat_dim"]),
                    drop_report=meta.get("drop_report", {}))
    splits = {}
    for line in (root / "manifest.tsv").read_text(encoding="utf-8").splitlines():
        uid, lang, split, frames, transcript = line.split("\t")
        units = transcript.split(" ") if transcript else []
        feats = read_feature_file(root / "feats" / f"{uid}.mpcf")
        if feats.shape[0] != int(frames):
            raise ValueError(f"{uid}: manifest says {frames} frames, file has {feats.shape[0]}")
        phones = [languages[lang].g2p[u] for u in units]
        splits.setdefault(split, []).append(Utterance(uid, lang, units, phones, feats))
    corpus.splits = splits
    return corpus


def corpus_hash(root):
    """Stable digest over the manifest and every feature file."""
    root = Path(root)
    h = hashlib.sha256()
    h.update((root / "manifest.tsv").read_bytes())
    for path in sorted((root / "feats").glob("*.mpcf")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()
