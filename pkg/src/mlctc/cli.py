"""Command-line surface.

Subcommands: gen-corpus, train (--stage lid|nlc|subnet|lm|joint), decode,
eval, and reproduce (the full paired-ablation experiment). Flags mirror the
config keys; a `key = value` config file can set any of them. Exit codes:
0 success, 1 usage or config error, 2 missing stage dependency, 3 a
reproduce acceptance ordering failed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .corpus import (
    build_inventory,
    corpus_hash,
    generate_corpus,
    load_corpus,
    write_corpus,
)
from .ctc import beam_decode, greedy_decode
from .kernels import Rng
from .langcodes import CodeNet, extract_lfv, pretrain_code_net, train_lid
from .lm import train_lm
from .metrics import score
from .modelio import ModelFormatError, load_model_object, save_model_object
from .superstructure import (
    DependencyError,
    ablate,
    assemble,
    build_baseline,
    train_joint,
    train_stack,
    train_subnet,
)
from . import reproduce as reproduce_mod

DATA_ENV = "MLCTC_DATA_ROOT"

USAGE_EXIT, DEPENDENCY_EXIT, ACCEPTANCE_EXIT = 1, 2, 3


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _add_config_flags(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--dtype", choices=["float64", "float32"])
    p.add_argument("--width", type=int, help="stage-relevant layer width")
    p.add_argument("--beam", type=int)
    p.add_argument("--lm-weight", type=float, dest="lm_weight")
    p.add_argument("--min-frames", type=int, dest="min_frames")
    p.add_argument("--max-transcript", type=int, dest="max_transcript")
    p.add_argument("--train-utts", type=int, dest="train_utts")
    p.add_argument("--test-utts", type=int, dest="test_utts")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--epochs", type=int, help="override the stage's epoch count")
    p.add_argument("--lr", type=float)
    p.add_argument("--target-lang", dest="target_lang")


def _resolve(args, width_key=None):
    overrides = {}
    for key in ("seed", "dtype", "beam", "lm_weight", "min_frames", "max_transcript",
                "train_utts", "test_utts", "batch_size", "lr", "target_lang"):
        overrides[key] = getattr(args, key, None)
    if width_key and getattr(args, "width", None) is not None:
        overrides[width_key] = args.width
    cfg = load_config(getattr(args, "config", None), **overrides)
    print("resolved config:", file=sys.stderr)
    for line in cfg.resolved_text().splitlines():
        print(f"  {line}", file=sys.stderr)
    return cfg


def _data_dir(args):
    data = getattr(args, "data", None) or os.environ.get(DATA_ENV)
    if not data:
        raise ConfigError(f"no corpus directory: pass --data or set {DATA_ENV}")
    return Path(data)


def _metrics_logger(out_path):
    log_path = Path(str(out_path) + ".metrics.jsonl")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    fh = open(log_path, "w", encoding="utf-8")

    def log(rec):
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.flush()

    return log, fh, log_path


def _checkpointer(out_path):
    """Per-epoch checkpointing: last is rewritten每 epoch, best kept aside."""
    out_path = Path(out_path)
    state = {"best": None}
    last_path = Path(str(out_path) + ".last.mpnn")
    best_path = Path(str(out_path) + ".best.mpnn")

    def checkpoint(epoch, model, heldout_loss):
        save_model_object(last_path, model)
        if state["best"] is None or heldout_loss < state["best"]:
            state["best"] = heldout_loss
            save_model_object(best_path, model)

    return checkpoint


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_corpus(args):
    cfg = _resolve(args)
    corpus = generate_corpus(cfg, Rng(cfg.seed))
    out = Path(args.out)
    write_corpus(corpus, out)
    rep = corpus.drop_report
    kept = sum(len(v) for v in corpus.splits.values())
    print(f"wrote {kept} utterances to {out}")
    print(f"filter report: kept={kept} too_short={rep['too_short']} "
          f"too_long={rep['too_long']} empty={rep['empty']}")
    print(f"corpus hash: {corpus_hash(out)}")
    return 0


def _require(path, stage, flag):
    if not path:
        raise DependencyError(f"stage '{stage}' requires {flag} (train that stage first)")
    return path


def cmd_train(args):
    width_key = {"subnet": "subnet_width", "lm": "lm_width"}.get(args.stage, "main_width")
    cfg = _resolve(args, width_key)
    data = _data_dir(args)
    corpus = load_corpus(data)
    rng = Rng(cfg.seed).derive(f"stage.{args.stage}")
    out = Path(args.out)
    log, fh, log_path = _metrics_logger(out)
    checkpoint = _checkpointer(out)
    try:
        if args.stage == "lid":
            model, _ = train_lid(corpus, cfg, rng, log=log)
        elif args.stage == "nlc":
            lid = load_model_object(_require(args.lid, "nlc", "--lid"), "lid")
            model = CodeNet(corpus.feat_dim, cfg.lfv_dim, cfg.main_width,
                            rng.derive("init"), cfg.dtype)
            pretrain_code_net(model, lid, corpus.utterances("train"),
                              corpus.utterances("test"), cfg, rng, log=log)
        elif args.stage == "subnet":
            if not args.lang:
                raise ConfigError("stage 'subnet' requires --lang")
            kind = args.targets
            if kind == "phone":
                inv = build_inventory(list(corpus.languages.values()), "global_phones")
            else:
                inv = build_inventory([corpus.languages[args.lang]], "per_language")
            model, _ = train_subnet(
                corpus.by_language("train", args.lang), corpus.by_language("test", args.lang),
                kind, cfg.subnet_width, inv, cfg, rng, log=log,
                checkpoint=checkpoint, epochs=args.epochs)
        elif args.stage == "lm":
            inv = build_inventory(list(corpus.languages.values()), "joint_graphemes")
            seqs = [inv.ids(u.units) for u in corpus.utterances("train")]
            held = [inv.ids(u.units) for u in corpus.utterances("test")]
            model, _ = train_lm(seqs, len(inv), cfg.lm_width, cfg,
                                heldout_seqs=held, rng=rng, log=log)
            save_model_object(out, model, extra_arch={"units": inv.units})
            print(f"wrote {out}")
            return 0
        elif args.stage == "joint":
            lid = load_model_object(_require(args.lid, "joint", "--lid"), "lid")
            code = load_model_object(_require(args.nlc, "joint", "--nlc"), "nlc")
            if not args.subnets:
                raise DependencyError("stage 'joint' requires --subnets (train stage 'subnet' first)")
            subnets = [load_model_object(p, "subnet") for p in args.subnets.split(",")]
            inv = build_inventory(list(corpus.languages.values()), "joint_graphemes")
            model = assemble(subnets, code, lid, inv, cfg, rng.derive("assemble"))
            if args.mode and args.mode != "nlc_modulation":
                model = ablate(model, args.mode)
            train_joint(model, corpus, lid, cfg, rng, log=log,
                        checkpoint=checkpoint, epochs=args.epochs)
        else:
            raise ConfigError(f"unknown stage {args.stage!r}")
        save_model_object(out, model)
        print(f"wrote {out} (metrics: {log_path})")
        return 0
    finally:
        fh.close()


def _hyp_line(uid, units):
    return f"{uid}\t{' '.join(units)}\n"


def cmd_decode(args):
    cfg = _resolve(args)
    data = _data_dir(args)
    corpus = load_corpus(data)
    model = load_model_object(args.model)
    kind = type(model).__name__
    if args.mode == "beam" and cfg.lm_weight > 0 and not args.lm:
        raise DependencyError("beam decoding with lm_weight > 0 requires --lm")
    lm = load_model_object(args.lm, "charlm") if args.lm else None

    from .corpus import UnitInventory
    from .superstructure import CtcStack, Subnet, Superstructure

    if isinstance(model, Superstructure):
        lid = load_model_object(_require(args.lid, "decode", "--lid"), "lid")
        inv = model.inventory

        def logp_fn(feats):
            lv = extract_lfv(lid, feats)
            logp, _ = model.forward(feats, lv)
            return logp
    elif isinstance(model, Subnet):
        inv = model.inventory

        def logp_fn(feats):
            logp, _ = model.stack.forward_logp(feats)
            return logp
    elif isinstance(model, CtcStack):
        if not model.units:
            raise ModelFormatError("stack model carries no inventory")
        inv = UnitInventory(model.units)

        def logp_fn(feats):
            logp, _ = model.forward_logp(feats)
            return logp
    else:
        raise ModelFormatError(f"cannot decode with a {kind} model")

    if lm is not None:
        if lm.units is None or lm.units != inv.units:
            raise ConfigError("LM inventory does not match the acoustic model's")

    from .corpus import pad_features
    from .kernels import resolve_dtype

    dt = resolve_dtype(cfg.dtype)
    utts = corpus.utterances(args.split)
    lines = {}
    ordered = sorted(utts, key=lambda u: u.frames)
    for lo in range(0, len(ordered), cfg.batch_size):
        group = ordered[lo : lo + cfg.batch_size]
        feats = pad_features(group, dt)
        logp = logp_fn(feats)
        for j, u in enumerate(group):
            frame_lp = logp[: feats.lengths[j], j, :]
            if args.mode == "greedy":
                ids = greedy_decode(frame_lp, blank=inv.blank_id)
            else:
                ids = beam_decode(frame_lp, lm=lm, beam=cfg.beam,
                                  lm_weight=cfg.lm_weight if lm else 0.0,
                                  wb_unit=inv.wb_id, blank=inv.blank_id)
            lines[u.uid] = _hyp_line(u.uid, inv.names(ids))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for u in utts:  # manifest order
            fh.write(lines[u.uid])
    print(f"wrote {len(lines)} hypotheses to {out}")
    return 0


def _read_tsv(path):
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        uid, _, text = line.partition("\t")
        out[uid] = text.split(" ") if text else []
    return out


def cmd_eval(args):
    hyps = _read_tsv(args.hyps)
    if args.refs:
        refs = _read_tsv(args.refs)
    else:
        corpus = load_corpus(_data_dir(args))
        refs = {u.uid: u.units for u in corpus.utterances(args.split)}
    missing = sorted(set(refs) - set(hyps))
    extra = sorted(set(hyps) - set(refs))
    if missing or extra:
        print(f"error: utterance ids differ (missing {missing[:5]}, extra {extra[:5]})",
              file=sys.stderr)
        return USAGE_EXIT
    ids = sorted(refs)
    wb = "|"
    total, per_utt = score([refs[i] for i in ids], [hyps[i] for i in ids],
                           level=args.level, wb_unit=wb)
    for uid, rep in zip(ids, per_utt):
        print(f"{uid}\tS={rep.substitutions}\tI={rep.insertions}\tD={rep.deletions}"
              f"\tref_len={rep.ref_len}")
    print(f"TOTAL\tS={total.substitutions}\tI={total.insertions}\tD={total.deletions}"
          f"\tref_len={total.ref_len}\trate={total.rate:.4f}")
    return 0


def cmd_reproduce(args):
    cfg = _resolve(args)
    ok = reproduce_mod.run(cfg, Path(args.out), seeds=args.seeds)
    return 0 if ok else ACCEPTANCE_EXIT


def build_parser():
    parser = CliParser(prog="mlctc",
                       description="multilingual CTC acoustic modeling with language-code modulation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate the synthetic corpus")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="corpus output directory")
    p.set_defaults(fn=cmd_gen_corpus)

    p = sub.add_parser("train", help="train one pipeline stage")
    _add_config_flags(p)
    p.add_argument("--stage", required=True, choices=["lid", "nlc", "subnet", "lm", "joint"])
    p.add_argument("--data", help=f"corpus directory (or ${DATA_ENV})")
    p.add_argument("--out", required=True, help="model output path")
    p.add_argument("--lang", help="language for subnet training")
    p.add_argument("--targets", choices=["grapheme", "phone"], default="grapheme")
    p.add_argument("--lid", help="trained lid model (nlc/joint stages)")
    p.add_argument("--nlc", help="pretrained code network (joint stage)")
    p.add_argument("--subnets", help="comma-separated subnet model paths (joint stage)")
    p.add_argument("--mode", choices=["no_adaptation", "stacked_lfv_modulation", "nlc_modulation"],
                   help="ablation mode for the joint stage")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("decode", help="write hypotheses for a corpus split")
    _add_config_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", help=f"corpus directory (or ${DATA_ENV})")
    p.add_argument("--split", default="test")
    p.add_argument("--mode", choices=["greedy", "beam"], default="greedy")
    p.add_argument("--lm", help="charlm model for beam fusion")
    p.add_argument("--lid", help="lid model (needed for joint models)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("eval", help="score hypotheses against references")
    _add_config_flags(p)
    p.add_argument("--hyps", required=True)
    p.add_argument("--refs", help="reference TSV (id<TAB>units); default: corpus manifest")
    p.add_argument("--data", help=f"corpus directory (or ${DATA_ENV})")
    p.add_argument("--split", default="test")
    p.add_argument("--level", choices=["char", "word"], default="char")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("reproduce", help="run the paired-ablation experiment end to end")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="experiment output directory")
    p.add_argument("--seeds", type=lambda s: [int(x) for x in s.split(",")],
                   help="comma-separated seed list (default 11,12,13)")
    p.set_defaults(fn=cmd_reproduce)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return DEPENDENCY_EXIT
    except (ConfigError, ModelFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT


if __name__ == "__main__":
    sys.exit(main())
