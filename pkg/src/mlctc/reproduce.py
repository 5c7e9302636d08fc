"""The end-to-end paired experiment.

For each seed: generate one corpus, train the language identifier, the four
monolingual subnets (three phone, one target-language grapheme), and the
code network; assemble the gated system and fine-tune it jointly under each
modulation mode (codes of ones, tiled language vectors, code network); train
the monolingual baseline; record held-out target-language CER of the best
checkpoint of each system. Medians across seeds must satisfy
CER(no_adaptation) > CER(nlc_modulation) and
CER(nlc_modulation) <= CER(monolingual).
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from .corpus import build_inventory, corpus_hash, generate_corpus, write_corpus
from .kernels import Rng
from .langcodes import CodeNet, pretrain_code_net, train_lid
from .superstructure import (
    ABLATION_MODES,
    ablate,
    assemble,
    build_baseline,
    evaluate_greedy_cer,
    stack_logp_fn,
    train_joint,
    train_stack,
    train_subnet,
)

SETUPS = ("monolingual", "no_adaptation", "stacked_lfv_modulation", "nlc_modulation")


def _best(records):
    rec = min(records, key=lambda r: r["heldout_loss"])
    return {"cer": rec["cer"], "epoch": rec["epoch"], "last_cer": records[-1]["cer"]}


def _jsonl_logger(path):
    path.parent.mkdir(parents=True, exist_ok=True)
    fh = open(path, "w", encoding="utf-8")

    def log(rec):
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.flush()

    return log, fh


def run_seed(seed, cfg, seed_dir):
    """All trainings for one seed; returns the per-seed result record."""
    t0 = time.time()
    rng = Rng(seed)
    result = {"seed": seed}
    corpus = generate_corpus(cfg, rng)
    corpus_dir = seed_dir / "corpus"
    write_corpus(corpus, corpus_dir)
    base_hash = corpus_hash(corpus_dir)
    result["corpus_hash"] = base_hash
    result["drop_report"] = corpus.drop_report

    logs = {}

    def logger(name):
        log, fh = _jsonl_logger(seed_dir / f"{name}.metrics.jsonl")
        logs[name] = fh
        return log

    try:
        lid, lid_recs = train_lid(corpus, cfg, rng.derive("stage.lid"), log=logger("lid"))
        result["lid_heldout_acc"] = lid_recs[-1]["heldout_acc"]

        langs = sorted(corpus.languages)
        target = cfg.target_lang
        if target not in corpus.languages:
            raise ValueError(f"target language {target!r} not in corpus ({langs})")
        joint_inv = build_inventory(list(corpus.languages.values()), "joint_graphemes")
        phone_inv = build_inventory(list(corpus.languages.values()), "global_phones")

        subnet_cfg = cfg.replace(batch_size=min(8, cfg.batch_size))
        subnets = []
        result["subnets"] = {}
        for lang in langs:
            kind = "grapheme" if lang == target else "phone"
            inv = (build_inventory([corpus.languages[lang]], "per_language")
                   if kind == "grapheme" else phone_inv)
            train_utts = corpus.by_language("train", lang)
            held = corpus.by_language("test", lang)
            untrained = _untrained_subnet_cer(lang, kind, cfg, inv, train_utts, held, rng)
            net, recs = train_subnet(train_utts, held, kind, cfg.subnet_width, inv,
                                     subnet_cfg, rng.derive(f"stage.subnet.{lang}"),
                                     log=logger(f"subnet.{lang}"))
            subnets.append(net)
            result["subnets"][lang] = {
                "kind": kind, "cer": recs[-1]["cer"], "untrained_cer": untrained,
                "best": _best(recs),
            }

        # width comparison on one phone subnet task (half vs quarter width)
        cmp_lang = next(l for l in langs if l != target)
        wide_cfg = subnet_cfg.replace(subnet_width=cfg.main_width // 2)
        wide_net, wide_recs = train_subnet(
            corpus.by_language("train", cmp_lang), corpus.by_language("test", cmp_lang),
            "phone", wide_cfg.subnet_width, phone_inv, wide_cfg,
            rng.derive(f"stage.subnet.{cmp_lang}.wide"), log=logger(f"subnet.{cmp_lang}.wide"))
        result["width_compare"] = {
            "lang": cmp_lang,
            "quarter": result["subnets"][cmp_lang]["best"]["cer"],
            "half": _best(wide_recs)["cer"],
        }

        code = CodeNet(cfg.feat_dim, cfg.lfv_dim, cfg.main_width,
                       rng.derive("stage.nlc.init"), cfg.dtype)
        nlc_recs = pretrain_code_net(code, lid, corpus.utterances("train"),
                                     corpus.utterances("test"), cfg,
                                     rng.derive("stage.nlc"), log=logger("nlc"))
        result["nlc_heldout_mse"] = nlc_recs[-1]["heldout_loss"]
        result["nlc_mean_predictor_mse"] = nlc_recs[-1]["mean_predictor_loss"]

        assembled = assemble(subnets, code, lid, joint_inv, cfg, rng.derive("stage.assemble"))
        result["setups"] = {}
        result["setup_corpus_hashes"] = {}
        for mode in ABLATION_MODES:
            result["setup_corpus_hashes"][mode] = corpus_hash(corpus_dir)
            variant = ablate(assembled, mode)
            recs = train_joint(variant, corpus, lid, cfg, rng.derive("stage.joint"),
                               log=logger(f"joint.{mode}"))
            result["setups"][mode] = _best(recs)

        mono_inv = build_inventory([corpus.languages[target]], "per_language")
        result["setup_corpus_hashes"]["monolingual"] = corpus_hash(corpus_dir)
        baseline = build_baseline(corpus, mono_inv, cfg, rng.derive("stage.baseline"))
        bl_recs = train_stack(
            baseline, corpus.by_language("train", target), corpus.by_language("test", target),
            mono_inv, "grapheme", cfg.replace(batch_size=min(8, cfg.batch_size)),
            rng.derive("stage.baseline.train"), log=logger("baseline"),
            epochs=cfg.joint_epochs, stage="baseline")
        result["setups"]["monolingual"] = _best(bl_recs)
    finally:
        for fh in logs.values():
            fh.close()
    result["paired_hashes_identical"] = len(set(result["setup_corpus_hashes"].values())) == 1
    result["seconds"] = round(time.time() - t0, 1)
    return result


def _untrained_subnet_cer(lang, kind, cfg, inventory, train_utts, held, rng: Rng):
    from .kernels import resolve_dtype
    from .superstructure import Subnet

    net = Subnet(lang, kind, train_utts[0].features.shape[1], cfg.subnet_width, inventory,
                 rng.derive(f"subnet.{lang}.{kind}.init"), cfg.dtype)
    return evaluate_greedy_cer(stack_logp_fn(net.stack, resolve_dtype(cfg.dtype)),
                               held, inventory, kind, cfg.batch_size)


def evaluate_criteria(summary):
    per_seed = summary["per_seed"]
    med = {
        name: float(np.median([r["setups"][name]["cer"] for r in per_seed]))
        for name in SETUPS
    }
    summary["median_cer"] = med
    checks = {}
    checks["lid_accuracy_at_least_90"] = min(r["lid_heldout_acc"] for r in per_seed) >= 0.90
    checks["nlc_mse_quarter_of_mean_predictor"] = all(
        r["nlc_heldout_mse"] <= 0.25 * r["nlc_mean_predictor_mse"] for r in per_seed
    )
    checks["subnets_halve_untrained_cer"] = all(
        entry["cer"] < 0.5 * entry["untrained_cer"]
        for r in per_seed for entry in r["subnets"].values()
    )
    half = float(np.median([r["width_compare"]["half"] for r in per_seed]))
    quarter = float(np.median([r["width_compare"]["quarter"] for r in per_seed]))
    checks["half_width_subnet_not_worse"] = half <= quarter
    checks["ordering_no_adaptation_above_nlc"] = med["no_adaptation"] > med["nlc_modulation"]
    checks["ordering_nlc_not_above_monolingual"] = med["nlc_modulation"] <= med["monolingual"]
    checks["paired_corpora_identical"] = all(r["paired_hashes_identical"] for r in per_seed)
    summary["criteria"] = checks
    summary["width_compare_median"] = {"half": half, "quarter": quarter}
    return checks


def format_table(summary):
    lines = []
    med = summary["median_cer"]
    lines.append("setup                        median CER   per-seed CER")
    for name in SETUPS:
        per = "  ".join(f"{r['setups'][name]['cer']:.4f}" for r in summary["per_seed"])
        lines.append(f"{name:28s} {med[name]:.4f}      {per}")
    return "\n".join(lines)


def run(cfg, out_dir, seeds=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if seeds is None:
        seeds = [cfg.seed, cfg.seed + 1, cfg.seed + 2]
    summary = {"seeds": list(seeds), "config": cfg.as_dict(), "per_seed": []}
    (out_dir / "config.resolved.txt").write_text(cfg.resolved_text(), encoding="utf-8")
    for seed in seeds:
        print(f"[seed {seed}] running all setups...", flush=True)
        result = run_seed(seed, cfg, out_dir / f"seed{seed}")
        summary["per_seed"].append(result)
        cers = {k: round(v["cer"], 4) for k, v in result["setups"].items()}
        print(f"[seed {seed}] done in {result['seconds']}s: {cers}", flush=True)
    checks = evaluate_criteria(summary)
    table = format_table(summary)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")
    (out_dir / "summary.txt").write_text(table + "\n", encoding="utf-8")
    print()
    print(table)
    print()
    for name, ok in checks.items():
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
    return all(checks.values())
