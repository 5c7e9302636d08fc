"""Command-line behavior: determinism, dependency errors, decode/eval paths."""

import json
from pathlib import Path

import numpy as np
import pytest

from mlctc.cli import main
from mlctc.corpus import corpus_hash

TINY_CFG = """
# desk-test scale
languages = 2
train_utts = 10
test_utts = 4
feat_dim = 10
phone_count = 6
alphabet_size = 4
utt_min_units = 5
utt_max_units = 8
min_frames = 10
lfv_dim = 2
main_width = 8
subnet_width = 4
lm_width = 8
lid_hidden = 8
lid_epochs = 3
lid_frames_per_lang = 800
subnet_epochs = 3
nlc_epochs = 2
joint_epochs = 2
lm_epochs = 2
batch_size = 4
dtype = float64
lr_patience = 999
"""


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG, encoding="utf-8")
    data = root / "corpus"
    assert main(["gen-corpus", "--config", str(cfg), "--out", str(data)]) == 0
    return {"root": root, "cfg": str(cfg), "data": str(data)}


class TestGenCorpus:
    def test_same_seed_byte_identical(self, ws, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["gen-corpus", "--config", ws["cfg"], "--out", str(out)]) == 0
        assert corpus_hash(a) == corpus_hash(b)
        assert (a / "manifest.tsv").read_bytes() == (b / "manifest.tsv").read_bytes()

    def test_manifest_counts_match_config(self, ws):
        lines = Path(ws["data"], "manifest.tsv").read_text().splitlines()
        train = [l for l in lines if "\ttrain\t" in l]
        assert len(train) == 2 * 10  # languages x train_utts

    def test_filter_drops_are_reported(self, tmp_path, capsys):
        cfg = tmp_path / "strict.cfg"
        cfg.write_text(TINY_CFG.replace("min_frames = 10", "min_frames = 40"), encoding="utf-8")
        assert main(["gen-corpus", "--config", str(cfg), "--out", str(tmp_path / "c")]) == 0
        out = capsys.readouterr().out
        assert "too_short=" in out
        dropped = int(out.split("too_short=")[1].split()[0])
        assert dropped > 0

    def test_unknown_config_key_is_usage_error(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("no_such_key = 5\n", encoding="utf-8")
        assert main(["gen-corpus", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 1


class TestTrain:
    def test_joint_without_subnets_is_dependency_error(self, ws, tmp_path, capsys):
        lid = tmp_path / "lid.mpnn"
        assert main(["train", "--stage", "lid", "--config", ws["cfg"],
                     "--data", ws["data"], "--out", str(lid)]) == 0
        nlc = tmp_path / "nlc.mpnn"
        assert main(["train", "--stage", "nlc", "--config", ws["cfg"],
                     "--data", ws["data"], "--lid", str(lid), "--out", str(nlc)]) == 0
        code = main(["train", "--stage", "joint", "--config", ws["cfg"], "--data", ws["data"],
                     "--lid", str(lid), "--nlc", str(nlc), "--out", str(tmp_path / "j.mpnn")])
        assert code == 2
        assert "subnet" in capsys.readouterr().err

    def test_nlc_without_lid_is_dependency_error(self, ws, tmp_path):
        assert main(["train", "--stage", "nlc", "--config", ws["cfg"], "--data", ws["data"],
                     "--out", str(tmp_path / "n.mpnn")]) == 2

    def test_metrics_log_deterministic_across_runs(self, ws, tmp_path):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / f"{name}.mpnn"
            assert main(["train", "--stage", "subnet", "--lang", "alpha",
                         "--config", ws["cfg"], "--data", ws["data"], "--out", str(out)]) == 0
            outs.append(Path(str(out) + ".metrics.jsonl").read_bytes())
        assert outs[0] == outs[1]

    def test_checkpoints_best_and_last_exist(self, ws, tmp_path):
        out = tmp_path / "sn.mpnn"
        assert main(["train", "--stage", "subnet", "--lang", "alpha",
                     "--config", ws["cfg"], "--data", ws["data"], "--out", str(out)]) == 0
        assert out.exists()
        assert Path(str(out) + ".best.mpnn").exists()
        assert Path(str(out) + ".last.mpnn").exists()

    def test_env_var_supplies_data_root(self, ws, tmp_path, monkeypatch):
        monkeypatch.setenv("MLCTC_DATA_ROOT", ws["data"])
        out = tmp_path / "lid_env.mpnn"
        assert main(["train", "--stage", "lid", "--config", ws["cfg"], "--out", str(out)]) == 0


@pytest.fixture(scope="module")
def trained(ws, tmp_path_factory):
    root = tmp_path_factory.mktemp("models")
    paths = {"lm": root / "lm.mpnn", "subnet": root / "sn.mpnn"}
    assert main(["train", "--stage", "lm", "--config", ws["cfg"],
                 "--data", ws["data"], "--out", str(paths["lm"])]) == 0
    # overfit the training split on purpose (wide subnet, many epochs)
    assert main(["train", "--stage", "subnet", "--lang", "alpha", "--epochs", "120",
                 "--width", "16", "--lr", "0.08",
                 "--config", ws["cfg"], "--data", ws["data"], "--out", str(paths["subnet"])]) == 0
    return {**ws, **{k: str(v) for k, v in paths.items()}}


class TestDecodeEval:
    def test_beam_one_without_lm_matches_greedy_byte_identical(self, trained, tmp_path):
        g, b = tmp_path / "greedy.tsv", tmp_path / "beam.tsv"
        assert main(["decode", "--model", trained["subnet"], "--data", trained["data"],
                     "--mode", "greedy", "--config", trained["cfg"], "--out", str(g)]) == 0
        assert main(["decode", "--model", trained["subnet"], "--data", trained["data"],
                     "--mode", "beam", "--beam", "1", "--lm-weight", "0",
                     "--config", trained["cfg"], "--out", str(b)]) == 0
        assert g.read_bytes() == b.read_bytes()

    def test_beam_without_lm_but_positive_weight_is_dependency_error(self, trained, tmp_path):
        code = main(["decode", "--model", trained["subnet"], "--data", trained["data"],
                     "--mode", "beam", "--lm-weight", "0.5", "--config", trained["cfg"],
                     "--out", str(tmp_path / "x.tsv")])
        assert code == 2

    def test_overfit_model_decodes_training_set_below_5_percent(self, trained, tmp_path, capsys):
        hyp = tmp_path / "train_hyp.tsv"
        assert main(["decode", "--model", trained["subnet"], "--data", trained["data"],
                     "--split", "train", "--config", trained["cfg"], "--out", str(hyp)]) == 0
        # references: only the alpha utterances the subnet was trained on
        refs = tmp_path / "refs.tsv"
        lines = []
        hyp_keep = []
        hyp_lines = hyp.read_text().splitlines()
        manifest = Path(trained["data"], "manifest.tsv").read_text().splitlines()
        for row in manifest:
            uid, lang, split, _, transcript = row.split("\t")
            if split == "train" and lang == "alpha":
                lines.append(f"{uid}\t{transcript}")
                hyp_keep.extend(h for h in hyp_lines if h.startswith(uid + "\t"))
        refs.write_text("\n".join(lines) + "\n", encoding="utf-8")
        hyp2 = tmp_path / "hyp2.tsv"
        hyp2.write_text("\n".join(hyp_keep) + "\n", encoding="utf-8")
        assert main(["eval", "--hyps", str(hyp2), "--refs", str(refs), "--level", "char"]) == 0
        total_line = [l for l in capsys.readouterr().out.splitlines() if l.startswith("TOTAL")][0]
        rate = float(total_line.split("rate=")[1])
        assert rate < 0.05

    def test_eval_zero_for_identical(self, trained, tmp_path, capsys):
        refs = tmp_path / "r.tsv"
        refs.write_text("u1\ta b | c\nu2\tb a\n", encoding="utf-8")
        assert main(["eval", "--hyps", str(refs), "--refs", str(refs)]) == 0
        out = capsys.readouterr().out
        assert "rate=0.0000" in out

    def test_eval_id_mismatch_lists_offenders(self, trained, tmp_path, capsys):
        refs = tmp_path / "r.tsv"
        hyps = tmp_path / "h.tsv"
        refs.write_text("u1\ta b\n", encoding="utf-8")
        hyps.write_text("u9\ta b\n", encoding="utf-8")
        assert main(["eval", "--hyps", str(hyps), "--refs", str(refs)]) == 1
        err = capsys.readouterr().err
        assert "u1" in err and "u9" in err

    def test_eval_totals_equal_sum_of_per_utterance_counts(self, trained, tmp_path, capsys):
        refs = tmp_path / "r.tsv"
        hyps = tmp_path / "h.tsv"
        refs.write_text("u1\ta b c\nu2\ta a\n", encoding="utf-8")
        hyps.write_text("u1\ta x c\nu2\ta\n", encoding="utf-8")
        assert main(["eval", "--hyps", str(hyps), "--refs", str(refs)]) == 0
        out = capsys.readouterr().out.splitlines()
        per = [l for l in out if l.startswith("u")]
        total = [l for l in out if l.startswith("TOTAL")][0]

        def count(line, tag):
            return int(line.split(f"{tag}=")[1].split("\t")[0])

        for tag in ("S", "I", "D"):
            assert count(total, tag) == sum(count(l, tag) for l in per)


class TestUsage:
    def test_unknown_flag_is_usage_exit(self):
        with pytest.raises(SystemExit) as exc:
            main(["gen-corpus", "--no-such-flag"])
        assert exc.value.code == 1

    def test_missing_subcommand_is_usage_exit(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 1
