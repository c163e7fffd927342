"""Command-line surface: determinism, guards, exit codes, config precedence."""

import json

import numpy as np
import pytest

from crossmodal_tsr import selfcheck
from crossmodal_tsr.cli import main


def _dir_bytes(path):
    return {f.name: f.read_bytes() for f in sorted(path.rglob("*")) if f.is_file()}


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--out", str(out), "--pairs", "10", "--seed", "7",
                 "--no-change-fraction", "0.3"]) == 0
    return out


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, synth_dir):
    out = tmp_path_factory.mktemp("cli") / "run"
    code = main(["train", "--manifest", str(synth_dir / "manifest.jsonl"),
                 "--out", str(out), "--fusion", "gff-concat", "--epochs", "4",
                 "--seed", "1", "--batch-size", "8",
                 "--fractions", "0.6,0.2,0.2"])
    assert code == 0
    return out


class TestSynth:
    def test_manifest_entry_count(self, synth_dir):
        lines = (synth_dir / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == 10

    def test_resolved_config_written(self, synth_dir):
        text = (synth_dir / "config.resolved").read_text()
        assert "pairs=10" in text and "seed=7" in text

    def test_deterministic_outputs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["synth", "--out", str(a), "--pairs", "4", "--seed", "3"])
        main(["synth", "--out", str(b), "--pairs", "4", "--seed", "3"])
        assert _dir_bytes(a) == _dir_bytes(b)

    def test_nonempty_dir_refused_without_force(self, synth_dir, capsys):
        assert main(["synth", "--out", str(synth_dir), "--pairs", "4",
                     "--seed", "3"]) == 2
        assert "force" in capsys.readouterr().err

    def test_force_overwrites(self, tmp_path):
        out = tmp_path / "d"
        main(["synth", "--out", str(out), "--pairs", "4", "--seed", "3"])
        assert main(["synth", "--out", str(out), "--pairs", "4", "--seed", "4",
                     "--force"]) == 0

    def test_single_pair_rejected(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path / "x"), "--pairs", "1",
                     "--seed", "0"]) == 2


class TestTrain:
    def test_outputs_present(self, trained_dir):
        for name in ("final.tsrc", "best.tsrc", "train_log.jsonl",
                     "config.resolved", "splits/train.jsonl", "splits/val.jsonl",
                     "splits/test.jsonl", "splits/eval.jsonl"):
            assert (trained_dir / name).exists(), name

    def test_defaults_are_published_hyperparameters(self, trained_dir):
        text = (trained_dir / "config.resolved").read_text()
        assert "batch_size=8" in text  # explicit flag wins
        assert "lr=0.01" in text
        assert "weight_decay=0.0005" in text
        assert "momentum=0.9" in text

    def test_identical_logs_for_identical_flags(self, synth_dir, tmp_path):
        args = lambda out: ["train", "--manifest",
                            str(synth_dir / "manifest.jsonl"), "--out", str(out),
                            "--fusion", "tff", "--epochs", "2", "--seed", "1",
                            "--batch-size", "8"]
        main(args(tmp_path / "r1"))
        main(args(tmp_path / "r2"))
        assert (tmp_path / "r1" / "train_log.jsonl").read_bytes() == \
               (tmp_path / "r2" / "train_log.jsonl").read_bytes()

    def test_unknown_fusion_is_usage_error(self, synth_dir, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--manifest", str(synth_dir / "manifest.jsonl"),
                  "--out", str(tmp_path / "x"), "--fusion", "bogus"])
        assert exc.value.code == 2
        err = capsys.readouterr().err
        assert "gff-sub" in err and "gff-concat" in err and "tff" in err

    def test_missing_manifest_io_error(self, tmp_path):
        assert main(["train", "--manifest", str(tmp_path / "nope.jsonl"),
                     "--out", str(tmp_path / "x")]) == 3


class TestConfigFile:
    def test_file_overrides_defaults_flags_override_file(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("pairs=6\nseed=9\n")
        out = tmp_path / "d"
        assert main(["synth", "--out", str(out), "--config", str(cfg),
                     "--seed", "2"]) == 0
        text = (out / "config.resolved").read_text()
        assert "pairs=6" in text    # from file
        assert "seed=2" in text     # flag wins

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("pears=6\n")
        assert main(["synth", "--out", str(tmp_path / "d"), "--config",
                     str(cfg)]) == 2


class TestEvaluate:
    def test_report_structure(self, synth_dir, trained_dir, tmp_path):
        out = tmp_path / "eval"
        code = main(["evaluate", "--checkpoint", str(trained_dir / "best.tsrc"),
                     "--manifest", str(trained_dir / "splits" / "eval.jsonl"),
                     "--out", str(out), "--rounds", "2", "--seed", "3"])
        assert code == 0
        docs = [json.loads(line) for line in
                (out / "report.json").read_text().splitlines()]
        assert len(docs) == 6  # 2 tasks x 3 scopes
        combos = {(d["task"], d["scope"]) for d in docs}
        assert combos == {(t, s) for t in ("t2i", "i2t")
                          for s in ("full", "change", "no_change")}
        for doc in docs:
            for metric in ("bleu1", "bleu4", "meteor", "rougeL"):
                assert 0.0 <= doc[metric]["mean"] <= 1.0
                assert len(doc[metric]["per_round"]) == 2
                assert 0.0 <= doc["cross_task_average"][metric] <= 1.0

    def test_reproducible_reports(self, trained_dir, tmp_path):
        args = lambda out: ["evaluate", "--checkpoint",
                            str(trained_dir / "best.tsrc"), "--manifest",
                            str(trained_dir / "splits" / "eval.jsonl"),
                            "--out", str(out), "--rounds", "1", "--seed", "3"]
        main(args(tmp_path / "e1"))
        main(args(tmp_path / "e2"))
        assert (tmp_path / "e1" / "report.json").read_bytes() == \
               (tmp_path / "e2" / "report.json").read_bytes()
        assert (tmp_path / "e1" / "results.jsonl").read_bytes() == \
               (tmp_path / "e2" / "results.jsonl").read_bytes()

    def test_scope_restricts_queries(self, trained_dir, tmp_path):
        out = tmp_path / "scoped"
        main(["evaluate", "--checkpoint", str(trained_dir / "best.tsrc"),
              "--manifest", str(trained_dir / "splits" / "eval.jsonl"),
              "--out", str(out), "--rounds", "1", "--scope", "change",
              "--seed", "0"])
        records = [json.loads(line) for line in
                   (out / "results.jsonl").read_text().splitlines()]
        assert records and all(r["scope"] == "change" for r in records)

    def test_mismatched_manifest_refused(self, trained_dir, tmp_path):
        out = tmp_path / "alt"
        main(["synth", "--out", str(out), "--pairs", "4", "--seed", "5",
              "--dim", "8"])  # different embedding width than the checkpoint
        assert main(["evaluate", "--checkpoint", str(trained_dir / "best.tsrc"),
                     "--manifest", str(out / "manifest.jsonl"),
                     "--out", str(tmp_path / "e")]) == 2


class TestQuery:
    def test_text_query_prints_k_lines(self, synth_dir, trained_dir, capsys):
        code = main(["query", "--checkpoint", str(trained_dir / "final.tsrc"),
                     "--manifest", str(synth_dir / "manifest.jsonl"),
                     "--text", "a block appears", "--k", "5"])
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 5
        pid, score, caption = lines[0].split("\t")
        assert pid.startswith("pair") and float(score) <= 1.0

    def test_k_zero_usage_error(self, synth_dir, trained_dir):
        assert main(["query", "--checkpoint", str(trained_dir / "final.tsrc"),
                     "--manifest", str(synth_dir / "manifest.jsonl"),
                     "--text", "anything", "--k", "0"]) == 2

    def test_unknown_pair_id(self, synth_dir, trained_dir):
        assert main(["query", "--checkpoint", str(trained_dir / "final.tsrc"),
                     "--manifest", str(synth_dir / "manifest.jsonl"),
                     "--pair-id", "pair99999"]) == 1

    def test_pair_query_lists_captions(self, synth_dir, trained_dir, capsys):
        code = main(["query", "--checkpoint", str(trained_dir / "final.tsrc"),
                     "--manifest", str(synth_dir / "manifest.jsonl"),
                     "--pair-id", "pair00000", "--k", "3"])
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 3

    def test_text_and_pair_id_together_rejected(self, synth_dir, trained_dir):
        assert main(["query", "--checkpoint", str(trained_dir / "final.tsrc"),
                     "--manifest", str(synth_dir / "manifest.jsonl"),
                     "--text", "x", "--pair-id", "pair00000"]) == 2


class TestSelfcheck:
    def test_clean_build_exits_zero(self, capsys):
        assert main(["selfcheck"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out

    def test_injected_gradient_bug_names_op(self, capsys, monkeypatch):
        monkeypatch.setattr(selfcheck, "_FAULT_INJECTION", "matmul")
        assert main(["selfcheck"]) == 1
        out = capsys.readouterr().out
        assert "FAIL gradient:matmul" in out
