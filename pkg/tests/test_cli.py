import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from kgchat import cli
from kgchat.corpus import Vocabulary, load_bundle
from kgchat.kgraph import KnowledgeGraph, Triple, save_triples_tsv
from kgchat.qadpt import (Hyperparams, QadptModel, init_params,
                          load_checkpoint, save_checkpoint)

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    return tmp_path_factory.mktemp("cliws")


@pytest.fixture(scope="module")
def bundle_dir(ws):
    out = ws / "bundle"
    code = cli.main(["synth", "--out", str(out), "--n_people", "8",
                     "--n_places", "4", "--n_jobs", "3", "--n_turns", "150",
                     "--seed", "3"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def run_dir(ws, bundle_dir):
    out = ws / "run"
    code = cli.main(["train", "--bundle", str(bundle_dir), "--out", str(out),
                     "--hidden", "24", "--embed", "16", "--hops", "3",
                     "--epochs", "3", "--patience", "5", "--batch_size", "16",
                     "--seed", "1"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def seq_dir(ws, bundle_dir):
    out = ws / "seq"
    code = cli.main(["train", "--bundle", str(bundle_dir), "--out", str(out),
                     "--model", "seq2seq", "--hidden", "24", "--embed", "16",
                     "--epochs", "2", "--patience", "5", "--seed", "1"])
    assert code == 0
    return out


def test_synth_writes_bundle_and_config(bundle_dir):
    for name in ("turns.jsonl", "vocab.json", "graph.tsv", "config.json",
                 "oracle_paths.json", "expected.json"):
        assert (bundle_dir / name).exists(), name
    cfg = json.loads((bundle_dir / "config.json").read_text())
    assert cfg["command"] == "synth"
    assert cfg["config"]["n_people"] == 8
    bundle = load_bundle(bundle_dir)
    assert bundle.meta["n_turns"] == 150


def test_stats_writes_histograms(ws, bundle_dir, capsys):
    out = ws / "stats"
    assert cli.main(["stats", "--bundle", str(bundle_dir),
                     "--out", str(out)]) == 0
    shown = capsys.readouterr().out
    assert "dialogues" in shown and "shortest-path histogram" in shown
    blob = json.loads((out / "stats.json").read_text())
    assert blob["n_turns"] == 150
    lines = (out / "path_hist.csv").read_text().strip().splitlines()
    assert lines[0] == "hops,pairs"
    assert lines[-1].startswith("unreachable,")


def test_stats_profile_comparison_reports_rows(bundle_dir, capsys):
    # synthetic corpus vs a released-corpus profile: every deviation is
    # its own row, and the command still exits 0
    assert cli.main(["stats", "--bundle", str(bundle_dir),
                     "--expect", "hgzhz"]) == 0
    shown = capsys.readouterr().out
    assert "MISMATCH" in shown
    assert "rows deviate" in shown


def test_train_artifacts(run_dir):
    assert (run_dir / "model.ckpt").exists()
    log_lines = (run_dir / "train_log.jsonl").read_text().strip().splitlines()
    assert log_lines
    rec = json.loads(log_lines[0])
    assert rec["phase"] == "main" and rec["epoch"] == 1
    cfg = json.loads((run_dir / "config.json").read_text())
    assert cfg["config"]["hidden"] == 24


def test_train_seq2seq_dispatch(seq_dir):
    model = load_checkpoint(seq_dir / "model.ckpt")
    assert model.kind == "seq2seq"
    assert "out_w" in model.params


def test_eval_writes_report_and_csv(ws, bundle_dir, run_dir):
    out = ws / "eval"
    assert cli.main(["eval", "--bundle", str(bundle_dir), "--checkpoint",
                     str(run_dir / "model.ckpt"), "--out", str(out)]) == 0
    blob = json.loads((out / "report.json").read_text())
    assert blob["kind"] == "qadpt"
    assert set(blob["metrics"]) == {"ppl", "kw_acc", "kw_acc_soft",
                                    "kw_generic", "generated_kw", "bleu2",
                                    "distinct", "unreachable_targets"}
    assert blob["config"]["split"] == "test"
    lines = (out / "metrics.csv").read_text().strip().splitlines()
    assert lines[0] == "metric,value"
    assert len(lines) == 1 + len(cli.METRIC_NAMES)


def test_eval_metric_selection(ws, bundle_dir, run_dir):
    out = ws / "eval_sel"
    assert cli.main(["eval", "--bundle", str(bundle_dir), "--checkpoint",
                     str(run_dir / "model.ckpt"), "--out", str(out),
                     "--metrics", "bleu2,distinct_2,kw_generic_f1"]) == 0
    blob = json.loads((out / "report.json").read_text())
    assert set(blob["metrics"]) == {"bleu2", "distinct", "kw_generic"}
    assert list(blob["metrics"]["distinct"]) == ["2"]
    lines = (out / "metrics.csv").read_text().strip().splitlines()
    assert [l.split(",")[0] for l in lines[1:]] == \
        ["kw_generic_f1", "bleu2", "distinct_2"]


def test_eval_unknown_metric_is_usage_error(ws, bundle_dir, run_dir):
    code = cli.main(["eval", "--bundle", str(bundle_dir), "--checkpoint",
                     str(run_dir / "model.ckpt"), "--out", str(ws / "x"),
                     "--metrics", "made_up"])
    assert code == 2


def test_eval_vocab_mismatch_is_data_error(ws, run_dir):
    other = ws / "other_bundle"
    assert cli.main(["synth", "--out", str(other), "--n_people", "6",
                     "--n_places", "3", "--n_jobs", "3", "--n_turns", "120",
                     "--seed", "4"]) == 0
    code = cli.main(["eval", "--bundle", str(other), "--checkpoint",
                     str(run_dir / "model.ckpt"), "--out", str(ws / "y")])
    assert code == 3


def test_perturb_report_and_determinism(ws, bundle_dir, run_dir):
    out1, out2 = ws / "p1", ws / "p2"
    for out in (out1, out2):
        assert cli.main(["perturb", "--bundle", str(bundle_dir),
                         "--checkpoint", str(run_dir / "model.ckpt"),
                         "--out", str(out), "--mode", "last1",
                         "--seed", "11"]) == 0
    blob = json.loads((out1 / "perturb.json").read_text())
    assert blob["mode"] == "last1"
    assert blob["n_turns"] + blob["n_skipped"] == len(blob["turns"])
    assert (out1 / "perturb.json").read_bytes() == \
        (out2 / "perturb.json").read_bytes()
    diff = (out1 / "diff.log").read_text().strip().splitlines()
    assert len(diff) == len(blob["turns"])


def test_perturb_seq2seq_never_changes(ws, bundle_dir, seq_dir):
    out = ws / "pseq"
    assert cli.main(["perturb", "--bundle", str(bundle_dir), "--checkpoint",
                     str(seq_dir / "model.ckpt"), "--out", str(out),
                     "--mode", "all", "--seed", "2"]) == 0
    blob = json.loads((out / "perturb.json").read_text())
    assert blob["change_rate"] == 0.0


def test_perturb_bad_mode_is_usage_error(ws, bundle_dir, run_dir):
    code = cli.main(["perturb", "--bundle", str(bundle_dir), "--checkpoint",
                     str(run_dir / "model.ckpt"), "--out", str(ws / "z"),
                     "--mode", "sideways"])
    assert code == 2


def test_config_file_and_override_precedence(ws, bundle_dir):
    cfg_file = ws / "train.cfg"
    cfg_file.write_text("# comment\nhidden = 20\nepochs=2\npatience = 5\n")
    out = ws / "cfgrun"
    assert cli.main(["train", "--bundle", str(bundle_dir), "--out", str(out),
                     "--config", str(cfg_file), "--hidden", "12",
                     "--embed", "8"]) == 0
    resolved = json.loads((out / "config.json").read_text())["config"]
    assert resolved["hidden"] == 12      # CLI override wins
    assert resolved["epochs"] == 2       # file value kept
    model = load_checkpoint(out / "model.ckpt")
    assert model.hyper.hidden_dim == 12


def test_unknown_config_key_exits_2(ws, bundle_dir):
    cfg_file = ws / "bad.cfg"
    cfg_file.write_text("no_such_key=1\n")
    assert cli.main(["train", "--bundle", str(bundle_dir),
                     "--out", str(ws / "never"),
                     "--config", str(cfg_file)]) == 2


def test_malformed_config_line_exits_2(ws, bundle_dir):
    cfg_file = ws / "bad2.cfg"
    cfg_file.write_text("hidden\n")
    assert cli.main(["train", "--bundle", str(bundle_dir),
                     "--out", str(ws / "never2"),
                     "--config", str(cfg_file)]) == 2


def test_unknown_flag_exits_2(bundle_dir):
    assert cli.main(["train", "--bundle", str(bundle_dir), "--out", "/tmp/n",
                     "--nonsense", "5"]) == 2


def test_missing_subcommand_exits_2():
    assert cli.main([]) == 2


def test_missing_bundle_exits_3(ws, run_dir):
    code = cli.main(["eval", "--bundle", str(ws / "does_not_exist"),
                     "--checkpoint", str(run_dir / "model.ckpt"),
                     "--out", str(ws / "q")])
    assert code == 3


def test_corrupt_checkpoint_exits_3(ws, bundle_dir):
    bad = ws / "bad.ckpt"
    bad.write_bytes(b"junk" * 10)
    code = cli.main(["eval", "--bundle", str(bundle_dir),
                     "--checkpoint", str(bad), "--out", str(ws / "r")])
    assert code == 3


def test_train_determinism_bit_identical_checkpoints(ws, bundle_dir):
    outs = []
    for name in ("da", "db"):
        out = ws / name
        assert cli.main(["train", "--bundle", str(bundle_dir),
                         "--out", str(out), "--hidden", "16", "--embed", "12",
                         "--epochs", "2", "--patience", "5",
                         "--seed", "7"]) == 0
        outs.append(out)
    a = (outs[0] / "model.ckpt").read_bytes()
    b = (outs[1] / "model.ckpt").read_bytes()
    assert a == b


def test_eval_determinism_bit_identical_reports(ws, bundle_dir, run_dir):
    blobs = []
    for name in ("ea", "eb"):
        out = ws / name
        assert cli.main(["eval", "--bundle", str(bundle_dir), "--checkpoint",
                         str(run_dir / "model.ckpt"), "--out", str(out),
                         "--workers", "2"]) == 0
        blobs.append((out / "report.json").read_bytes())
    assert blobs[0] == blobs[1]


# ---------------------------------------------------------------------------
# Chat REPL
#
# The golden scenario uses handcrafted parameters: everything zero
# except a strong controller bias, so the decoder deterministically
# emits the entity the walk lands on. Exact argmax, no BLAS noise:
# the transcript is stable across machines.


def _golden_checkpoint(ws) -> tuple:
    vocab = Vocabulary(generic=("hello", "yes"), entities=("a", "b", "c"),
                       relations=("q", "r"))
    hyper = Hyperparams(hidden_dim=4, embed_dim=4, n_hops=2,
                        max_decode_len=4, seed=0)
    params = {name: np.zeros_like(arr)
              for name, arr in init_params(hyper, vocab, seed=0).items()}
    params["phi_b"][0] = 5.0   # route nearly all mass to the entity branch
    model = QadptModel(hyper, vocab, params)
    ckpt = ws / "golden.ckpt"
    save_checkpoint(model, ckpt)
    kg = ws / "golden_graph.tsv"
    save_triples_tsv(KnowledgeGraph([Triple("a", "q", "b")],
                                    extra_entities=["c"]), kg)
    return ckpt, kg


SCRIPT = "\n".join([
    "a hello",
    "/swap a q b c",
    "a hello",
    "/swap a q b c",
    "/swap",
    "/unknown",
    "/quit",
]) + "\n"


def _run_chat(ckpt, kg) -> str:
    proc = subprocess.run(
        [sys.executable, "-m", "kgchat.cli", "chat", "--checkpoint",
         str(ckpt), "--kg", str(kg), "--max_decode_len", "4"],
        input=SCRIPT, capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    return proc.stdout


def test_chat_golden_transcript(ws):
    ckpt, kg = _golden_checkpoint(ws)
    got = _run_chat(ckpt, kg)
    golden = (DATA / "chat_golden.txt").read_text()
    assert got == golden


def test_chat_swap_changes_the_reply(ws):
    ckpt, kg = _golden_checkpoint(ws)
    out = _run_chat(ckpt, kg)
    # before the swap the walk ends at b, afterwards at c
    assert "b b b b" in out
    assert "c c c c" in out
    assert "path: a -q-> b" in out
    assert "path: a -q-> c" in out
    # second /swap of the same triple fails, malformed commands get usage
    assert "no such triple" in out
    assert out.count(cli.CHAT_USAGE) >= 2   # banner plus the two rejects


def test_chat_eof_exits_cleanly(ws):
    ckpt, kg = _golden_checkpoint(ws)
    proc = subprocess.run(
        [sys.executable, "-m", "kgchat.cli", "chat", "--checkpoint",
         str(ckpt), "--kg", str(kg)],
        input="", capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0


def test_chat_requires_graph_source(ws):
    ckpt, _ = _golden_checkpoint(ws)
    assert cli.main(["chat", "--checkpoint", str(ckpt)]) == 3
