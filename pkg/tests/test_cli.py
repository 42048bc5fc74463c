import json
import logging
import shutil

import pytest

from swarmrank.cli import ArtifactStore, build_parser, main
from swarmrank.config import ConfigError, load_config
from swarmrank.gnn import init_model, load_checkpoint, read_checkpoint_header

SMALL_CFG = """\
# small end-to-end config
synth.n_engineers = 30
synth.n_components = 5
synth.n_incidents = 500
synth.n_kbas = 40
synth.experts_per_component = 4
synth.seed = 5
train.epochs = 2
train.batch_size = 256
walk.walk_count = 30
model.msg_dim = 16
model.hidden_dim = 16
model.embed_dim = 8
featurize.text_dim = 32
"""

SUBCOMMAND_FLAGS = {
    "synth": ["--config", "--set", "--out"],
    "train": ["--config", "--set", "--deterministic", "--threads", "--force"],
    "rank": ["--swarm", "--k", "--lambda", "--index", "--output"],
    "bench": ["--config", "--set", "--deterministic", "--threads"],
    "check": ["--seeds"],
}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.cfg"
    cfg.write_text(SMALL_CFG + f"run.outdir = {root / 'run'}\n")
    assert main(["synth", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg), "--deterministic"]) == 0
    return root, cfg


@pytest.fixture
def query_file(tmp_path):
    p = tmp_path / "q.json"
    p.write_text(json.dumps({"description": "c0t1 c0t2 c0t3", "communication_summary": "", "component_ids": ["C0"]}))
    return p


def _ckpt(root):
    return root / "run" / ArtifactStore.CHECKPOINT


def test_help_lists_every_flag(capsys):
    for cmd, flags in SUBCOMMAND_FLAGS.items():
        assert main([cmd, "--help"]) == 0
        out = capsys.readouterr().out
        for flag in flags:
            assert flag in out, (cmd, flag)
    assert main(["--help"]) == 0
    out = capsys.readouterr().out
    assert all(cmd in out for cmd in SUBCOMMAND_FLAGS)


def test_usage_errors_exit_one(capsys, tmp_path):
    assert main([]) == 1
    assert main(["train", "--bogus"]) == 1
    assert main(["teleport"]) == 1
    assert main(["train", "--config", str(tmp_path / "nope.cfg")]) == 1
    assert main(["synth", "--set", "train.momentum=0.9", "--out", str(tmp_path)]) == 1
    assert "train.momentum" in capsys.readouterr().err
    assert main(["synth", "--set", "synth.noise=7", "--out", str(tmp_path)]) == 1
    assert "noise" in capsys.readouterr().err


def test_config_layers(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("train.margin = 0.3\nrun.seed = 4\n")
    cfg = load_config(p, {"train.epochs": "7"}, {"SWARMRANK_TRAIN__MARGIN": "0.4", "OTHER": "x"})
    assert (cfg.train.margin, cfg.train.epochs, cfg.train_config.seed) == (0.4, 7, 4)
    with pytest.raises(ConfigError, match="run.seed"):
        load_config(None, {"train.seed": "3"}, {})
    with pytest.raises(ConfigError, match="edge_types"):
        load_config(None, {"graph.edge_types": "RESOLVED,NOPE"}, {})
    a = load_config(None, {}, {})
    assert a.training_hash("x") == load_config(None, {"run.outdir": "elsewhere"}, {}).training_hash("x")
    assert a.training_hash("x") != load_config(None, {"train.margin": "0.5"}, {}).training_hash("x")


def test_synth_outputs_and_determinism(run_dir, tmp_path):
    root, cfg = run_dir
    corpus = root / "run" / "corpus"
    for name in ("incidents.jsonl", "engineers.jsonl", "kbas.jsonl", "swarms.jsonl", "components.jsonl",
                 "truth.tsv", "manifest.txt"):
        assert (corpus / name).exists(), name
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    for name in ("incidents.jsonl", "swarms.jsonl", "truth.tsv"):
        assert (corpus / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_train_artifacts_are_stamped(run_dir):
    root, _ = run_dir
    store = ArtifactStore(root / "run")
    stamps = store.stamps()
    header = read_checkpoint_header(_ckpt(root))
    for name in (store.CHECKPOINT, store.INDEX, store.VOCABULARY, store.EDGES, store.HISTORY, store.CONFIG):
        assert (root / "run" / name).exists()
        assert stamps[name] == header["config_hash"]
    lines = (root / "run" / store.HISTORY).read_text().splitlines()
    assert lines[0] == "epoch,loss,val_hit,seconds" and len(lines) >= 2


def test_deterministic_train_and_bench_are_byte_identical(run_dir, tmp_path):
    root, cfg = run_dir
    assert main(["bench", "--config", str(cfg), "--deterministic"]) == 0
    first_ckpt = _ckpt(root).read_bytes()
    first_bench = (root / "run" / "bench.csv").read_bytes()
    assert main(["train", "--config", str(cfg), "--deterministic"]) == 0
    assert main(["bench", "--config", str(cfg), "--deterministic"]) == 0
    assert _ckpt(root).read_bytes() == first_ckpt
    assert (root / "run" / "bench.csv").read_bytes() == first_bench


def test_bench_table_shape(run_dir, capsys):
    root, cfg = run_dir
    assert main(["bench", "--config", str(cfg), "--deterministic"]) == 0
    rows = (root / "run" / "bench.csv").read_text().splitlines()[1:]
    measured = [r for r in rows if r.endswith(",measured")]
    assert len(measured) == 6 * 3
    assert {r.split(",")[0] for r in measured} == {"gnn", "tfidf", "weighted", "popularity", "random", "oracle"}
    assert any(r.endswith(",published") for r in rows)
    assert "oracle" in capsys.readouterr().out


def test_train_refuses_mismatched_config(run_dir, tmp_path):
    root, cfg = run_dir
    backup = tmp_path / "backup"
    shutil.copytree(root / "run", backup, ignore=shutil.ignore_patterns("corpus"))
    before = _ckpt(root).read_bytes()
    assert main(["train", "--config", str(cfg), "--set", "train.margin=0.3"]) == 2
    assert _ckpt(root).read_bytes() == before
    # bench refuses to evaluate a checkpoint from another config
    assert main(["bench", "--config", str(cfg), "--set", "train.margin=0.3"]) == 2


def test_rank_outputs(run_dir, query_file, tmp_path, capsys):
    root, _ = run_dir
    out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["rank", str(_ckpt(root)), str(query_file), "--output", str(out1)]) == 0
    assert main(["rank", str(_ckpt(root)), str(query_file), "--output", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    rows = out1.read_text().splitlines()
    assert rows[0] == "rank,engineer_id,score" and len(rows) == 31
    top = rows[1].split(",")[1]
    assert main(["rank", str(_ckpt(root)), str(query_file), "--k", "1"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 2
    assert main(["rank", str(_ckpt(root)), str(query_file), "--swarm", top]) == 0
    ids = [line.split(",")[1] for line in capsys.readouterr().out.splitlines()[1:]]
    assert top not in ids and len(ids) == 29
    assert main(["rank", str(_ckpt(root)), str(query_file), "--k", "0"]) == 1


def test_rank_debug_lists_similar_kbas(run_dir, query_file, caplog):
    root, _ = run_dir
    with caplog.at_level(logging.DEBUG, logger="swarmrank"):
        assert main(["rank", str(_ckpt(root)), str(query_file), "--k", "1"]) == 0
    assert sum("similar KBA" in r.message for r in caplog.records) == 10


def test_rank_refuses_changed_corpus(run_dir, query_file, tmp_path):
    root, _ = run_dir
    moved = tmp_path / "copy"
    shutil.copytree(root / "run", moved)
    header = read_checkpoint_header(moved / "model.ckpt")
    incidents = root / "run" / "corpus" / "incidents.jsonl"
    original = incidents.read_bytes()
    try:
        lines = original.decode().splitlines()
        incidents.write_text("\n".join(lines[1:]) + "\n")
        assert main(["rank", str(_ckpt(root)), str(query_file)]) == 2
    finally:
        incidents.write_bytes(original)
    assert header["corpus_hash"]


def test_rank_refuses_foreign_index(run_dir, query_file, tmp_path):
    root, _ = run_dir
    from swarmrank.rank import EngineerIndex
    import numpy as np
    idx = EngineerIndex(["E00"], np.ones((1, 8)), "deadbeef")
    idx.save(tmp_path / "foreign.npz")
    assert main(["rank", str(_ckpt(root)), str(query_file), "--index", str(tmp_path / "foreign.npz")]) == 2


def test_zero_epochs_checkpoint_equals_initialization(tmp_path):
    cfg = tmp_path / "z.cfg"
    cfg.write_text(SMALL_CFG + f"run.outdir = {tmp_path / 'run'}\ntrain.epochs = 0\nrun.seed = 9\n")
    assert main(["synth", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg)]) == 0
    model, header = load_checkpoint(tmp_path / "run" / "model.ckpt")
    init = init_model(int(header["input_dim"]), 2, 16, 16, 8, seed=9)
    assert model.content_hash() == init.content_hash()


def test_empty_test_split_is_a_data_error(run_dir, tmp_path, capsys):
    root, cfg = run_dir
    corpus = tmp_path / "corpus"
    shutil.copytree(root / "run" / "corpus", corpus)
    manifest = corpus / "manifest.txt"
    manifest.write_text(manifest.read_text().replace("val_cutoff = 2020-07-01", "val_cutoff = 2030-01-01"))
    assert main(["bench", "--config", str(cfg), "--set", f"data.manifest={manifest}"]) == 2
    assert "test split is empty" in capsys.readouterr().err


def test_manifest_cutoffs_take_precedence(run_dir, caplog):
    root, cfg = run_dir
    assert main(["bench", "--config", str(cfg), "--deterministic", "--set", "data.val_cutoff=2030-01-01"]) == 0
    assert "config value 2030-01-01 is ignored" in caplog.text


def test_check_command(capsys):
    assert main(["check", "--seeds", "2"]) == 0
    out = capsys.readouterr().out
    assert out.count("gradient check seed") == 2 and "embedding norms" in out


def test_parser_builds():
    assert build_parser().prog == "swarmrank"
