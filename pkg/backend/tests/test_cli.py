import json
import time
from pathlib import Path

import pytest

from main import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from services.checkpoint import MANIFEST_FILE, PARAMS_FILE, read_manifest

GEN_CONFIG = """
n_entities=40
n_relations=5
n_triples=110
hops_max=2
reasoner_hops=3
n_examples=60
valid_size=10
test_size=10
n_values=10
"""

TRAIN_CONFIG = """
d=8
hops=3
top_k=2
batch_size=8
grad_accum_steps=1
learning_rate=0.01
max_response_len=4
"""

TABLES = [
    {"domain": "schedule", "attributes": {"event": "tennis activity", "time": "7pm", "party": "sister"}},
    {"domain": "navigation", "attributes": {"poi": "Chevron", "poi_type": "gas station", "distance": "3 miles"}},
]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Synthetic data plus a one-epoch checkpoint shared by the slower CLI tests."""
    root = tmp_path_factory.mktemp("pipeline")
    (root / "gen.env").write_text(GEN_CONFIG, encoding="utf-8")
    (root / "train.env").write_text(TRAIN_CONFIG, encoding="utf-8")
    data, ckpt = root / "data", root / "ckpt"
    assert main(["gen", "--config", str(root / "gen.env"), "--seed", "4", "--out", str(data)]) == EXIT_OK
    assert main(["train", "--data", str(data), "--kg", str(data / "triples.tsv"), "--config",
                 str(root / "train.env"), "--out", str(ckpt), "--max-epochs", "1"]) == EXIT_OK
    return root, data, ckpt


def test_build_kg_from_tables(tmp_path, capsys):
    tables = tmp_path / "tables.jsonl"
    tables.write_text("\n".join(json.dumps(t) for t in TABLES) + "\n", encoding="utf-8")
    out = tmp_path / "kg.tsv"
    assert main(["build-kg", "--tables", str(tables), "--out", str(out)]) == EXIT_OK
    assert "tennis activity\tHasTime\t7pm" in out.read_text(encoding="utf-8").splitlines()
    assert "Chevron\tHasType\tgas station" in out.read_text(encoding="utf-8").splitlines()
    assert capsys.readouterr().out.startswith("KG: N_E=")


def test_build_kg_passthrough_dedups(tmp_path, capsys):
    raw = tmp_path / "raw.tsv"
    raw.write_text("A\tr\tB\nA\tr\tB\nB\ts\tC\n", encoding="utf-8")
    out = tmp_path / "kg.tsv"
    assert main(["build-kg", "--triples", str(raw), "--out", str(out)]) == EXIT_OK
    assert out.read_text(encoding="utf-8").splitlines() == ["A\tr\tB", "B\ts\tC"]
    assert "N_T=2" in capsys.readouterr().out


def test_build_kg_errors(tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("", encoding="utf-8")
    assert main(["build-kg", "--tables", str(empty), "--out", str(tmp_path / "kg.tsv")]) == EXIT_DATA
    assert main(["build-kg", "--triples", str(tmp_path / "missing.tsv"), "--out", str(tmp_path / "kg.tsv")]) \
        == EXIT_DATA
    with pytest.raises(SystemExit) as excinfo:
        main(["build-kg", "--tables", "a", "--triples", "b", "--out", "c"])
    assert excinfo.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as excinfo:
        main(["no-such-command"])
    assert excinfo.value.code == EXIT_USAGE


def test_gen_writes_splits(pipeline, capsys):
    root, data, _ = pipeline
    for name in ("triples.tsv", "train.jsonl", "valid.jsonl", "test.jsonl"):
        assert (data / name).exists()
    assert len((data / "test.jsonl").read_text(encoding="utf-8").splitlines()) == 10
    out = root / "again"
    assert main(["gen", "--config", str(root / "gen.env"), "--seed", "4", "--out", str(out)]) == EXIT_OK
    printed = capsys.readouterr().out.splitlines()
    assert "triples\t110" in printed
    assert "train\t40" in printed
    assert (out / "train.jsonl").read_text(encoding="utf-8") == (data / "train.jsonl").read_text(encoding="utf-8")


def test_train_writes_checkpoint(pipeline):
    _, _, ckpt = pipeline
    manifest = read_manifest(ckpt)
    assert manifest.epoch == 1
    assert manifest.dims.d == 8
    assert (ckpt / "metrics.tsv").exists()


def test_train_is_bitwise_reproducible(pipeline, tmp_path):
    root, data, _ = pipeline
    runs = []
    for workers in ("1", "2"):
        out = tmp_path / f"ckpt{workers}"
        assert main(["train", "--data", str(data), "--kg", str(data / "triples.tsv"), "--config",
                     str(root / "train.env"), "--out", str(out), "--max-epochs", "2", "--seed", "11",
                     "--workers", workers]) == EXIT_OK
        runs.append(out)
    for name in (PARAMS_FILE, MANIFEST_FILE):
        assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes()


def test_gen_output_ignores_workers(pipeline, tmp_path):
    root, data, _ = pipeline
    out = tmp_path / "threaded"
    assert main(["gen", "--config", str(root / "gen.env"), "--seed", "4", "--workers", "3",
                 "--out", str(out)]) == EXIT_OK
    for name in ("triples.tsv", "train.jsonl", "valid.jsonl", "test.jsonl"):
        assert (out / name).read_bytes() == (data / name).read_bytes()
    assert main(["gen", "--config", str(root / "gen.env"), "--workers", "0", "--out", str(out)]) == EXIT_USAGE


def test_train_config_errors(pipeline, tmp_path):
    root, data, _ = pipeline
    kg = str(data / "triples.tsv")
    assert main(["train", "--data", str(data), "--kg", kg, "--config", str(tmp_path / "missing.env"),
                 "--out", str(tmp_path / "out")]) == EXIT_DATA
    bad = tmp_path / "bad.env"
    bad.write_text("d=0\n", encoding="utf-8")
    assert main(["train", "--data", str(data), "--kg", kg, "--config", str(bad),
                 "--out", str(tmp_path / "out")]) == EXIT_USAGE
    unknown = tmp_path / "unknown.env"
    unknown.write_text("dropout=0.1\n", encoding="utf-8")
    assert main(["train", "--data", str(data), "--kg", kg, "--config", str(unknown),
                 "--out", str(tmp_path / "out")]) == EXIT_USAGE


def test_resume_refuses_other_dimensions(pipeline, tmp_path):
    root, data, ckpt = pipeline
    wider = tmp_path / "wider.env"
    wider.write_text(TRAIN_CONFIG.replace("d=8", "d=12"), encoding="utf-8")
    assert main(["train", "--data", str(data), "--kg", str(data / "triples.tsv"), "--config", str(wider),
                 "--out", str(ckpt), "--max-epochs", "1", "--resume"]) == EXIT_DATA
    assert read_manifest(ckpt).dims.d == 8


def test_eval_writes_report(pipeline, tmp_path, capsys):
    _, data, ckpt = pipeline
    base = tmp_path / "report"
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(data / "test.jsonl"), "--kg", str(data / "triples.tsv"),
                 "--workers", "2", "--report", str(base)]) == EXIT_OK
    printed = capsys.readouterr().out
    assert printed.startswith("metric\tvalue\nn_examples\t10\n")
    assert json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))["n_examples"] == 10
    assert (tmp_path / "report.tsv").read_text(encoding="utf-8") == printed


def test_eval_on_shuffled_triples(pipeline, capsys):
    _, data, ckpt = pipeline
    args = ["eval", "--ckpt", str(ckpt), "--data", str(data / "test.jsonl"), "--kg", str(data / "triples.tsv")]
    assert main(args) == EXIT_OK
    plain = capsys.readouterr().out
    assert main(args + ["--shuffle-triples", "9"]) == EXIT_OK
    assert capsys.readouterr().out == plain


def test_eval_missing_checkpoint(pipeline, tmp_path):
    _, data, _ = pipeline
    assert main(["eval", "--ckpt", str(tmp_path), "--data", str(data / "test.jsonl"),
                 "--kg", str(data / "triples.tsv")]) == EXIT_DATA


def test_trace_output(pipeline, capsys):
    _, data, ckpt = pipeline
    args = ["trace", "--ckpt", str(ckpt), "--kg", str(data / "triples.tsv"),
            "--history", "what is the distance of ent0 ?", "--entities", "ent0"]
    assert main(args) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert [line.split("\t")[0] for line in lines[:3]] == ["hop 1", "hop 2", "hop 3"]
    assert all("\tgate: walk " in line for line in lines[:3])
    assert lines[-1].startswith("response\t")

    assert main(args + ["--json"]) == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert [hop["hop"] for hop in payload["hops"]] == [1, 2, 3]
    assert "response" in payload and "paths" in payload

    assert main(args[:-1] + ["nobody"]) == EXIT_DATA


def test_gradcheck_command(tmp_path, capsys):
    config = tmp_path / "gradcheck.env"
    config.write_text("d=6\nhops=2\nmax_coords=10\n", encoding="utf-8")
    assert main(["gradcheck", "--config", str(config)]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[-1].startswith("max\t")
    assert all(line.endswith("\tok") for line in lines[:-1])

    strict = tmp_path / "strict.env"
    strict.write_text("d=6\nhops=2\nmax_coords=10\ntolerance=1e-300\n", encoding="utf-8")
    assert main(["gradcheck", "--config", str(strict), "--mode", "walk-only"]) == EXIT_NUMERIC


def test_manifest_file_name(pipeline):
    _, _, ckpt = pipeline
    assert (ckpt / MANIFEST_FILE).is_file()


@pytest.mark.slow
def test_synthetic_benchmark_learns(tmp_path):
    configs = Path(__file__).resolve().parents[1] / "configs"
    data, ckpt, report = tmp_path / "data", tmp_path / "ckpt", tmp_path / "report"
    started = time.monotonic()
    assert main(["gen", "--config", str(configs / "synthetic.env"), "--workers", "4", "--out", str(data)]) == EXIT_OK
    assert main(["train", "--data", str(data), "--kg", str(data / "triples.tsv"), "--config",
                 str(configs / "train.env"), "--out", str(ckpt)]) == EXIT_OK
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(data / "test.jsonl"), "--kg", str(data / "triples.tsv"),
                 "--workers", "4", "--report", str(report)]) == EXIT_OK
    assert time.monotonic() - started <= 15 * 60

    scores = json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))
    assert scores["n_examples"] == 500
    assert scores["by_reasoning_type"]["inform"]["path_at_1"] >= 0.90
    assert scores["exact_match"] >= 0.80
    assert scores["by_reasoning_type"]["extraction"]["token_f1"] >= 0.80
