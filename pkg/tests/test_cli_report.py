import csv
import json

import pytest

from argmtl.cli import ExperimentConfig, main
from argmtl.data import load_corpus, load_embeddings
from argmtl.report import RESULT_FIELDS, read_results, summarize, write_report
from argmtl.trainer import load_records

SMALL = {"scenario_sizes": {"21K": 1500, "12K": 1000, "6K": 600, "1K": 300},
         "dev_tokens": 300, "test_tokens": 300}


def _write_config(tmp_path, datasets, **extra):
    cfg = {"datasets": [{"id": i, "path": p} for i, p in datasets], "output_dir": "out", **extra}
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg))
    return path


def _gen(tmp_path, name, tokens, types=("claim", "premise"), seed=0):
    path = tmp_path / f"{name}.conll"
    assert main(["gen-synth", "--out", str(path), "--tokens", str(tokens), "--types",
                 ",".join(types), "--seed", str(seed), "--name", name]) == 0
    return path.name


@pytest.fixture
def small_experiment(tmp_path):
    m = _gen(tmp_path, "main", 2600)
    a = _gen(tmp_path, "aux", 2600, types=("reason",), seed=1)
    cfg = _write_config(tmp_path, [("main", m), ("aux", a)], embedding_dim=8,
                        search={"layouts": [[4]]},
                        train={"batch_size": 8, "max_epochs": 1, "patience": 1}, **SMALL)
    assert main(["prepare", "--config", str(cfg)]) == 0
    return cfg


# prepare -----------------------------------------------------------------------------


def test_prepare_writes_four_manifests_idempotently(tmp_path):
    corpus = _gen(tmp_path, "big", 36_000)
    cfg = _write_config(tmp_path, [("big", corpus)])
    assert main(["prepare", "--config", str(cfg)]) == 0
    manifests = sorted((tmp_path / "out" / "scenarios" / "big").glob("*.json"))
    assert [m.name for m in manifests] == ["12K.json", "1K.json", "21K.json", "6K.json"]
    first = {m.name: m.read_bytes() for m in manifests}
    body = json.loads(first["1K.json"])
    assert body["k"] == "1K" and body["tokens"]["train"] >= 1000 and "corpus_sha256" in body
    assert main(["prepare", "--config", str(cfg)]) == 0
    assert {m.name: m.read_bytes() for m in manifests} == first


def test_prepare_reports_insufficient_data(tmp_path, capsys):
    corpus = _gen(tmp_path, "tiny", 10_000)
    cfg = _write_config(tmp_path, [("tiny", corpus)])
    assert main(["prepare", "--config", str(cfg)]) == 3
    err = capsys.readouterr().err
    assert "insufficient" in err and "tiny" in err


def test_bad_config_exits_2(tmp_path):
    assert main(["prepare", "--config", str(tmp_path / "missing.json")]) == 2
    cfg = _write_config(tmp_path, [("x", "nope.conll")])
    assert main(["prepare", "--config", str(cfg)]) == 2


def test_config_paths_resolve_against_config_dir(tmp_path):
    corpus = _gen(tmp_path, "c", 100)
    cfg = ExperimentConfig.load(_write_config(tmp_path, [("c", corpus)]))
    assert cfg.datasets["c"] == tmp_path / corpus
    assert cfg.output_dir == tmp_path / "out"
    assert cfg.search.embedding_ids == ("random",)


# search / train --------------------------------------------------------------------------


def test_stl_search_records_runs(small_experiment, tmp_path):
    args = ["search", "--config", str(small_experiment), "--mode", "stl", "--main", "main",
            "--k", "1K", "--runs", "2", "--seed", "3"]
    assert main(args) == 0
    out = tmp_path / "out"
    records = load_records(out / "runs.jsonl")
    assert len(records) == 2 and all(r.completed for r in records)
    assert len(read_results(out / "results.csv")) == 2
    manifests = sorted((out / "runs").glob("*.json"))
    assert len(manifests) == 2
    assert len(json.loads(manifests[0].read_text())["scenario_manifest_sha256"]) == 16


def test_interrupted_search_resumes_append_only(small_experiment, tmp_path):
    base = ["search", "--config", str(small_experiment), "--mode", "stl", "--main", "main",
            "--k", "1K", "--seed", "5"]
    assert main(base + ["--runs", "1"]) == 0
    runs = tmp_path / "out" / "runs.jsonl"
    before = runs.read_text()
    assert main(base + ["--runs", "3"]) == 0
    after = runs.read_text()
    assert after.startswith(before)
    assert [r.run_id for r in load_records(runs)] == [0, 1, 2]


def test_mtl_without_aux_is_a_configuration_error(tmp_path):
    m = _gen(tmp_path, "solo", 2600)
    cfg = _write_config(tmp_path, [("solo", m)], **SMALL)
    assert main(["prepare", "--config", str(cfg)]) == 0
    assert main(["search", "--config", str(cfg), "--mode", "mtl", "--main", "solo", "--k",
                 "1K", "--runs", "1"]) == 2


def test_missing_manifest_is_a_configuration_error(tmp_path):
    m = _gen(tmp_path, "m", 100)
    cfg = _write_config(tmp_path, [("m", m)])
    assert main(["search", "--config", str(cfg), "--mode", "stl", "--main", "m", "--k", "1K",
                 "--runs", "1"]) == 2


def test_mtl_and_union_train_commands(small_experiment, tmp_path, capsys):
    for mode in ("mtl", "union"):
        assert main(["train", "--config", str(small_experiment), "--mode", mode, "--main",
                     "main", "--k", "1K", "--layers", "4", "--seed", "1"]) == 0
        assert json.loads(capsys.readouterr().out)["status"] == "ok"
    records = load_records(tmp_path / "out" / "runs.jsonl")
    assert [r.plan.mode for r in records] == ["mtl", "union"]
    assert [r.run_id for r in records] == [0, 1]
    assert records[0].plan.aux == ("aux",)


# report ------------------------------------------------------------------------------------

VAR = {"stl": [31.30, 38.89, 42.85, 43.34], "mtl": [37.10, 42.14, 45.63, 47.39]}
SIZES = ["1K", "6K", "12K", "21K"]


def _results_fixture(path, skip=()):
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, extrasaction="ignore")
        w.writeheader()
        run = 0
        for mode, scores in VAR.items():
            for k, s in zip(SIZES, scores):
                if (mode, k) in skip:
                    continue
                w.writerow({"run_id": run, "dataset": "var", "k": k, "mode": mode,
                            "status": "ok", "dev_score": 0.5, "test_score": s / 100})
                run += 1


def test_report_reproduces_published_curve(tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    _results_fixture(out / "results.csv")
    corpus = _gen(tmp_path, "var", 50)
    cfg = _write_config(tmp_path, [("var", corpus)])
    assert main(["report", "--config", str(cfg)]) == 0
    with (out / "curves.csv").open() as fh:
        rows = {r["k"]: r for r in csv.DictReader(fh)}
    assert len(rows) == 4
    assert float(rows["1K"]["delta"]) == pytest.approx(0.1853, abs=1e-4)
    assert float(rows["21K"]["delta"]) == pytest.approx(0.1294, abs=1e-4)
    report = (out / "report.txt").read_text()
    assert "31.30" in report and "47.39" in report
    assert (out / "curves.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_report_marks_missing_cells(tmp_path):
    _results_fixture(tmp_path / "results.csv", skip={("mtl", "6K")})
    paths = write_report(read_results(tmp_path / "results.csv"), tmp_path, figure=False)
    grid = paths["report"].read_text()
    mtl_line = next(line for line in grid.splitlines() if line.startswith("var") and "MTL" in line)
    assert "-" in mtl_line.split()
    with paths["curves"].open() as fh:
        assert [r["k"] for r in csv.DictReader(fh)] == ["1K", "12K", "21K"]


def test_report_significance_stars(tmp_path):
    path = tmp_path / "results.csv"
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, extrasaction="ignore")
        w.writeheader()
        for i in range(10):
            w.writerow({"run_id": i, "dataset": "d", "k": "1K", "mode": "stl", "status": "ok",
                        "dev_score": 0.5, "test_score": 0.30 + i / 1000})
            w.writerow({"run_id": 10 + i, "dataset": "d", "k": "1K", "mode": "mtl",
                        "status": "ok", "dev_score": 0.5, "test_score": 0.40 + i / 1000})
    cells = summarize(read_results(path))
    assert cells[("d", "1K", "mtl")].mean == pytest.approx(0.4045)
    grid = write_report(read_results(path), tmp_path, figure=False)["report"].read_text()
    assert "40.45**" in grid


def test_report_without_results_is_a_data_error(tmp_path):
    corpus = _gen(tmp_path, "v", 50)
    cfg = _write_config(tmp_path, [("v", corpus)])
    assert main(["report", "--config", str(cfg)]) == 3


def test_gen_synth_writes_corpus_and_embeddings(tmp_path):
    out, emb = tmp_path / "s.conll", tmp_path / "s.vec"
    assert main(["gen-synth", "--out", str(out), "--tokens", "500", "--types", "a,b,c",
                 "--embeddings", str(emb), "--dim", "5"]) == 0
    ds = load_corpus(out)
    assert ds.n_tokens >= 500 and len(ds.tagset) == 7
    assert load_embeddings(emb.read_text(), ds.vocabulary()).dim == 5
