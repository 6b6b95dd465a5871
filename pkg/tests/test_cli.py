import json
from pathlib import Path

import numpy as np
import pytest

from jointaccess import cli
from jointaccess.embeddings import load_embeddings
from jointaccess.factorization import DivergenceError

FIXTURE = Path(__file__).parent / "fixtures" / "counterexample_2d.csv"


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    assert run("synth", "--world", "sphere", "--items", 80, "--users", 300, "--dim", 6,
               "--seed", 7, "--out", root / "w") == 0
    assert run("train", "--ratings", root / "w" / "ratings.csv", "--dim", 6, "--iterations", 5,
               "--out", root / "m") == 0
    return root


def test_synth_spec_flags_deterministic(tmp_path):
    args = ("synth", "--world", "sphere", "--items", 300, "--users", 3000, "--dim", 16,
            "--seed", 7)
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["ratings.csv", "truth.json", "truth_items.csv", "truth_users.csv"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_synth_topic_small_dim_is_usage_error(tmp_path, capsys):
    assert run("synth", "--world", "topic", "--dim", 10, "--out", tmp_path) == cli.EXIT_USAGE
    err = capsys.readouterr().err
    assert "usage:" in err and "20" in err


def test_bad_flags_exit_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        run("synth", "--items", "many")
    assert exc.value.code == cli.EXIT_USAGE
    assert "usage:" in capsys.readouterr().err


def test_train_outputs(pipeline):
    m = pipeline / "m"
    assert load_embeddings(m / cli.USER_EMBEDDINGS).d == 6
    assert load_embeddings(m / cli.ITEM_EMBEDDINGS).n == 80
    log = json.loads((m / cli.TRAIN_LOG).read_text())
    assert len(log["history"]) == 5 and log["final_rmse"] > 0
    assert "objective_after_items" in log["history"][0]


def test_train_norm_constraint(pipeline, tmp_path):
    assert run("train", "--ratings", pipeline / "w" / "ratings.csv", "--dim", 4,
               "--iterations", 2, "--norm-constraint", "--out", tmp_path) == 0
    items = load_embeddings(tmp_path / cli.ITEM_EMBEDDINGS)
    np.testing.assert_allclose(np.linalg.norm(items.matrix, axis=1), 1.0, atol=1e-9)


def test_train_movielens_and_grid(tmp_path):
    p = tmp_path / "ratings.dat"
    p.write_text("".join(f"{u % 4}::{u % 5}::{1 + u % 5}::0\n" for u in range(10)))
    assert run("train", "--ratings", p, "--dim", 1, "--iterations", 2,
               "--reg-grid", "0.1,1", "--folds", 2, "--out", tmp_path) == 0
    log = json.loads((tmp_path / cli.TRAIN_LOG).read_text())
    assert log["n_ratings"] == 10 and log["reg_used"] in (0.1, 1.0)
    assert set(log["cv_rmse"]) == {"0.10000000000000001", "1"}


def test_train_data_errors(tmp_path):
    assert run("train", "--ratings", tmp_path / "missing.csv") == cli.EXIT_DATA
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n")
    assert run("train", "--ratings", bad) == cli.EXIT_DATA


def test_train_divergence_exit(pipeline, tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise DivergenceError("non-finite factors at iteration 1")
    monkeypatch.setattr(cli, "train_als", boom)
    assert run("train", "--ratings", pipeline / "w" / "ratings.csv", "--out", tmp_path) == \
        cli.EXIT_NUMERIC
    assert "non-finite" in capsys.readouterr().err


def test_audit_counterexample_fixture(tmp_path):
    out = tmp_path / "r.json"
    assert run("audit", "--items", FIXTURE, "--exact", "--k", 2, "--out", out) == 0
    report = json.loads(out.read_text())
    assert report["report_version"] == 1
    assert sorted(map(sorted, report["exact"]["inaccessible"])) == [["1", "3"], ["2", "4"]]
    assert len(report["pairs"]) == 6
    assert report["params"]["subset_mode_effective"] == "first"


def test_audit_full_and_deterministic(pipeline, tmp_path):
    args = ("audit", "--items", pipeline / "m" / cli.ITEM_EMBEDDINGS,
            "--users", pipeline / "m" / cli.USER_EMBEDDINGS, "--truth", pipeline / "w",
            "--ratings", pipeline / "w" / "ratings.csv", "--subset", 50)
    assert run(*args, "--out", tmp_path / "a.json", "--csv-dir", tmp_path / "csv") == 0
    assert run(*args, "--out", tmp_path / "b.json") == 0
    a = json.loads((tmp_path / "a.json").read_text())
    b = json.loads((tmp_path / "b.json").read_text())
    assert len(a["pairs"]) == 1225
    for r in (a, b):
        r.pop("generated_at")
        r["params"].pop("out")
        r["params"].pop("csv_dir")
    assert a == b
    assert {"census", "binned_counts", "heuristic_accessibility", "user_diversity"} <= set(a)
    census = a["census"]["model"]
    assert sum(e["count"] for e in census["sets"]) == census["n_users"]
    assert (tmp_path / "csv" / "pairs.csv").read_text().count("\n") == 1226


def test_audit_topic_metrics(tmp_path):
    assert run("synth", "--world", "topic", "--items", 60, "--users", 200, "--dim", 20,
               "--rating-fraction", 0.3, "--out", tmp_path / "w") == 0
    assert run("train", "--ratings", tmp_path / "w" / "ratings.csv", "--dim", 5,
               "--iterations", 3, "--out", tmp_path / "m") == 0
    assert run("audit", "--items", tmp_path / "m" / cli.ITEM_EMBEDDINGS,
               "--users", tmp_path / "m" / cli.USER_EMBEDDINGS, "--truth", tmp_path / "w",
               "--metrics", "topic-matrix,exposure", "--out", tmp_path / "r.json") == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert len(report["topic_matrix"]["matrix"]) == 5
    assert "oracle" in report["minority_exposure"]


def test_audit_missing_metric_input(capsys):
    assert run("audit", "--items", FIXTURE, "--metrics", "census") == cli.EXIT_USAGE
    assert "--users" in capsys.readouterr().err
    assert run("audit", "--items", FIXTURE, "--metrics", "bogus") == cli.EXIT_USAGE


def test_recommend(pipeline, capsys):
    m = pipeline / "m"
    users = load_embeddings(m / cli.USER_EMBEDDINGS)
    assert run("recommend", "--items", m / cli.ITEM_EMBEDDINGS, "--users",
               m / cli.USER_EMBEDDINGS, "--user", users.ids[0], "--k", 3) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "user_id,rank,item_id,score" and len(lines) == 4
    scores = [float(l.split(",")[3]) for l in lines[1:]]
    assert scores == sorted(scores, reverse=True)
    assert run("recommend", "--items", m / cli.ITEM_EMBEDDINGS, "--users",
               m / cli.USER_EMBEDDINGS, "--user", "nobody") == cli.EXIT_DATA


def test_recommend_multi_vector_truth(pipeline, capsys):
    w = pipeline / "w"
    assert run("recommend", "--items", w / "truth_items.csv", "--users", w / "truth_users.csv",
               "--multi", "--k", 2) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 1 + 2 * 300
