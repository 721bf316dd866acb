import csv
import json
from pathlib import Path

import pytest

from matchforge.cli import main

from conftest import MIMIC_MINI

import generate_fixtures


def fixture_flags():
    return [
        "--dim", str(generate_fixtures.DIM),
        "--seed", str(generate_fixtures.SEED),
    ]


def run_match(tmp_path, out_name="run.json", extra=()):
    out = tmp_path / out_name
    code = main(
        [
            "match",
            "--source", str(MIMIC_MINI / "source.json"),
            "--target", str(MIMIC_MINI / "target.json"),
            "--backend", "replay",
            "--cassette", str(MIMIC_MINI / "cassette.jsonl"),
            "--config", str(write_config(tmp_path)),
            "--out", str(out),
            *extra,
        ]
    )
    return code, out


def write_config(tmp_path) -> Path:
    config = tmp_path / "config.json"
    if not config.exists():
        config.write_text(
            json.dumps(
                {
                    "k_semantic": generate_fixtures.K_SEMANTIC,
                    "dim": generate_fixtures.DIM,
                    "seed": generate_fixtures.SEED,
                }
            )
        )
    return config


def test_index_builds_and_reports(tmp_path, capsys):
    out = tmp_path / "index.json"
    code = main(
        ["index", "--target", str(MIMIC_MINI / "target.json"), "--out", str(out), *fixture_flags()]
    )
    assert code == 0
    stdout = capsys.readouterr().out
    assert "24 documents" in stdout
    assert "dimension 64" in stdout
    assert out.exists()


def test_index_rebuild_is_byte_identical_across_processes(tmp_path):
    import subprocess
    import sys

    out_a, out_b = tmp_path / "a.json", tmp_path / "b.json"
    for out in (out_a, out_b):
        subprocess.run(
            [
                sys.executable, "-m", "matchforge.cli", "index",
                "--target", str(MIMIC_MINI / "target.json"),
                "--out", str(out), *fixture_flags(),
            ],
            check=True,
            capture_output=True,
        )
    assert out_a.read_bytes() == out_b.read_bytes()


def test_index_missing_target_is_usage_error(tmp_path, capsys):
    code = main(["index", "--target", str(tmp_path / "ghost.json"), "--out", str(tmp_path / "i.json")])
    assert code == 1


def test_match_replay_deterministic(tmp_path):
    code_a, out_a = run_match(tmp_path, "a.json")
    code_b, out_b = run_match(tmp_path, "b.json")
    assert code_a == 0 and code_b == 0
    assert out_a.read_bytes() == out_b.read_bytes()


def test_match_with_persisted_index(tmp_path):
    index_path = tmp_path / "index.json"
    assert main(["index", "--target", str(MIMIC_MINI / "target.json"), "--out", str(index_path), *fixture_flags()]) == 0
    code, out = run_match(tmp_path, extra=["--index", str(index_path)])
    assert code == 0
    _, direct = run_match(tmp_path, "direct.json")
    assert out.read_bytes() == direct.read_bytes()


def test_match_ablation_flag_honored(tmp_path):
    code, out = run_match(tmp_path, "semantic.json", extra=["--ablation", "semantic_only"])
    assert code == 0
    run = json.loads(out.read_text())
    assert run["metadata"]["ablation"] == "semantic_only"
    for query in run["queries"]:
        stages = [s["stage"] for s in query["trace"]["stages"]]
        assert "candidate_gen" not in stages


def test_match_bad_cassette_is_config_error(tmp_path, capsys):
    code = main(
        [
            "match",
            "--source", str(MIMIC_MINI / "source.json"),
            "--target", str(MIMIC_MINI / "target.json"),
            "--backend", "replay",
            "--cassette", str(tmp_path / "missing.jsonl"),
            "--out", str(tmp_path / "out.json"),
        ]
    )
    assert code == 1
    assert "cassette" in capsys.readouterr().err


def test_match_partial_failure_exit_code(tmp_path):
    # A cassette with one record removed leaves one query unplayable.
    source_lines = (MIMIC_MINI / "cassette.jsonl").read_text().splitlines()
    kept = [line for line in source_lines if "cptevents-subsectionheader" not in line]
    assert len(kept) < len(source_lines)
    partial = tmp_path / "partial.jsonl"
    partial.write_text("\n".join(kept) + "\n")
    code = main(
        [
            "match",
            "--source", str(MIMIC_MINI / "source.json"),
            "--target", str(MIMIC_MINI / "target.json"),
            "--backend", "replay",
            "--cassette", str(partial),
            "--config", str(write_config(tmp_path)),
            "--out", str(tmp_path / "out.json"),
        ]
    )
    assert code == 2
    run = json.loads((tmp_path / "out.json").read_text())
    errors = [q for q in run["queries"] if q["error"]]
    assert len(errors) == 1
    assert errors[0]["query"]["table"] == "cptevents"


def test_optimize_replays_bootstrap(tmp_path, capsys):
    demos_dir = tmp_path / "demos"
    code = main(
        [
            "optimize",
            "--source", str(MIMIC_MINI / "source.json"),
            "--target", str(MIMIC_MINI / "target.json"),
            "--backend", "replay",
            "--cassette", str(MIMIC_MINI / "cassette.jsonl"),
            "--config", str(write_config(tmp_path)),
            "--out-demos", str(demos_dir),
        ]
    )
    assert code == 0
    stdout = capsys.readouterr().out
    assert "rating=" in stdout
    from matchforge.self_improve import load_demo_sets

    demo_sets = load_demo_sets(demos_dir)
    assert set(demo_sets) == {"candidate_gen", "refine", "confidence"}
    for demo_set in demo_sets.values():
        assert 0 < len(demo_set.demos) <= 4


def test_optimize_then_match_with_demos_replays(tmp_path):
    demos_dir = tmp_path / "demos"
    assert main(
        [
            "optimize",
            "--source", str(MIMIC_MINI / "source.json"),
            "--target", str(MIMIC_MINI / "target.json"),
            "--backend", "replay",
            "--cassette", str(MIMIC_MINI / "cassette.jsonl"),
            "--config", str(write_config(tmp_path)),
            "--out-demos", str(demos_dir),
        ]
    ) == 0
    code, out = run_match(tmp_path, "optimized.json", extra=["--demos", str(demos_dir)])
    assert code == 0
    run = json.loads(out.read_text())
    assert run["metadata"]["demo_stages"] == {
        "candidate_gen": 4,
        "confidence": 4,
        "refine": 4,
    }
    assert all(q["error"] is None for q in run["queries"])
    # Same recorded completions flow through, so the outcomes agree with the
    # demo-free run; only the prompt provenance differs.
    _, plain = run_match(tmp_path, "plain.json")
    plain_run = json.loads(plain.read_text())
    assert [q["ranked"] for q in run["queries"]] == [q["ranked"] for q in plain_run["queries"]]
    assert plain_run["metadata"]["demo_stages"] == {}


def test_optimize_zero_demos(tmp_path):
    demos_dir = tmp_path / "demos0"
    code = main(
        [
            "optimize",
            "--source", str(MIMIC_MINI / "source.json"),
            "--target", str(MIMIC_MINI / "target.json"),
            "--backend", "replay",
            "--cassette", str(MIMIC_MINI / "cassette.jsonl"),
            "--config", str(write_config(tmp_path)),
            "--n-demos", "0",
            "--out-demos", str(demos_dir),
        ]
    )
    assert code == 0
    from matchforge.self_improve import load_demo_sets

    assert load_demo_sets(demos_dir) == {}


def test_evaluate_reports_accuracy(tmp_path, capsys):
    _, run_path = run_match(tmp_path)
    report_path = tmp_path / "report.json"
    code = main(
        [
            "evaluate",
            "--run", str(run_path),
            "--gold", str(MIMIC_MINI / "gold.csv"),
            "--report", str(report_path),
        ]
    )
    assert code == 0
    stdout = capsys.readouterr().out
    assert "accuracy@1: 0.8750" in stdout  # 7 of 8 correct at rank 1
    assert "accuracy@3: 1.0000" in stdout
    report = json.loads(report_path.read_text())
    assert report["accuracy_at"]["1"] == pytest.approx(0.875)
    assert report["n_queries"] == 8
    assert report["n_abstained"] == 2


def test_evaluate_deferral_csv(tmp_path):
    _, run_path = run_match(tmp_path)
    deferral_csv = tmp_path / "deferral.csv"
    code = main(
        [
            "evaluate",
            "--run", str(run_path),
            "--gold", str(MIMIC_MINI / "gold.csv"),
            "--deferral", str(deferral_csv),
        ]
    )
    assert code == 0
    with open(deferral_csv) as fh:
        rows = list(csv.DictReader(fh))
    entropies = [r for r in rows if r["policy"] == "entropy"]
    randoms = [r for r in rows if r["policy"] == "random"]
    assert len(entropies) == 6  # p in {0,10,20,30,40,50}
    assert len(randoms) == 6
    assert [r["p"] for r in entropies] == ["0", "10", "20", "30", "40", "50"]


def test_evaluate_remedial_requires_target(tmp_path, capsys):
    _, run_path = run_match(tmp_path)
    code = main(
        [
            "evaluate",
            "--run", str(run_path),
            "--gold", str(MIMIC_MINI / "gold.csv"),
            "--remedial", str(tmp_path / "remedial.csv"),
        ]
    )
    assert code == 1


def test_evaluate_remedial_csv(tmp_path):
    _, run_path = run_match(tmp_path)
    remedial_csv = tmp_path / "remedial.csv"
    code = main(
        [
            "evaluate",
            "--run", str(run_path),
            "--gold", str(MIMIC_MINI / "gold.csv"),
            "--remedial", str(remedial_csv),
            "--target", str(MIMIC_MINI / "target.json"),
            "--config", str(write_config(tmp_path)),
        ]
    )
    assert code == 0
    with open(remedial_csv) as fh:
        rows = list(csv.DictReader(fh))
    values = [float(r["accuracy_at_1"]) for r in rows]
    assert values == sorted(values, reverse=True)  # non-increasing in threshold


def test_ablate_produces_three_rows(tmp_path, capsys):
    report_path = tmp_path / "ablation.json"
    code = main(
        [
            "ablate",
            "--source", str(MIMIC_MINI / "source.json"),
            "--target", str(MIMIC_MINI / "target.json"),
            "--gold", str(MIMIC_MINI / "gold.csv"),
            "--cassette", str(MIMIC_MINI / "cassette.jsonl"),
            "--config", str(write_config(tmp_path)),
            "--report", str(report_path),
        ]
    )
    assert code == 0
    rows = json.loads(report_path.read_text())
    assert [r["variant"] for r in rows] == ["full", "semantic_only", "reasoning_only"]
    assert all(r["error"] is None for r in rows)
    stdout = capsys.readouterr().out
    assert "acc@1" in stdout


def test_unknown_flag_is_hard_error(capsys):
    assert main(["match", "--nonsense"]) == 1


def test_help_documents_flags(capsys):
    assert main(["match", "--help"]) == 0
    stdout = capsys.readouterr().out
    for flag in ("--source", "--target", "--index", "--backend", "--cassette",
                 "--demos", "--ablation", "--out"):
        assert flag in stdout


def test_help_for_every_subcommand(capsys):
    for sub in ("index", "match", "optimize", "evaluate", "ablate", "serve"):
        assert main([sub, "--help"]) == 0
        assert "Options" in capsys.readouterr().out


def test_config_file_env_var(tmp_path, monkeypatch):
    config = write_config(tmp_path)
    monkeypatch.setenv("MATCHFORGE_CONFIG", str(config))
    out = tmp_path / "env_run.json"
    code = main(
        [
            "match",
            "--source", str(MIMIC_MINI / "source.json"),
            "--target", str(MIMIC_MINI / "target.json"),
            "--backend", "replay",
            "--cassette", str(MIMIC_MINI / "cassette.jsonl"),
            "--out", str(out),
        ]
    )
    assert code == 0
    run = json.loads(out.read_text())
    assert run["metadata"]["config"]["k_semantic"] == generate_fixtures.K_SEMANTIC


def test_flags_override_config_file(tmp_path):
    config = tmp_path / "conf2.json"
    config.write_text(json.dumps({"ablation": "semantic_only", "k_semantic": 8}))
    code = main(
        [
            "match",
            "--source", str(MIMIC_MINI / "source.json"),
            "--target", str(MIMIC_MINI / "target.json"),
            "--backend", "replay",
            "--cassette", str(MIMIC_MINI / "cassette.jsonl"),
            "--config", str(config),
            "--ablation", "reasoning_only",
            "--out", str(tmp_path / "o.json"),
        ]
    )
    assert code == 0
    run = json.loads((tmp_path / "o.json").read_text())
    assert run["metadata"]["ablation"] == "reasoning_only"
