import sys
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"
MIMIC_MINI = FIXTURES / "mimic_mini"

sys.path.insert(0, str(FIXTURES))

import generate_fixtures  # noqa: E402


@pytest.fixture(scope="session")
def fixture_dir() -> Path:
    return MIMIC_MINI


@pytest.fixture(scope="session")
def fixture_settings() -> dict:
    """Pipeline settings the bundled cassette was recorded with."""
    return {
        "k_semantic": generate_fixtures.K_SEMANTIC,
        "dim": generate_fixtures.DIM,
        "seed": generate_fixtures.SEED,
    }


@pytest.fixture(scope="session")
def source_schema():
    from matchforge.schema_model import load_schema

    return load_schema(MIMIC_MINI / "source.json")


@pytest.fixture(scope="session")
def target_schema():
    from matchforge.schema_model import load_schema

    return load_schema(MIMIC_MINI / "target.json")


@pytest.fixture(scope="session")
def gold_mapping(source_schema, target_schema):
    from matchforge.schema_model import load_ground_truth

    return load_ground_truth(MIMIC_MINI / "gold.csv", source_schema, target_schema)


@pytest.fixture()
def hash_embedder(fixture_settings):
    from matchforge.embedding_index import HashEmbedder

    return HashEmbedder(dim=fixture_settings["dim"], seed=fixture_settings["seed"])


@pytest.fixture(scope="session")
def _session_index(target_schema, fixture_settings):
    from matchforge.embedding_index import HashEmbedder, VectorIndex

    embedder = HashEmbedder(dim=fixture_settings["dim"], seed=fixture_settings["seed"])
    return VectorIndex.build(target_schema, embedder)


@pytest.fixture()
def target_index(_session_index):
    return _session_index


def make_replay_pipeline(ablation: str = "full", demos=None):
    """The bundled fixture wired for replay, matching the recording settings."""
    from matchforge.embedding_index import HashEmbedder, VectorIndex
    from matchforge.llm_gateway import Cassette, ReplayBackend
    from matchforge.match_pipeline import MatchPipeline, PipelineConfig
    from matchforge.schema_model import load_schema

    source = load_schema(MIMIC_MINI / "source.json")
    target = load_schema(MIMIC_MINI / "target.json")
    embedder = HashEmbedder(dim=generate_fixtures.DIM, seed=generate_fixtures.SEED)
    return MatchPipeline(
        source=source,
        target=target,
        index=VectorIndex.build(target, embedder),
        backend=ReplayBackend(Cassette(MIMIC_MINI / "cassette.jsonl")),
        embedder=embedder,
        config=PipelineConfig(k_semantic=generate_fixtures.K_SEMANTIC, ablation=ablation),
        demos=demos,
    )


@pytest.fixture()
def replay_pipeline():
    return make_replay_pipeline()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    lines = []
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py" not in nodeid:
                continue
            name = nodeid.split("::")[-1]
            verdict = "PASS" if status == "passed" else "FAIL"
            lines.append(f"[{verdict}] {name}")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
