"""Acceptance suite: one test per release criterion.

Everything here runs offline: replay cassettes, scripted backends, and the
deterministic hash embedder only. The terminal summary hook in conftest
prints one PASS/FAIL line per criterion.
"""

import json
import math
import random
import time
from pathlib import Path

import numpy as np
import pytest

from matchforge.cli import main
from matchforge.embedding_index import (
    HashEmbedder,
    TokenEmbeddings,
    VectorIndex,
    embed,
    maxsim,
)
from matchforge.eval_harness import (
    POLICY_ENTROPY,
    POLICY_RANDOM,
    accuracy_at_k,
    deferral_curve,
    entropy,
    remedial_analysis,
)
from matchforge.match_pipeline import (
    ABLATION_REASONING_ONLY,
    ABLATION_SEMANTIC_ONLY,
    QueryAttribute,
    STAGE_RETRIEVAL,
    assemble,
    format_mcq,
)
from matchforge.schema_model import Attribute, AttributeRef, Schema, Table
from matchforge.self_improve import ScoredTrace, attach_demos, select_traces

from conftest import MIMIC_MINI, make_replay_pipeline
import generate_fixtures
import synth

FIXTURES = Path(__file__).parent / "fixtures"


def test_maxsim_brute_force_oracle():
    """maxsim equals an independent double loop on 500 random pairs."""
    started = time.perf_counter()
    rng = np.random.default_rng(2024)

    def random_embeddings(n_tokens: int, dim: int = 64) -> TokenEmbeddings:
        vectors = rng.standard_normal((n_tokens, dim))
        vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
        return TokenEmbeddings(tokens=tuple(f"t{i}" for i in range(n_tokens)), vectors=vectors)

    for _ in range(500):
        query = random_embeddings(int(rng.integers(3, 13)))
        doc = random_embeddings(int(rng.integers(3, 13)))
        expected = 0.0
        for q in query.vectors:
            best = -math.inf
            for d in doc.vectors:
                best = max(best, float(np.dot(q, d)))
            expected += best
        assert maxsim(query, doc) == pytest.approx(expected, abs=1e-9)
    assert time.perf_counter() - started < 5.0


def test_retrieval_exhaustive_oracle():
    """retrieve equals exhaustive score-and-sort on a 100-document corpus,
    including the doc_id tie-break, for k in {1, 5, 100}."""
    started = time.perf_counter()
    # 100 documents over 25 distinct texts: plenty of exact ties.
    texts = [f"field {i % 25} of group {i % 5}" for i in range(100)]
    tables = tuple(
        Table(
            f"t{j}",
            "",
            tuple(
                Attribute(f"a{i}", texts[j * 10 + i], "int") for i in range(10)
            ),
        )
        for j in range(10)
    )
    target = Schema("wide", tables)
    embedder = HashEmbedder(dim=64, seed=4)
    index = VectorIndex.build(target, embedder)
    assert len(index) == 100

    for query_text in ("field 3 of group 1", "group", "field 24"):
        query = embed(query_text, embedder)
        exhaustive = sorted(
            ((maxsim(query, doc.embeddings), doc.doc_id, doc.target_ref) for doc in index.documents),
            key=lambda t: (-t[0], t[1]),
        )
        for k in (1, 5, 100):
            got = index.retrieve(query, k)
            assert [c.target_ref for c in got] == [t[2] for t in exhaustive[:k]]
            assert [c.rank for c in got] == list(range(1, min(k, 100) + 1))
    assert time.perf_counter() - started < 5.0


def test_replay_determinism_cmd_match(tmp_path):
    """Two cmd_match executions over the bundled cassette emit identical bytes."""
    started = time.perf_counter()
    config = tmp_path / "config.json"
    config.write_text(
        json.dumps(
            {
                "k_semantic": generate_fixtures.K_SEMANTIC,
                "dim": generate_fixtures.DIM,
                "seed": generate_fixtures.SEED,
            }
        )
    )
    outputs = []
    for name in ("one.json", "two.json"):
        out = tmp_path / name
        code = main(
            [
                "match",
                "--source", str(MIMIC_MINI / "source.json"),
                "--target", str(MIMIC_MINI / "target.json"),
                "--backend", "replay",
                "--cassette", str(MIMIC_MINI / "cassette.jsonl"),
                "--config", str(config),
                "--out", str(out),
            ]
        )
        assert code == 0
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1]
    assert time.perf_counter() - started < 30.0


def test_recorded_example_chains_fidelity():
    """The bundled no-match chain abstains with an empty ranked list; the
    reasoning chain puts procedure_occurrence.quantity at rank 1."""
    run = make_replay_pipeline().run()

    marital = run.outcome_for(AttributeRef("admissions", "marital_status"))
    assert marital.error is None
    assert marital.scored.abstained is True
    assert marital.scored.ranked == ()
    # The full option sheet scored zero everywhere except the abstain letter.
    assert marital.scored.scores[marital.sheet.abstain_letter] == 100.0

    seq = run.outcome_for(AttributeRef("procedures_icd", "seq_num"))
    assert seq.error is None
    assert seq.scored.abstained is False
    assert seq.scored.ranked[0][0] == AttributeRef("procedure_occurrence", "quantity")
    assert seq.scored.ranked[0][1] == 90.0


def test_accuracy_at_k_hand_enumerated_oracle():
    """accuracy@1 = 14/20 and accuracy@3 = 17/20 on the frozen 20-query table."""
    oracle = json.loads((FIXTURES / "accuracy_oracle.json").read_text())
    rows = oracle["rows"]
    assert len(rows) == 20

    outcomes = []
    gold = {}
    for row in rows:
        gold[row["query"]] = row["gold"]
        if row["abstained"]:
            outcomes.append(synth.outcome(row["query"], abstained=True))
        else:
            ranked = [(name, 100.0 - 10 * i) for i, name in enumerate(row["ranked"])]
            outcomes.append(synth.outcome(row["query"], ranked=ranked))
    run = synth.run_of(outcomes)
    mapping = synth.gold_of(gold)

    # Independent aggregation of the hand-assigned per-row verdicts.
    oracle_at_1 = sum(r["correct_at_1"] for r in rows) / len(rows)
    oracle_at_3 = sum(r["correct_at_3"] for r in rows) / len(rows)
    assert oracle_at_1 == 14 / 20
    assert oracle_at_3 == 17 / 20

    assert accuracy_at_k(run, mapping, 1) == oracle_at_1
    assert accuracy_at_k(run, mapping, 3) == oracle_at_3


def test_monotonicity_suite():
    """accuracy@k non-decreasing in k; deferral non-decreasing in p for both
    policies; remedial non-increasing in threshold. 100 random runs."""
    rng = random.Random(99)
    target = Schema(
        "t",
        (
            Table(
                "t",
                "shared table",
                tuple(
                    Attribute(f"tgt{i}", f"target field {i} {'x ' * (i % 3)}", "int")
                    for i in range(8)
                ),
            ),
        ),
    )
    embedder = HashEmbedder(dim=32, seed=0)
    thresholds = [0.0, 0.25, 0.5, 0.75, 1.0]
    for i in range(100):
        run, gold = synth.random_run(rng, n_queries=rng.randint(4, 16))

        by_k = [accuracy_at_k(run, gold, k) for k in (1, 2, 3, 4, 5)]
        assert all(a <= b + 1e-12 for a, b in zip(by_k, by_k[1:]))

        for policy, seed in ((POLICY_ENTROPY, None), (POLICY_RANDOM, i)):
            points = deferral_curve(
                run, gold, policy=policy, seed=seed,
                percents=(0, 10, 20, 30, 40, 50),
            ).points
            values = [acc for _, acc in points]
            assert all(a <= b + 1e-12 for a, b in zip(values, values[1:]))

        if i % 10 == 0:  # remedial involves embedding; sample every tenth run
            points = remedial_analysis(run, gold, target, embedder, thresholds)
            values = [acc for _, acc in points]
            assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))


def test_deferral_dominance():
    """With every error strictly noisier than every correct answer, entropy
    deferral weakly dominates seeded random deferral at each p."""
    outcomes = []
    gold = {}
    for i in range(9):
        outcomes.append(
            synth.outcome(f"c{i}", ranked=[(f"tgt{i}", 100.0)], scores={"A": 100, "B": 0})
        )
        gold[f"c{i}"] = f"tgt{i}"
    for i in range(6):
        outcomes.append(
            synth.outcome(
                f"w{i}",
                ranked=[("bad", 40.0), (f"tgt{i}", 39.0)],
                scores={"A": 40, "B": 39, "C": 38},
            )
        )
        gold[f"w{i}"] = f"tgt{i}"
    run = synth.run_of(outcomes)
    mapping = synth.gold_of(gold)

    correct_entropy = max(o.scored.entropy for o in outcomes[:9])
    wrong_entropy = min(o.scored.entropy for o in outcomes[9:])
    assert wrong_entropy > correct_entropy  # the fixture's defining property

    entropy_points = dict(deferral_curve(run, mapping, policy=POLICY_ENTROPY).points)
    for seed in range(25):
        random_points = dict(
            deferral_curve(run, mapping, policy=POLICY_RANDOM, seed=seed).points
        )
        for p in (10, 20, 30, 40, 50):
            assert entropy_points[p] >= random_points[p] - 1e-12


def test_entropy_reference_values():
    assert entropy({"A": 0, "B": 100, "C": 0}) == pytest.approx(0.0, abs=1e-12)
    for n in (2, 3, 4, 7, 11):
        scores = {chr(ord("A") + i): 10 for i in range(n)}
        assert entropy(scores) == pytest.approx(math.log(n), abs=1e-9)
    base = {"A": 3, "B": 17, "C": 55, "D": 25}
    for scale in (0.001, 0.1, 7.0, 1000.0):
        scaled = {k: v * scale for k, v in base.items()}
        assert entropy(scaled) == pytest.approx(entropy(base), abs=1e-9)


def test_bootstrap_selection_oracle():
    """Selection equals brute-force sort/filter/truncate on 50 random rating
    vectors, and attaching empty demo sets leaves prompts byte-identical."""
    from matchforge.self_improve import EvalQuery

    rng = random.Random(41)

    def traces_for(ratings):
        traces = []
        for i, rating in enumerate(ratings):
            outcome = synth.outcome(f"q{i}", ranked=[("x", 1.0)])
            traces.append(
                ScoredTrace(
                    eval_query=EvalQuery(
                        ref=outcome.query.ref, kind="challenging", top_similarity=0.0
                    ),
                    outcome=outcome,
                    rating=rating,
                )
            )
        return traces

    for _ in range(50):
        ratings = [rng.randint(0, 5) for _ in range(rng.randint(0, 15))]
        n = rng.randint(0, 8)
        floor = rng.randint(0, 5)
        traces = traces_for(ratings)

        decorated = sorted(
            ((st.rating, idx) for idx, st in enumerate(traces)),
            key=lambda t: (-t[0], t[1]),
        )
        expected = [idx for rating, idx in decorated if rating >= floor][:n]

        actual = select_traces(traces, n_demos=n, min_rating=floor)
        assert [traces.index(st) for st in actual] == expected

    pipeline = make_replay_pipeline()
    optimized = attach_demos(pipeline, {})
    union = [AttributeRef("person", "person_id")]
    for ref in pipeline.source.attribute_refs():
        from matchforge.schema_model import render_query

        q = QueryAttribute(ref=ref, query_text=render_query(ref, pipeline.source))
        assert (
            pipeline.candidate_gen_prompt(q).render()
            == optimized.candidate_gen_prompt(q).render()
        )
        assert (
            pipeline.refine_prompt(q, union).render()
            == optimized.refine_prompt(q, union).render()
        )
        sheet = format_mcq(union)
        assert (
            pipeline.confidence_prompt(q, sheet).render()
            == optimized.confidence_prompt(q, sheet).render()
        )


def test_abstention_contract_randomized():
    """abstained iff the abstain score is strictly maximal; abstained implies
    an empty ranked list. 500 random score maps."""
    rng = random.Random(2025)
    q = QueryAttribute(ref=AttributeRef("s", "q"), query_text="s-q()")
    for _ in range(500):
        n = rng.randint(0, 6)
        sheet = format_mcq([AttributeRef("t", f"a{i}") for i in range(n)])
        scores = {letter: float(rng.randint(0, 100)) for letter in sheet.letters()}
        scored = assemble(q, sheet, scores)
        strictly_max = all(
            scores[sheet.abstain_letter] > scores[letter] for letter, _ in sheet.options
        )
        assert scored.abstained == strictly_max
        if scored.abstained:
            assert scored.ranked == ()
        else:
            assert scored.ranked


def test_ablation_trace_contract():
    """reasoning_only traces never retrieve; semantic_only traces never call
    the candidate reasoner. Verified on the bundled replay fixture."""
    reasoning_run = make_replay_pipeline(ablation=ABLATION_REASONING_ONLY).run()
    assert all(o.error is None for o in reasoning_run.outcomes)
    for outcome in reasoning_run.outcomes:
        assert STAGE_RETRIEVAL not in outcome.trace.stage_names()
        assert outcome.candidates.semantic == []

    semantic_run = make_replay_pipeline(ablation=ABLATION_SEMANTIC_ONLY).run()
    assert all(o.error is None for o in semantic_run.outcomes)
    for outcome in semantic_run.outcomes:
        names = outcome.trace.stage_names()
        assert "candidate_gen" not in names
        assert not any(s.llm and s.stage == "candidate_gen" for s in outcome.trace.stages)
        assert outcome.candidates.reasoning == []

    full_run = make_replay_pipeline().run()
    for full, single in zip(full_run.outcomes, semantic_run.outcomes):
        assert len(full.candidates.union) >= len(single.candidates.union)
    for full, single in zip(full_run.outcomes, reasoning_run.outcomes):
        assert len(full.candidates.union) >= len(single.candidates.union)
