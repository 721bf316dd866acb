"""Zero-shot self-improvement via synthetic in-context demonstrations.

With no labeled mappings available, an evaluation set is carved out of the
unlabeled schemas themselves: queries whose retrieval scores are near-perfect
("easy") and the queries retrieval handles worst ("challenging"). The
unoptimized pipeline runs over that set, an evaluator LLM rates each final
prediction 0-5, and the stage-level input/output pairs from the best-rated
traces get attached to their stages as few-shot demonstrations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .embedding_index import Embedder, VectorIndex, embed
from .llm_gateway import (
    Backend,
    Demonstration,
    LlmParams,
    PromptInstance,
    STAGE_EVALUATOR,
    complete_parsed,
    evaluator_template,
    parse_rating,
)
from .match_pipeline import MatchPipeline, QueryOutcome
from .schema_model import AttributeRef, Schema, render_key, render_query

KIND_EASY = "easy"
KIND_CHALLENGING = "challenging"

EASY_SIMILARITY_FLOOR = 0.95
EASY_TOP_N = 5

DEFAULT_N_DEMOS = 4
DEFAULT_MIN_RATING = 4


@dataclass(frozen=True)
class EvalQuery:
    ref: AttributeRef
    kind: str  # easy | challenging
    top_similarity: float


@dataclass
class ScoredTrace:
    eval_query: EvalQuery
    outcome: QueryOutcome
    rating: int


@dataclass
class DemoSet:
    stage: str
    demos: tuple[Demonstration, ...]
    provenance: tuple[str, ...] = ()  # dotted refs of the originating queries
    created_at: str | None = None

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "demos": [
                {"input": [[label, value] for label, value in d.inputs], "output": d.output}
                for d in self.demos
            ],
            "provenance": list(self.provenance),
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DemoSet":
        return cls(
            stage=data["stage"],
            demos=tuple(
                Demonstration(
                    inputs=tuple((label, value) for label, value in d["input"]),
                    output=d["output"],
                )
                for d in data["demos"]
            ),
            provenance=tuple(data.get("provenance", ())),
            created_at=data.get("created_at"),
        )


def save_demo_sets(demo_sets: Mapping[str, DemoSet], directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for stage, demo_set in sorted(demo_sets.items()):
        path = directory / f"{stage}.json"
        path.write_text(
            json.dumps(demo_set.to_dict(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )


def load_demo_sets(directory: str | Path) -> dict[str, DemoSet]:
    directory = Path(directory)
    demo_sets = {}
    for path in sorted(directory.glob("*.json")):
        demo_set = DemoSet.from_dict(json.loads(path.read_text(encoding="utf-8")))
        demo_sets[demo_set.stage] = demo_set
    return demo_sets


# ---------------------------------------------------------------------------
# Evaluation-set construction


def normalized_top_similarities(
    ref: AttributeRef,
    source: Schema,
    index: VectorIndex,
    embedder: Embedder,
    n: int = EASY_TOP_N,
) -> list[float]:
    """Top-n retrieval scores normalized into [-1, 1] by query token count.

    Raw late-interaction scores grow with query length; dividing by the
    number of query tokens makes the 0.95 easy-query floor meaningful.
    """
    query = embed(render_query(ref, source), embedder)
    candidates = index.retrieve(query, min(n, len(index)))
    return [c.score / len(query) for c in candidates]


def build_eval_set(
    source: Schema,
    index: VectorIndex,
    embedder: Embedder,
    n_easy: int = 10,
    n_challenging: int = 10,
) -> list[EvalQuery]:
    """Pick easy and challenging source queries from retrieval scores alone.

    Easy: every top-5 normalized similarity exceeds 0.95 (capped at n_easy,
    best first). Challenging: the n_challenging remaining queries with the
    lowest best-candidate similarity. The two sets never overlap.
    """
    profiles = []
    for ref in source.attribute_refs():
        sims = normalized_top_similarities(ref, source, index, embedder)
        profiles.append((ref, sims))

    easy_pool = [
        (ref, sims[0])
        for ref, sims in profiles
        if sims and all(s > EASY_SIMILARITY_FLOOR for s in sims)
    ]
    easy_pool.sort(key=lambda pair: -pair[1])
    easy = [
        EvalQuery(ref=ref, kind=KIND_EASY, top_similarity=top)
        for ref, top in easy_pool[:n_easy]
    ]
    easy_refs = {q.ref for q in easy}

    challenging_pool = [
        (ref, sims[0] if sims else float("-inf"))
        for ref, sims in profiles
        if ref not in easy_refs
    ]
    challenging_pool.sort(key=lambda pair: pair[1])
    challenging = [
        EvalQuery(ref=ref, kind=KIND_CHALLENGING, top_similarity=top)
        for ref, top in challenging_pool[:n_challenging]
    ]
    return easy + challenging


# ---------------------------------------------------------------------------
# Evaluator LLM


def render_answers(outcome: QueryOutcome, target: Schema) -> str:
    """Render the ranked predictions as the evaluator's answers list.

    An abstention renders as an empty list; the evaluator is free to rate it
    zero. The evaluator never sees gold labels, only plausibility.
    """
    if outcome.scored is None or outcome.scored.abstained:
        keys: list[str] = []
    else:
        keys = [render_key(ref, target) for ref, _ in outcome.scored.ranked]
    return "[" + ", ".join(f"'{k}'" for k in keys) + "]"


def rate_output(
    query_text: str,
    answers_text: str,
    backend: Backend,
    params: LlmParams,
    demos: Sequence[Demonstration] = (),
) -> tuple[int, str, bool]:
    """Ask the evaluator LLM for a 0-5 relevance rating of the predictions."""
    prompt = PromptInstance(
        stage=STAGE_EVALUATOR,
        template=evaluator_template(),
        demos=tuple(demos),
        payload=(("Query", query_text), ("Answers", answers_text)),
    )
    raw, rating, repaired = complete_parsed(
        backend, STAGE_EVALUATOR, prompt.render(), params, parse_rating
    )
    return rating, raw, repaired


# ---------------------------------------------------------------------------
# Bootstrap optimization


def select_traces(
    scored: Sequence[ScoredTrace],
    n_demos: int = DEFAULT_N_DEMOS,
    min_rating: int = DEFAULT_MIN_RATING,
) -> list[ScoredTrace]:
    """Stable-sort by rating descending, keep ratings >= min_rating, truncate."""
    ordered = sorted(scored, key=lambda st: -st.rating)
    kept = [st for st in ordered if st.rating >= min_rating]
    return kept[:n_demos]


def demos_from_traces(selected: Sequence[ScoredTrace]) -> dict[str, DemoSet]:
    """Stage-level demonstrations out of the selected traces.

    Each LLM stage collects its (input, output) pair from every selected
    trace, in selection order; the demonstrations are shared across queries
    at matching time.
    """
    by_stage: dict[str, list[Demonstration]] = {}
    provenance: dict[str, list[str]] = {}
    for st in selected:
        for record in st.outcome.trace.stages:
            if not record.llm:
                continue
            by_stage.setdefault(record.stage, []).append(
                Demonstration(inputs=record.inputs, output=record.output)
            )
            provenance.setdefault(record.stage, []).append(st.eval_query.ref.dotted())
    return {
        stage: DemoSet(
            stage=stage,
            demos=tuple(demos),
            provenance=tuple(provenance[stage]),
        )
        for stage, demos in by_stage.items()
    }


@dataclass
class BootstrapResult:
    scored_traces: list[ScoredTrace]
    selected: list[ScoredTrace]
    demo_sets: dict[str, DemoSet]
    warnings: list[str] = field(default_factory=list)


def bootstrap(
    pipeline: MatchPipeline,
    eval_set: Sequence[EvalQuery],
    n_demos: int = DEFAULT_N_DEMOS,
    min_rating: int = DEFAULT_MIN_RATING,
    evaluator_backend: Backend | None = None,
) -> BootstrapResult:
    """Run the unoptimized pipeline over the eval set, rate every final
    output, and keep the best traces' stage pairs as demonstrations.

    With nothing rated at or above min_rating the demo sets come back empty
    and the pipeline simply keeps running unoptimized.
    """
    backend = evaluator_backend or pipeline.backend
    scored_traces: list[ScoredTrace] = []
    warnings: list[str] = []
    for eval_query in eval_set:
        outcome = pipeline.run_query(eval_query.ref)
        if outcome.error is not None:
            warnings.append(f"{eval_query.ref.dotted()}: {outcome.error}")
            continue
        rating, _, _ = rate_output(
            outcome.query.query_text,
            render_answers(outcome, pipeline.target),
            backend,
            pipeline.config.params,
        )
        scored_traces.append(
            ScoredTrace(eval_query=eval_query, outcome=outcome, rating=rating)
        )
    selected = select_traces(scored_traces, n_demos=n_demos, min_rating=min_rating)
    if not selected and eval_set:
        warnings.append(
            f"no traces rated >= {min_rating}; demo sets are empty and the "
            "pipeline stays unoptimized"
        )
    demo_sets = demos_from_traces(selected)
    return BootstrapResult(
        scored_traces=scored_traces,
        selected=selected,
        demo_sets=demo_sets,
        warnings=warnings,
    )


def attach_demos(
    pipeline: MatchPipeline, demo_sets: Mapping[str, DemoSet]
) -> MatchPipeline:
    """A pipeline whose stage prompts render the given demonstrations.

    Stages with empty demo sets render no demo blocks, so attaching empty
    sets returns a pipeline whose prompts are byte-identical to the input's.
    """
    demos = {stage: ds.demos for stage, ds in demo_sets.items() if ds.demos}
    return pipeline.with_demos(demos)
