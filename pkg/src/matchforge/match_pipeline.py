"""The compositional matching program.

Per source attribute: retrieve semantic candidates, ask an LLM for
reasoning-based candidates, refine the union down to a short list, lay the
survivors out as a lettered MCQ with a trailing "No Match" option, elicit
0-100 confidence scores per option, and assemble a ranked prediction (or an
abstention when "No Match" wins outright).

Every stage's input/output pair is recorded in a Trace so that high-rated
runs can later be replayed as in-context demonstrations.
"""

from __future__ import annotations

import hashlib
import json
import string
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from .embedding_index import EmbeddingError, Embedder, SemanticCandidate, VectorIndex, embed
from .eval_harness import entropy
from .llm_gateway import (
    Backend,
    Cassette,
    Demonstration,
    GatewayError,
    LlmParams,
    ParseError,
    PromptInstance,
    RecordingBackend,
    ReplayBackend,
    ScriptedBackend,
    STAGE_CANDIDATE_GEN,
    STAGE_CONFIDENCE,
    STAGE_MCQ_FORMAT,
    STAGE_REFINE,
    candidate_gen_template,
    complete_parsed,
    confidence_template,
    mcq_format_template,
    parse_json_value_list,
    parse_relation_scores,
    refine_template,
)
from .schema_model import AttributeRef, Schema, key_lookup, render_key, render_query

STAGE_RETRIEVAL = "retrieval"

ABLATION_FULL = "full"
ABLATION_SEMANTIC_ONLY = "semantic_only"
ABLATION_REASONING_ONLY = "reasoning_only"
ABLATIONS = (ABLATION_FULL, ABLATION_SEMANTIC_ONLY, ABLATION_REASONING_ONLY)

NO_MATCH_LABEL = "No Match"

_LETTERS = string.ascii_uppercase
MAX_MCQ_CANDIDATES = 25


@dataclass(frozen=True)
class QueryAttribute:
    ref: AttributeRef
    query_text: str


@dataclass
class CandidateSet:
    """Semantic and reasoning candidates plus their union and refinement.

    The union keeps first-seen order with reasoning candidates ahead of the
    semantic ones; the refined list is always a subset of the union.
    """

    semantic: list[SemanticCandidate] = field(default_factory=list)
    reasoning: list[AttributeRef] = field(default_factory=list)
    union: list[AttributeRef] = field(default_factory=list)
    refined: list[AttributeRef] = field(default_factory=list)

    def build_union(self) -> None:
        seen: set[AttributeRef] = set()
        ordered: list[AttributeRef] = []
        for ref in list(self.reasoning) + [c.target_ref for c in self.semantic]:
            if ref not in seen:
                seen.add(ref)
                ordered.append(ref)
        self.union = ordered


@dataclass(frozen=True)
class McqSheet:
    """Lettered candidate options plus the trailing abstain letter."""

    options: tuple[tuple[str, AttributeRef], ...]
    abstain_letter: str

    def letters(self) -> list[str]:
        return [letter for letter, _ in self.options] + [self.abstain_letter]


@dataclass(frozen=True)
class ScoredMatch:
    query: QueryAttribute
    scores: dict[str, float]
    ranked: tuple[tuple[AttributeRef, float], ...]
    abstained: bool
    entropy: float


@dataclass
class StageRecord:
    stage: str
    inputs: tuple[tuple[str, str], ...]
    output: str
    llm: bool
    parsed: Any = None
    repaired: bool = False


@dataclass
class Trace:
    query: QueryAttribute
    stages: list[StageRecord]
    result: ScoredMatch | None = None

    def stage_names(self) -> list[str]:
        return [s.stage for s in self.stages]

    def find(self, stage: str) -> StageRecord | None:
        for record in self.stages:
            if record.stage == stage:
                return record
        return None


@dataclass
class QueryOutcome:
    query: QueryAttribute
    candidates: CandidateSet | None
    sheet: McqSheet | None
    scored: ScoredMatch | None
    trace: Trace
    error: str | None = None
    warnings: dict[str, int] = field(default_factory=dict)


@dataclass
class RunMetadata:
    source_schema: str
    target_schema: str
    config: dict
    config_hash: str
    cassette_id: str | None
    ablation: str
    elapsed_seconds: float | None
    warnings: dict[str, int] = field(default_factory=dict)
    demo_stages: dict[str, int] = field(default_factory=dict)


@dataclass
class MatchRun:
    metadata: RunMetadata
    outcomes: list[QueryOutcome]

    def outcome_for(self, ref: AttributeRef) -> QueryOutcome | None:
        for outcome in self.outcomes:
            if outcome.query.ref == ref:
                return outcome
        return None

    def to_dict(self) -> dict:
        return {
            "metadata": {
                "source_schema": self.metadata.source_schema,
                "target_schema": self.metadata.target_schema,
                "config": self.metadata.config,
                "config_hash": self.metadata.config_hash,
                "cassette_id": self.metadata.cassette_id,
                "ablation": self.metadata.ablation,
                "elapsed_seconds": self.metadata.elapsed_seconds,
                "warnings": dict(sorted(self.metadata.warnings.items())),
                "demo_stages": dict(sorted(self.metadata.demo_stages.items())),
            },
            "queries": [_outcome_to_dict(o) for o in self.outcomes],
        }

    def to_json(self) -> str:
        """Stable serialization: byte-identical for identical runs."""
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_dict(cls, data: dict) -> "MatchRun":
        meta = data["metadata"]
        return cls(
            metadata=RunMetadata(
                source_schema=meta["source_schema"],
                target_schema=meta["target_schema"],
                config=meta["config"],
                config_hash=meta["config_hash"],
                cassette_id=meta.get("cassette_id"),
                ablation=meta.get("ablation", ABLATION_FULL),
                elapsed_seconds=meta.get("elapsed_seconds"),
                warnings=dict(meta.get("warnings", {})),
                demo_stages=dict(meta.get("demo_stages", {})),
            ),
            outcomes=[_outcome_from_dict(q) for q in data["queries"]],
        )

    @classmethod
    def load(cls, path: str | Path) -> "MatchRun":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _ref_to_dict(ref: AttributeRef) -> dict:
    return {"table": ref.table, "attribute": ref.attribute}


def _ref_from_dict(data: dict) -> AttributeRef:
    return AttributeRef(data["table"], data["attribute"])


def _outcome_to_dict(outcome: QueryOutcome) -> dict:
    scored = outcome.scored
    candidates = outcome.candidates
    sheet = outcome.sheet
    return {
        "query": {
            "table": outcome.query.ref.table,
            "attribute": outcome.query.ref.attribute,
            "text": outcome.query.query_text,
        },
        "candidates": None
        if candidates is None
        else {
            "semantic": [
                {
                    "table": c.target_ref.table,
                    "attribute": c.target_ref.attribute,
                    "score": c.score,
                    "rank": c.rank,
                }
                for c in candidates.semantic
            ],
            "reasoning": [_ref_to_dict(r) for r in candidates.reasoning],
            "union": [_ref_to_dict(r) for r in candidates.union],
            "refined": [_ref_to_dict(r) for r in candidates.refined],
        },
        "sheet": None
        if sheet is None
        else {
            "options": [[letter, _ref_to_dict(ref)] for letter, ref in sheet.options],
            "abstain_letter": sheet.abstain_letter,
        },
        "scores": None if scored is None else dict(sorted(scored.scores.items())),
        "ranked": None
        if scored is None
        else [[_ref_to_dict(ref), score] for ref, score in scored.ranked],
        "abstained": None if scored is None else scored.abstained,
        "entropy": None if scored is None else scored.entropy,
        "error": outcome.error,
        "warnings": dict(sorted(outcome.warnings.items())),
        "trace": {
            "stages": [
                {
                    "stage": s.stage,
                    "inputs": [[label, value] for label, value in s.inputs],
                    "output": s.output,
                    "llm": s.llm,
                    "repaired": s.repaired,
                }
                for s in outcome.trace.stages
            ]
        },
    }


def _outcome_from_dict(data: dict) -> QueryOutcome:
    query = QueryAttribute(
        ref=AttributeRef(data["query"]["table"], data["query"]["attribute"]),
        query_text=data["query"]["text"],
    )
    candidates = None
    if data.get("candidates") is not None:
        c = data["candidates"]
        candidates = CandidateSet(
            semantic=[
                SemanticCandidate(
                    target_ref=AttributeRef(s["table"], s["attribute"]),
                    score=s["score"],
                    rank=s["rank"],
                )
                for s in c["semantic"]
            ],
            reasoning=[_ref_from_dict(r) for r in c["reasoning"]],
            union=[_ref_from_dict(r) for r in c["union"]],
            refined=[_ref_from_dict(r) for r in c["refined"]],
        )
    sheet = None
    if data.get("sheet") is not None:
        sheet = McqSheet(
            options=tuple(
                (letter, _ref_from_dict(ref)) for letter, ref in data["sheet"]["options"]
            ),
            abstain_letter=data["sheet"]["abstain_letter"],
        )
    scored = None
    if data.get("abstained") is not None:
        scored = ScoredMatch(
            query=query,
            scores=dict(data["scores"]),
            ranked=tuple((_ref_from_dict(ref), score) for ref, score in data["ranked"]),
            abstained=data["abstained"],
            entropy=data["entropy"],
        )
    trace = Trace(
        query=query,
        stages=[
            StageRecord(
                stage=s["stage"],
                inputs=tuple((label, value) for label, value in s["inputs"]),
                output=s["output"],
                llm=s["llm"],
                repaired=s.get("repaired", False),
            )
            for s in data["trace"]["stages"]
        ],
        result=scored,
    )
    return QueryOutcome(
        query=query,
        candidates=candidates,
        sheet=sheet,
        scored=scored,
        trace=trace,
        error=data.get("error"),
        warnings=dict(data.get("warnings", {})),
    )


# ---------------------------------------------------------------------------
# MCQ formatting (deterministic local code; an LLM formatter stage exists
# behind the mcq_via_llm flag for fidelity experiments)


def format_mcq(refined: Sequence[AttributeRef]) -> McqSheet:
    """Assign consecutive letters from A in input order; abstain comes last."""
    if len(refined) > MAX_MCQ_CANDIDATES:
        raise ValueError(f"too many candidates for MCQ: {len(refined)}")
    options = tuple((_LETTERS[i], ref) for i, ref in enumerate(refined))
    return McqSheet(options=options, abstain_letter=_LETTERS[len(refined)])


def render_mcq(sheet: McqSheet, target: Schema) -> str:
    parts = [f"({letter}){render_key(ref, target)}" for letter, ref in sheet.options]
    parts.append(f"({sheet.abstain_letter}){NO_MATCH_LABEL}")
    return ", ".join(parts)


def parse_mcq_options(text: str) -> list[tuple[str, str]]:
    """Recover (letter, label) pairs from a rendered MCQ line.

    Splits on option boundaries rather than bare commas because data-type
    labels may themselves contain commas.
    """
    import re

    segments = re.split(r",\s*(?=\()", text.strip())
    pairs = []
    for segment in segments:
        match = re.match(r"^\(([A-Za-z])\)\s*'?(.*?)'?\s*$", segment.strip())
        if not match:
            raise ParseError(f"cannot parse MCQ option {segment!r}")
        pairs.append((match.group(1).upper(), match.group(2)))
    return pairs


def parse_mcq_sheet(text: str, target: Schema) -> McqSheet:
    """Parse an MCQ line back into a sheet, resolving keys against the target."""
    lookup = key_lookup(target)
    pairs = parse_mcq_options(text)
    if not pairs or pairs[-1][1] != NO_MATCH_LABEL:
        raise ParseError("MCQ is missing the trailing No Match option")
    options = []
    for letter, label in pairs[:-1]:
        ref = lookup.get(label.strip().strip("'\""))
        if ref is None:
            raise ParseError(f"MCQ option {label!r} is not a target key")
        options.append((letter, ref))
    return McqSheet(options=tuple(options), abstain_letter=pairs[-1][0])


# ---------------------------------------------------------------------------
# Candidate resolution helpers


def resolve_candidate_strings(
    strings: Sequence[str], lookup: Mapping[str, AttributeRef]
) -> tuple[list[AttributeRef], int]:
    """Exact key matching after whitespace/quote stripping; no fuzzy repair.

    Returns (resolved refs in order, dropped count). Hallucinated candidates
    stay observable through the dropped counter.
    """
    resolved: list[AttributeRef] = []
    dropped = 0
    for raw in strings:
        cleaned = raw.strip().strip("'\"").strip()
        ref = lookup.get(cleaned)
        if ref is None:
            dropped += 1
        else:
            resolved.append(ref)
    return resolved, dropped


def parse_refined_list(text: str) -> list[str]:
    """Extract candidate key strings from a refinement completion.

    The completion carries reasoning first; everything after the final
    "Refined String List:" label is the ranked list, possibly bracketed and
    quoted.
    """
    marker = "Refined String List:"
    idx = text.rfind(marker)
    if idx < 0:
        raise ParseError("no 'Refined String List:' section in completion")
    tail = text[idx + len(marker) :].strip()
    tail = tail.strip("[]")
    items = [item.strip().strip("'\"").strip() for item in tail.split(",")]
    return [item for item in items if item]


# ---------------------------------------------------------------------------
# Assembly


def assemble(
    query: QueryAttribute,
    sheet: McqSheet,
    scores: Mapping[str, float],
    tau: float = 0.0,
) -> ScoredMatch:
    """Turn option scores into an abstention or a ranked prediction list.

    Abstention requires the No Match score to be a strict maximum; on a tie
    with the best concrete candidate the candidate wins. Ranked candidates
    sort by score descending with original letter order breaking ties, then
    filter to scores >= tau.
    """
    missing = [letter for letter in sheet.letters() if letter not in scores]
    if missing:
        raise ValueError(f"scores missing for options {missing}")
    abstain_score = scores[sheet.abstain_letter]
    abstained = all(abstain_score > scores[letter] for letter, _ in sheet.options)
    if abstained:
        ranked: tuple[tuple[AttributeRef, float], ...] = ()
    else:
        in_order = sorted(sheet.options, key=lambda opt: -scores[opt[0]])
        ranked = tuple(
            (ref, scores[letter]) for letter, ref in in_order if scores[letter] >= tau
        )
    return ScoredMatch(
        query=query,
        scores=dict(scores),
        ranked=ranked,
        abstained=abstained,
        entropy=entropy(scores),
    )


# ---------------------------------------------------------------------------
# Pipeline


@dataclass
class PipelineConfig:
    k_semantic: int = 5
    k_reason: int = 5
    refine_limit: int = 5
    tau: float = 0.0
    parallelism: int = 1
    ablation: str = ABLATION_FULL
    mcq_via_llm: bool = False
    params: LlmParams = field(default_factory=LlmParams)

    def __post_init__(self) -> None:
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")

    def to_dict(self) -> dict:
        return {
            "k_semantic": self.k_semantic,
            "k_reason": self.k_reason,
            "refine_limit": self.refine_limit,
            "tau": self.tau,
            "parallelism": self.parallelism,
            "ablation": self.ablation,
            "mcq_via_llm": self.mcq_via_llm,
            "params": {
                "temperature": self.params.temperature,
                "max_tokens": self.params.max_tokens,
                "top_p": self.params.top_p,
                "frequency_penalty": self.params.frequency_penalty,
                "presence_penalty": self.params.presence_penalty,
                "n": self.params.n,
                "model_tag": self.params.model_tag,
            },
        }

    def hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _is_deterministic(backend: Backend) -> bool:
    if isinstance(backend, RecordingBackend):
        return _is_deterministic(backend.inner)
    return isinstance(backend, (ReplayBackend, ScriptedBackend))


def _backend_cassette(backend: Backend) -> Cassette | None:
    if isinstance(backend, RecordingBackend):
        return backend.cassette
    if isinstance(backend, ReplayBackend):
        return backend.cassette
    return None


class MatchPipeline:
    """One source schema matched against one indexed target schema."""

    def __init__(
        self,
        source: Schema,
        target: Schema,
        index: VectorIndex,
        backend: Backend,
        embedder: Embedder,
        config: PipelineConfig | None = None,
        demos: Mapping[str, Sequence[Demonstration]] | None = None,
    ):
        self.source = source
        self.target = target
        self.index = index
        self.backend = backend
        self.embedder = embedder
        self.config = config or PipelineConfig()
        self.demos = {stage: tuple(ds) for stage, ds in (demos or {}).items()}
        self._key_lookup = key_lookup(target)
        self._schema_dump = self._render_schema_dump()

    def with_demos(self, demos: Mapping[str, Sequence[Demonstration]]) -> "MatchPipeline":
        return MatchPipeline(
            source=self.source,
            target=self.target,
            index=self.index,
            backend=self.backend,
            embedder=self.embedder,
            config=self.config,
            demos=demos,
        )

    # -- prompt builders ---------------------------------------------------

    def _render_schema_dump(self) -> str:
        keys = [render_key(ref, self.target) for ref in self.target.attribute_refs()]
        return "[" + ", ".join(f"'{k}'" for k in keys) + "]"

    def _demos_for(self, stage: str) -> tuple[Demonstration, ...]:
        return self.demos.get(stage, ())

    def candidate_gen_prompt(self, query: QueryAttribute) -> PromptInstance:
        return PromptInstance(
            stage=STAGE_CANDIDATE_GEN,
            template=candidate_gen_template(self.target.name, self.config.k_reason),
            demos=self._demos_for(STAGE_CANDIDATE_GEN),
            payload=(
                ("Input Schema", self._schema_dump),
                ("Input Query", query.query_text),
            ),
        )

    def refine_prompt(self, query: QueryAttribute, union: Sequence[AttributeRef]) -> PromptInstance:
        described = [render_query(ref, self.target) for ref in union]
        schema_list = "[" + ", ".join(f"'{d}'" for d in described) + "]"
        return PromptInstance(
            stage=STAGE_REFINE,
            template=refine_template(self.target.name, self.config.refine_limit),
            demos=self._demos_for(STAGE_REFINE),
            payload=(
                ("Input Schema", schema_list),
                ("Input Query", query.query_text),
            ),
        )

    def mcq_prompt(self, refined: Sequence[AttributeRef]) -> PromptInstance:
        keys = [render_key(ref, self.target) for ref in refined]
        listed = "[" + ", ".join(f"'{k}'" for k in keys) + "]"
        return PromptInstance(
            stage=STAGE_MCQ_FORMAT,
            template=mcq_format_template(),
            demos=self._demos_for(STAGE_MCQ_FORMAT),
            payload=(("Input", listed),),
        )

    def confidence_prompt(self, query: QueryAttribute, sheet: McqSheet) -> PromptInstance:
        return PromptInstance(
            stage=STAGE_CONFIDENCE,
            template=confidence_template(),
            demos=self._demos_for(STAGE_CONFIDENCE),
            payload=(
                ("Input Mcq", render_mcq(sheet, self.target)),
                ("Input Query", query.query_text),
            ),
        )

    # -- stages ------------------------------------------------------------

    def generate_reasoning_candidates(
        self, query: QueryAttribute, warnings: dict[str, int]
    ) -> tuple[list[AttributeRef], StageRecord]:
        prompt = self.candidate_gen_prompt(query)
        raw, parsed, repaired = complete_parsed(
            self.backend, STAGE_CANDIDATE_GEN, prompt.render(), self.config.params,
            parse_json_value_list,
        )
        refs, dropped = resolve_candidate_strings(parsed, self._key_lookup)
        if dropped:
            warnings["unmatched_candidates"] = warnings.get("unmatched_candidates", 0) + dropped
        refs = refs[: self.config.k_reason]
        record = StageRecord(
            stage=STAGE_CANDIDATE_GEN,
            inputs=prompt.payload,
            output=raw,
            llm=True,
            parsed=refs,
            repaired=repaired,
        )
        return refs, record

    def refine_candidates(
        self,
        query: QueryAttribute,
        union: Sequence[AttributeRef],
        warnings: dict[str, int],
    ) -> tuple[list[AttributeRef], StageRecord | None]:
        if not union:
            return [], None
        prompt = self.refine_prompt(query, union)
        raw, parsed, repaired = complete_parsed(
            self.backend, STAGE_REFINE, prompt.render(), self.config.params,
            parse_refined_list,
        )
        refs, dropped = resolve_candidate_strings(parsed, self._key_lookup)
        union_set = set(union)
        in_union = [ref for ref in refs if ref in union_set]
        dropped += len(refs) - len(in_union)
        if dropped:
            warnings["dropped_refinements"] = warnings.get("dropped_refinements", 0) + dropped
        deduped: list[AttributeRef] = []
        for ref in in_union:
            if ref not in deduped:
                deduped.append(ref)
        refined = deduped[: self.config.refine_limit]
        record = StageRecord(
            stage=STAGE_REFINE,
            inputs=prompt.payload,
            output=raw,
            llm=True,
            parsed=refined,
            repaired=repaired,
        )
        return refined, record

    def build_sheet(
        self, refined: Sequence[AttributeRef], warnings: dict[str, int]
    ) -> tuple[McqSheet, StageRecord]:
        if self.config.mcq_via_llm:
            prompt = self.mcq_prompt(refined)
            raw, sheet, repaired = complete_parsed(
                self.backend, STAGE_MCQ_FORMAT, prompt.render(), self.config.params,
                lambda text: parse_mcq_sheet(text, self.target),
            )
            record = StageRecord(
                stage=STAGE_MCQ_FORMAT,
                inputs=prompt.payload,
                output=raw,
                llm=True,
                parsed=sheet,
                repaired=repaired,
            )
            return sheet, record
        sheet = format_mcq(refined)
        rendered = render_mcq(sheet, self.target)
        keys = [render_key(ref, self.target) for ref in refined]
        record = StageRecord(
            stage=STAGE_MCQ_FORMAT,
            inputs=(("Input", "[" + ", ".join(f"'{k}'" for k in keys) + "]"),),
            output=rendered,
            llm=False,
            parsed=sheet,
        )
        return sheet, record

    def score_confidence(
        self, query: QueryAttribute, sheet: McqSheet, warnings: dict[str, int]
    ) -> tuple[dict[str, float], StageRecord]:
        prompt = self.confidence_prompt(query, sheet)
        raw, parsed, repaired = complete_parsed(
            self.backend, STAGE_CONFIDENCE, prompt.render(), self.config.params,
            parse_relation_scores,
        )
        if parsed.warnings:
            warnings["clamped_scores"] = warnings.get("clamped_scores", 0) + len(parsed.warnings)
        scores: dict[str, float] = {}
        wanted = sheet.letters()
        for letter in wanted:
            if letter in parsed.scores:
                scores[letter] = parsed.scores[letter]
            else:
                scores[letter] = 0.0
                warnings["missing_scores"] = warnings.get("missing_scores", 0) + 1
        extra = set(parsed.scores) - set(wanted)
        if extra:
            warnings["extra_scores"] = warnings.get("extra_scores", 0) + len(extra)
        record = StageRecord(
            stage=STAGE_CONFIDENCE,
            inputs=prompt.payload,
            output=raw,
            llm=True,
            parsed=scores,
            repaired=repaired,
        )
        return scores, record

    # -- per-query and whole-run execution ----------------------------------

    def run_query(self, ref: AttributeRef) -> QueryOutcome:
        query = QueryAttribute(ref=ref, query_text=render_query(ref, self.source))
        warnings: dict[str, int] = {}
        trace = Trace(query=query, stages=[])

        if not query.query_text.strip():
            # Nothing to match on; abstain without spending LLM calls.
            scored = ScoredMatch(
                query=query, scores={}, ranked=(), abstained=True, entropy=0.0
            )
            trace.result = scored
            return QueryOutcome(
                query=query,
                candidates=CandidateSet(),
                sheet=None,
                scored=scored,
                trace=trace,
                warnings=warnings,
            )

        candidates = CandidateSet()
        try:
            if self.config.ablation != ABLATION_REASONING_ONLY:
                query_emb = embed(query.query_text, self.embedder)
                candidates.semantic = self.index.retrieve(query_emb, self.config.k_semantic)
                keys = [render_key(c.target_ref, self.target) for c in candidates.semantic]
                trace.stages.append(
                    StageRecord(
                        stage=STAGE_RETRIEVAL,
                        inputs=(("Input Query", query.query_text),),
                        output="[" + ", ".join(f"'{k}'" for k in keys) + "]",
                        llm=False,
                        parsed=candidates.semantic,
                    )
                )
            if self.config.ablation != ABLATION_SEMANTIC_ONLY:
                reasoning, record = self.generate_reasoning_candidates(query, warnings)
                candidates.reasoning = reasoning
                trace.stages.append(record)
            candidates.build_union()

            refined, record = self.refine_candidates(query, candidates.union, warnings)
            candidates.refined = refined
            if record is not None:
                trace.stages.append(record)

            sheet, record = self.build_sheet(refined, warnings)
            trace.stages.append(record)

            scores, record = self.score_confidence(query, sheet, warnings)
            trace.stages.append(record)

            scored = assemble(query, sheet, scores, tau=self.config.tau)
            trace.result = scored
            return QueryOutcome(
                query=query,
                candidates=candidates,
                sheet=sheet,
                scored=scored,
                trace=trace,
                warnings=warnings,
            )
        except (GatewayError, ParseError, EmbeddingError, ValueError) as exc:
            return QueryOutcome(
                query=query,
                candidates=candidates,
                sheet=None,
                scored=None,
                trace=trace,
                error=f"{type(exc).__name__}: {exc}",
                warnings=warnings,
            )

    def run(self) -> MatchRun:
        started = time.perf_counter()
        refs = list(self.source.attribute_refs())
        if self.config.parallelism > 1:
            with ThreadPoolExecutor(max_workers=self.config.parallelism) as pool:
                outcomes = list(pool.map(self.run_query, refs))
        else:
            outcomes = [self.run_query(ref) for ref in refs]
        elapsed = time.perf_counter() - started

        total_warnings: dict[str, int] = {}
        for outcome in outcomes:
            for key, count in outcome.warnings.items():
                total_warnings[key] = total_warnings.get(key, 0) + count

        deterministic = _is_deterministic(self.backend)
        cassette = _backend_cassette(self.backend)
        metadata = RunMetadata(
            source_schema=self.source.name,
            target_schema=self.target.name,
            config=self.config.to_dict(),
            config_hash=self.config.hash(),
            cassette_id=cassette.fingerprint() if cassette else None,
            ablation=self.config.ablation,
            elapsed_seconds=None if deterministic else round(elapsed, 6),
            warnings=total_warnings,
            demo_stages={stage: len(demos) for stage, demos in sorted(self.demos.items()) if demos},
        )
        return MatchRun(metadata=metadata, outcomes=outcomes)
