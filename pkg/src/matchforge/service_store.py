"""HTTP service over match runs: execution, deferral queues, human decisions.

Persistence is a directory of JSON files per run (run.json plus an
append-only decisions.jsonl journal), no database: the corpora are desk
scale, and the files double as test fixtures. Run execution is asynchronous;
clients poll GET /runs/{id} until the status leaves "running".
"""

from __future__ import annotations

import json
import math
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from .match_pipeline import MatchRun, QueryOutcome
from .schema_model import AttributeRef, MappingSet, Schema, render_key

STATUS_RUNNING = "running"
STATUS_COMPLETE = "complete"
STATUS_FAILED = "failed"

DECISION_ACCEPT_TOP1 = "accept_top1"
DECISION_CHOOSE = "choose"
DECISION_NO_MATCH = "no_match"
DECISION_KINDS = (DECISION_ACCEPT_TOP1, DECISION_CHOOSE, DECISION_NO_MATCH)

ENTROPY_HISTOGRAM_BINS = 10


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


@dataclass
class HumanDecision:
    query: AttributeRef
    kind: str
    target: AttributeRef | None
    reviewer: str
    decided_at: str

    def to_dict(self) -> dict:
        return {
            "query": {"table": self.query.table, "attribute": self.query.attribute},
            "kind": self.kind,
            "target": None
            if self.target is None
            else {"table": self.target.table, "attribute": self.target.attribute},
            "reviewer": self.reviewer,
            "decided_at": self.decided_at,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "HumanDecision":
        return cls(
            query=AttributeRef(data["query"]["table"], data["query"]["attribute"]),
            kind=data["kind"],
            target=None
            if data.get("target") is None
            else AttributeRef(data["target"]["table"], data["target"]["attribute"]),
            reviewer=data.get("reviewer", ""),
            decided_at=data.get("decided_at", ""),
        )


@dataclass
class RunRecord:
    run_id: str
    status: str
    created_at: str
    request: dict
    run: MatchRun | None = None
    error: str | None = None
    gold: MappingSet | None = None
    target: Schema | None = None
    # Journal order; the effective decision per query is the last write.
    decisions: list[HumanDecision] = field(default_factory=list)

    def effective_decisions(self) -> dict[AttributeRef, HumanDecision]:
        effective = {}
        for decision in self.decisions:
            effective[decision.query] = decision
        return effective


class RunStore:
    """File-backed registry of runs; safe for concurrent API access."""

    def __init__(self, data_dir: str | Path):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._records: dict[str, RunRecord] = {}
        self._load_existing()

    def _run_dir(self, run_id: str) -> Path:
        return self.data_dir / run_id

    def _load_existing(self) -> None:
        for run_dir in sorted(self.data_dir.iterdir() if self.data_dir.exists() else []):
            run_file = run_dir / "run.json"
            if not run_dir.is_dir() or not run_file.exists():
                continue
            data = json.loads(run_file.read_text(encoding="utf-8"))
            record = RunRecord(
                run_id=data["run_id"],
                status=data["status"],
                created_at=data["created_at"],
                request=data.get("request", {}),
                error=data.get("error"),
            )
            if data.get("run") is not None:
                record.run = MatchRun.from_dict(data["run"])
            if data.get("gold") is not None:
                record.gold = MappingSet(
                    entries=tuple(
                        (
                            AttributeRef(e["source"]["table"], e["source"]["attribute"]),
                            None
                            if e.get("target") is None
                            else AttributeRef(e["target"]["table"], e["target"]["attribute"]),
                        )
                        for e in data["gold"]
                    )
                )
            if data.get("target_schema") is not None:
                from .schema_model import schema_from_dict

                record.target = schema_from_dict(data["target_schema"])
            # An interrupted run can never complete after a restart.
            if record.status == STATUS_RUNNING:
                record.status = STATUS_FAILED
                record.error = "interrupted by service restart"
            journal = run_dir / "decisions.jsonl"
            if journal.exists():
                for line in journal.read_text(encoding="utf-8").splitlines():
                    if line.strip():
                        record.decisions.append(HumanDecision.from_dict(json.loads(line)))
            self._records[record.run_id] = record

    def persist(self, record: RunRecord) -> None:
        from .schema_model import schema_to_dict

        run_dir = self._run_dir(record.run_id)
        run_dir.mkdir(parents=True, exist_ok=True)
        payload = {
            "run_id": record.run_id,
            "status": record.status,
            "created_at": record.created_at,
            "request": record.request,
            "error": record.error,
            "run": record.run.to_dict() if record.run else None,
            "gold": None
            if record.gold is None
            else [
                {
                    "source": {"table": s.table, "attribute": s.attribute},
                    "target": None
                    if t is None
                    else {"table": t.table, "attribute": t.attribute},
                }
                for s, t in record.gold.entries
            ],
            "target_schema": None if record.target is None else schema_to_dict(record.target),
        }
        (run_dir / "run.json").write_text(
            json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )

    def append_decision(self, record: RunRecord, decision: HumanDecision) -> None:
        with self._lock:
            record.decisions.append(decision)
            journal = self._run_dir(record.run_id) / "decisions.jsonl"
            journal.parent.mkdir(parents=True, exist_ok=True)
            with journal.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(decision.to_dict(), sort_keys=True) + "\n")

    def create(self, request: dict) -> RunRecord:
        record = RunRecord(
            run_id=uuid.uuid4().hex[:12],
            status=STATUS_RUNNING,
            created_at=datetime.now(timezone.utc).isoformat(),
            request=request,
        )
        with self._lock:
            self._records[record.run_id] = record
        self.persist(record)
        return record

    def get(self, run_id: str) -> RunRecord:
        record = self._records.get(run_id)
        if record is None:
            raise ApiError(404, "unknown_run", f"no run {run_id!r}")
        return record

    def list(self) -> list[RunRecord]:
        return sorted(self._records.values(), key=lambda r: r.created_at)


# ---------------------------------------------------------------------------
# Run execution

RunExecutor = Callable[[dict], tuple[MatchRun, Schema, MappingSet | None]]


def default_executor(request: dict) -> tuple[MatchRun, Schema, MappingSet | None]:
    """Build a pipeline from a run request and execute it synchronously."""
    from .config import build_pipeline_from_request

    pipeline, gold = build_pipeline_from_request(request)
    return pipeline.run(), pipeline.target, gold


def execute_run(store: RunStore, record: RunRecord, executor: RunExecutor) -> None:
    try:
        run, target, gold = executor(record.request)
        record.run = run
        record.target = target
        record.gold = gold
        record.status = STATUS_COMPLETE
    except Exception as exc:
        record.status = STATUS_FAILED
        record.error = f"{type(exc).__name__}: {exc}"
    store.persist(record)


# ---------------------------------------------------------------------------
# Payload helpers


def _require_complete(record: RunRecord) -> MatchRun:
    if record.status == STATUS_RUNNING:
        raise ApiError(409, "run_not_complete", f"run {record.run_id} is still running")
    if record.status == STATUS_FAILED or record.run is None:
        raise ApiError(409, "run_failed", record.error or "run failed")
    return record.run


def _candidate_payload(record: RunRecord, outcome: QueryOutcome) -> list[dict]:
    """Sheet options with scores and descriptions, best-scored first.

    Uses the full option sheet rather than the ranked list so reviewers see
    candidates even for abstained queries.
    """
    scored = outcome.scored
    if outcome.sheet is None or scored is None:
        return []
    target = record.target
    rows = []
    for letter, ref in outcome.sheet.options:
        description = ""
        key = f"{ref.table}-{ref.attribute}"
        if target is not None and target.contains(ref):
            description = target.resolve(ref).description
            key = render_key(ref, target)
        rows.append(
            {
                "letter": letter,
                "target": {"table": ref.table, "attribute": ref.attribute},
                "key": key,
                "description": description,
                "score": scored.scores.get(letter, 0.0),
            }
        )
    rows.sort(key=lambda row: -row["score"])
    return rows


def _deferred_items(record: RunRecord, p: int) -> list[dict]:
    run = _require_complete(record)
    outcomes = [o for o in run.outcomes if o.scored is not None]
    count = math.ceil(p / 100 * len(outcomes))
    order = sorted(
        range(len(outcomes)),
        key=lambda i: (-outcomes[i].scored.entropy, i),
    )
    decided = set(record.effective_decisions())
    items = []
    for i in order[:count]:
        outcome = outcomes[i]
        if outcome.query.ref in decided:
            continue
        items.append(
            {
                "query": {
                    "table": outcome.query.ref.table,
                    "attribute": outcome.query.ref.attribute,
                    "text": outcome.query.query_text,
                },
                "entropy": outcome.scored.entropy,
                "abstained": outcome.scored.abstained,
                "candidates": _candidate_payload(record, outcome),
            }
        )
    return items


def _effective_target(
    outcome: QueryOutcome, decision: HumanDecision | None
) -> AttributeRef | None:
    """The mapping after applying a human decision, None meaning no match."""
    if decision is None or decision.kind == DECISION_ACCEPT_TOP1:
        scored = outcome.scored
        if scored is None or scored.abstained or not scored.ranked:
            return None
        return scored.ranked[0][0]
    if decision.kind == DECISION_CHOOSE:
        return decision.target
    return None  # no_match


def _metrics_payload(record: RunRecord, with_decisions: bool) -> dict:
    run = _require_complete(record)
    scored_outcomes = [o for o in run.outcomes if o.scored is not None]
    decided = record.effective_decisions() if with_decisions else {}
    payload: dict = {
        "n_queries": len(run.outcomes),
        "n_abstained": sum(1 for o in scored_outcomes if o.scored.abstained),
        "n_decided": len(record.effective_decisions()),
        "with_decisions": with_decisions,
        "warnings": dict(sorted(run.metadata.warnings.items())),
    }
    if record.gold is not None:
        gold_by_source = record.gold.as_dict()
        accuracy: dict[str, float] = {}
        for k in (1, 3, 5):
            correct = 0
            total = 0
            for outcome in run.outcomes:
                if outcome.query.ref not in gold_by_source:
                    continue
                total += 1
                gold_target = gold_by_source[outcome.query.ref]
                decision = decided.get(outcome.query.ref)
                if decision is not None:
                    effective = _effective_target(outcome, decision)
                    correct += int(effective == gold_target)
                    continue
                scored = outcome.scored
                if scored is None:
                    continue
                if gold_target is None:
                    correct += int(scored.abstained)
                else:
                    correct += int(
                        any(ref == gold_target for ref, _ in scored.ranked[:k])
                    )
            accuracy[str(k)] = correct / total if total else 0.0
        payload["accuracy_at"] = accuracy
    else:
        entropies = [o.scored.entropy for o in scored_outcomes]
        top = max(entropies, default=1.0) or 1.0
        counts = [0] * ENTROPY_HISTOGRAM_BINS
        for value in entropies:
            bin_index = min(
                ENTROPY_HISTOGRAM_BINS - 1, int(value / top * ENTROPY_HISTOGRAM_BINS)
            )
            counts[bin_index] += 1
        payload["entropy_histogram"] = {
            "bin_edges": [top * i / ENTROPY_HISTOGRAM_BINS for i in range(ENTROPY_HISTOGRAM_BINS + 1)],
            "counts": counts,
        }
    return payload


def _target_attribute_catalog(record: RunRecord) -> list[dict]:
    """Every target attribute, for the review UI's client-side search index."""
    if record.target is None:
        return []
    return [
        {
            "table": ref.table,
            "attribute": ref.attribute,
            "key": render_key(ref, record.target),
            "description": record.target.resolve(ref).description,
        }
        for ref in record.target.attribute_refs()
    ]


# ---------------------------------------------------------------------------
# FastAPI application


def create_app(
    data_dir: str | Path,
    ui_dir: str | Path | None = None,
    executor: RunExecutor = default_executor,
    synchronous: bool = False,
) -> FastAPI:
    """Service wiring. `synchronous` runs executions inline (test mode)."""
    store = RunStore(data_dir)
    app = FastAPI(title="matchforge")
    app.state.store = store

    @app.exception_handler(ApiError)
    async def _api_error(request: Request, exc: ApiError):
        return JSONResponse(
            status_code=exc.status,
            content={"error": {"code": exc.code, "message": exc.message}},
        )

    @app.exception_handler(Exception)
    async def _unhandled(request: Request, exc: Exception):
        return JSONResponse(
            status_code=500,
            content={"error": {"code": "internal", "message": str(exc)}},
        )

    def _json_or_422(payload: dict, key: str, expected: type, required: bool = True):
        value = payload.get(key)
        if value is None:
            if required:
                raise ApiError(422, "validation_error", f"missing field {key!r}")
            return None
        if not isinstance(value, expected):
            raise ApiError(422, "validation_error", f"field {key!r} must be {expected.__name__}")
        return value

    @app.post("/api/v1/runs")
    async def create_run(request: Request):
        try:
            body = await request.json()
        except json.JSONDecodeError:
            raise ApiError(422, "validation_error", "request body must be JSON")
        if not isinstance(body, dict):
            raise ApiError(422, "validation_error", "request body must be an object")
        source = _json_or_422(body, "source", str)
        target = _json_or_422(body, "target", str)
        config = _json_or_422(body, "config", dict, required=False) or {}
        for label, path in (("source", source), ("target", target)):
            if not Path(path).exists():
                raise ApiError(422, "validation_error", f"{label} path {path!r} does not exist")
        record = store.create({"source": source, "target": target, "config": config})
        if synchronous:
            execute_run(store, record, executor)
        else:
            thread = threading.Thread(
                target=execute_run, args=(store, record, executor), daemon=True
            )
            thread.start()
        return {"run_id": record.run_id}

    @app.get("/api/v1/runs")
    async def list_runs():
        return [
            {"run_id": r.run_id, "status": r.status, "created_at": r.created_at}
            for r in store.list()
        ]

    @app.get("/api/v1/runs/{run_id}")
    async def get_run(run_id: str):
        record = store.get(run_id)
        payload = {
            "run_id": record.run_id,
            "status": record.status,
            "created_at": record.created_at,
            "request": record.request,
            "error": record.error,
            "has_gold": record.gold is not None,
            "run": record.run.to_dict() if record.run else None,
            "decisions": [d.to_dict() for d in record.decisions],
            "target_attributes": _target_attribute_catalog(record),
        }
        return payload

    @app.get("/api/v1/runs/{run_id}/deferred")
    async def deferred(run_id: str, p: int = 0):
        record = store.get(run_id)
        if not 0 <= p <= 100:
            raise ApiError(422, "validation_error", "p must be within 0..100")
        return {"p": p, "items": _deferred_items(record, p)}

    @app.post("/api/v1/runs/{run_id}/decisions")
    async def submit_decision(run_id: str, request: Request):
        record = store.get(run_id)
        run = _require_complete(record)
        try:
            body = await request.json()
        except json.JSONDecodeError:
            raise ApiError(422, "validation_error", "request body must be JSON")
        query_raw = _json_or_422(body, "query", dict)
        decision_raw = _json_or_422(body, "decision", dict)
        reviewer = body.get("reviewer", "")
        overwrite = bool(body.get("overwrite", False))

        query = AttributeRef(
            str(query_raw.get("table", "")), str(query_raw.get("attribute", ""))
        )
        outcome = run.outcome_for(query)
        if outcome is None:
            raise ApiError(404, "unknown_query", f"query {query.dotted()!r} not in run")
        kind = decision_raw.get("kind")
        if kind not in DECISION_KINDS:
            raise ApiError(422, "validation_error", f"decision kind must be one of {DECISION_KINDS}")
        target_ref: AttributeRef | None = None
        if kind == DECISION_CHOOSE:
            target_raw = decision_raw.get("target")
            if not isinstance(target_raw, dict):
                raise ApiError(422, "validation_error", "choose decision requires a target")
            target_ref = AttributeRef(
                str(target_raw.get("table", "")), str(target_raw.get("attribute", ""))
            )
            if record.target is not None and not record.target.contains(target_ref):
                raise ApiError(
                    422, "validation_error",
                    f"target {target_ref.dotted()!r} does not resolve in the target schema",
                )
        if query in record.effective_decisions() and not overwrite:
            raise ApiError(409, "decision_conflict", f"query {query.dotted()!r} already decided")

        decision = HumanDecision(
            query=query,
            kind=kind,
            target=target_ref,
            reviewer=str(reviewer),
            decided_at=datetime.now(timezone.utc).isoformat(),
        )
        store.append_decision(record, decision)
        effective = _effective_target(outcome, decision)
        return {
            "ok": True,
            "query": {"table": query.table, "attribute": query.attribute},
            "effective_target": None
            if effective is None
            else {"table": effective.table, "attribute": effective.attribute},
        }

    @app.get("/api/v1/runs/{run_id}/metrics")
    async def metrics(run_id: str, with_decisions: bool = False):
        record = store.get(run_id)
        return _metrics_payload(record, with_decisions)

    if ui_dir is not None and Path(ui_dir).exists():
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
