"""Chat-completion gateway: one interface, three backends, robust parsing.

Backends:
  * LiveBackend    - OpenAI-compatible HTTP endpoint, optional recording
  * ReplayBackend  - deterministic playback from a cassette journal
  * ScriptedBackend- rule/handler driven responses for tests and fixtures

A cassette is an append-only JSON Lines journal keyed by a content hash of
(stage, rendered prompt, params), which makes full pipeline runs byte-for-byte
reproducible offline.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterator, Protocol

import httpx


class GatewayError(RuntimeError):
    """Transport or protocol failure talking to an LLM backend."""


class ReplayMissError(GatewayError):
    """No cassette record for a request; the fixture has drifted."""

    def __init__(self, stage: str, key: str):
        super().__init__(f"replay miss for stage {stage!r} (key {key[:12]}...)")
        self.stage = stage
        self.key = key


class ScriptMissError(GatewayError):
    """ScriptedBackend had no rule for a request."""


class ParseError(ValueError):
    """Completion text did not contain the expected structure."""


@dataclass(frozen=True)
class LlmParams:
    temperature: float = 0.5
    max_tokens: int = 1024
    top_p: float = 1.0
    frequency_penalty: float = 0.0
    presence_penalty: float = 0.0
    n: int = 1
    model_tag: str = "default"


# ---------------------------------------------------------------------------
# Cassette


def request_key(stage: str, prompt: str, params: LlmParams) -> str:
    """Lowercase hex SHA-256 of the canonical request serialization."""
    canonical = json.dumps(
        {"stage": stage, "prompt": prompt, "params": asdict(params)},
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class CassetteRecord:
    key: str
    stage: str
    prompt: str
    params: dict
    response: str
    created_at: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "CassetteRecord":
        data = json.loads(line)
        return cls(
            key=data["key"],
            stage=data["stage"],
            prompt=data["prompt"],
            params=data["params"],
            response=data["response"],
            created_at=data.get("created_at"),
        )


class Cassette:
    """Append-only JSONL journal of request/response pairs.

    Appends are serialized through one lock; on duplicate keys the last
    record wins at load time (a re-recording overrides an older take).
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: dict[str, CassetteRecord] = {}
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    record = CassetteRecord.from_json(line)
                    self._records[record.key] = record

    def __len__(self) -> int:
        return len(self._records)

    def get(self, key: str) -> CassetteRecord | None:
        return self._records.get(key)

    def records(self) -> list[CassetteRecord]:
        return list(self._records.values())

    def append(self, record: CassetteRecord) -> None:
        with self._lock:
            self._records[record.key] = record
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(record.to_json() + "\n")

    def fingerprint(self) -> str:
        """Content hash of the journal, used as the run metadata cassette id."""
        if not self.path.exists():
            return "empty"
        return hashlib.sha256(self.path.read_bytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Backends


class Backend(Protocol):
    def complete(self, stage: str, prompt: str, params: LlmParams) -> str: ...


class ReplayBackend:
    def __init__(self, cassette: Cassette):
        self.cassette = cassette

    def complete(self, stage: str, prompt: str, params: LlmParams) -> str:
        key = request_key(stage, prompt, params)
        record = self.cassette.get(key)
        if record is None:
            raise ReplayMissError(stage, key)
        return record.response


ScriptRule = tuple[str, "str | Callable[[str], bool] | None", "str | Callable[[str], str]"]


class ScriptedBackend:
    """Fixture backend: first matching (stage, matcher) rule wins.

    A matcher is a substring of the rendered prompt, a predicate, or None
    (matches any prompt for the stage). The response may be a string or a
    callable of the prompt. A fallback handler covers everything else.
    """

    def __init__(self, handler: Callable[[str, str, LlmParams], str] | None = None):
        self._rules: list[ScriptRule] = []
        self._handler = handler
        self.calls: list[tuple[str, str]] = []

    def add(
        self,
        stage: str,
        response: str | Callable[[str], str],
        when: str | Callable[[str], bool] | None = None,
    ) -> "ScriptedBackend":
        self._rules.append((stage, when, response))
        return self

    def complete(self, stage: str, prompt: str, params: LlmParams) -> str:
        self.calls.append((stage, prompt))
        for rule_stage, matcher, response in self._rules:
            if rule_stage != stage:
                continue
            if matcher is None:
                pass
            elif callable(matcher):
                if not matcher(prompt):
                    continue
            elif matcher not in prompt:
                continue
            return response(prompt) if callable(response) else response
        if self._handler is not None:
            return self._handler(stage, prompt, params)
        raise ScriptMissError(f"no scripted response for stage {stage!r}")


class RecordingBackend:
    """Wraps another backend and journals every exchange to a cassette."""

    def __init__(
        self,
        inner: Backend,
        cassette: Cassette,
        clock: Callable[[], str | None] | None = None,
    ):
        self.inner = inner
        self.cassette = cassette
        self._clock = clock or (lambda: datetime.now(timezone.utc).isoformat())

    def complete(self, stage: str, prompt: str, params: LlmParams) -> str:
        response = self.inner.complete(stage, prompt, params)
        self.cassette.append(
            CassetteRecord(
                key=request_key(stage, prompt, params),
                stage=stage,
                prompt=prompt,
                params=asdict(params),
                response=response,
                created_at=self._clock(),
            )
        )
        return response


class LiveBackend:
    """OpenAI-compatible chat-completions client.

    The endpoint and key come from configuration (MATCHFORGE_LLM_URL,
    MATCHFORGE_LLM_KEY); the model tag rides in LlmParams. Transport errors,
    429s and 5xx responses retry with exponential backoff.
    """

    def __init__(
        self,
        base_url: str,
        api_key: str = "",
        timeout: float = 60.0,
        max_retries: int = 3,
        backoff_base: float = 0.5,
        transport: httpx.BaseTransport | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def complete(self, stage: str, prompt: str, params: LlmParams) -> str:
        body = {
            "model": params.model_tag,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
            "top_p": params.top_p,
            "frequency_penalty": params.frequency_penalty,
            "presence_penalty": params.presence_penalty,
            "n": params.n,
        }
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = self._client.post(f"{self.base_url}/chat/completions", json=body)
                if resp.status_code == 429 or resp.status_code >= 500:
                    last_error = GatewayError(f"retryable status {resp.status_code}")
                elif resp.status_code >= 400:
                    raise GatewayError(
                        f"chat completion rejected: {resp.status_code} {resp.text[:200]}"
                    )
                else:
                    try:
                        return resp.json()["choices"][0]["message"]["content"]
                    except (KeyError, IndexError, TypeError, json.JSONDecodeError) as exc:
                        raise GatewayError(f"malformed completion response: {exc!r}")
            except httpx.TransportError as exc:
                last_error = exc
            if attempt < self.max_retries and self.backoff_base > 0:
                time.sleep(self.backoff_base * 2**attempt)
        raise GatewayError(f"chat completion failed after retries: {last_error!r}")


# ---------------------------------------------------------------------------
# Prompt templates

STAGE_CANDIDATE_GEN = "candidate_gen"
STAGE_REFINE = "refine"
STAGE_MCQ_FORMAT = "mcq_format"
STAGE_CONFIDENCE = "confidence"
STAGE_EVALUATOR = "evaluator"

COT_PREFIX = "Let's think step by step in order to"

SECTION_SEP = "\n\n---\n\n"


@dataclass(frozen=True)
class StageTemplate:
    stage: str
    instruction: str
    input_fields: tuple[tuple[str, str], ...]  # (label, format description)
    output_fields: tuple[tuple[str, str], ...]
    cot: bool = False  # live input ends with the Reasoning lead-in

    def format_block(self) -> str:
        lines = ["Follow the following format.", ""]
        for label, desc in self.input_fields + self.output_fields:
            lines.append(f"{label}: {desc}")
        return "\n".join(lines)


@dataclass(frozen=True)
class Demonstration:
    """One in-context example: stage inputs by label, plus the completion."""

    inputs: tuple[tuple[str, str], ...]
    output: str


@dataclass(frozen=True)
class PromptInstance:
    stage: str
    template: StageTemplate
    demos: tuple[Demonstration, ...]
    payload: tuple[tuple[str, str], ...]

    def render(self) -> str:
        sections = [self.template.instruction, self.template.format_block()]
        for demo in self.demos:
            sections.append(render_demo(self.template, demo))
        live = [f"{label}: {value}" for label, value in self.payload]
        out_label = self.template.output_fields[0][0]
        if self.template.cot:
            live.append(f"{out_label}: {COT_PREFIX}")
        else:
            live.append(f"{out_label}:")
        sections.append("\n".join(live))
        return SECTION_SEP.join(sections)


def render_demo(template: StageTemplate, demo: Demonstration) -> str:
    lines = [f"{label}: {value}" for label, value in demo.inputs]
    out_label = template.output_fields[0][0]
    completion = demo.output.strip()
    if template.cot:
        lines.append(f"{out_label}: {COT_PREFIX} {completion}")
    else:
        lines.append(f"{out_label}: {completion}")
    return "\n".join(lines)


def candidate_gen_template(schema_name: str, limit: int) -> StageTemplate:
    return StageTemplate(
        stage=STAGE_CANDIDATE_GEN,
        instruction=(
            f"You are a {schema_name} schema expert. Your goal is to take the "
            f"{schema_name} schema and based on the input, refine the schema to "
            f"include only the {limit} most likely matches to the input query."
        ),
        input_fields=(
            ("Input Schema", f"input {schema_name} schema values"),
            ("Input Query", "input query"),
        ),
        output_fields=(
            (
                "Refined Schema",
                f"{limit} most likely matches to the input query. Respond with a "
                'single JSON object of the form {"value": [{"related": "<schema key>"}]} '
                "listing the most likely matches.",
            ),
        ),
    )


def refine_template(schema_name: str, limit: int) -> StageTemplate:
    return StageTemplate(
        stage=STAGE_REFINE,
        instruction=(
            f"You are an expert {schema_name} matching ranker. Your task is to take "
            f"the {schema_name} candidates and based on the input, refine the "
            f"candidates to select the {limit} most likely matches to the input "
            "query. Return ONLY the keys."
        ),
        input_fields=(
            ("Input Schema", "list of key: value pairs"),
            ("Input Query", "input query"),
        ),
        output_fields=(
            ("Reasoning", f"{COT_PREFIX} produce the refined string list. We ..."),
            (
                "Refined String List",
                f"{limit} most likely matches to the input query. Include a maximum "
                f"of the {limit} most likely matches to the input query. Return ONLY "
                "the keys",
            ),
        ),
        cot=True,
    )


def mcq_format_template() -> StageTemplate:
    return StageTemplate(
        stage=STAGE_MCQ_FORMAT,
        instruction=(
            "You are an expert MCQ formatter. Your task is to take a list of schema "
            "values and convert them into a multiple choice question format with "
            "(letter)Schema value. Add a No Match option."
        ),
        input_fields=(("Input", "input list of schema values"),),
        output_fields=(
            (
                "Mcq",
                "MCQ format of schema values e.g (A)Schema value, (B)Schema value. "
                "Do not include additional options, only the schema values as "
                "options. Add a No Match option.",
            ),
        ),
    )


def confidence_template() -> StageTemplate:
    return StageTemplate(
        stage=STAGE_CONFIDENCE,
        instruction=(
            "You are a schema matching expert. Your task is given the input and the "
            "MCQ format of the schema, predict the likelihood or relation score "
            "from 0-100 of the input query being related to each option. Your "
            "scores will be calibrated. If there is no good match score No Match "
            "as 100"
        ),
        input_fields=(
            ("Input Mcq", "input MCQ format of schema values"),
            ("Input Query", "input query"),
        ),
        output_fields=(
            (
                "Relation",
                "Relation score of the input query being related to each option as "
                "value. Assess each independently including No Match, returning a "
                "score from 0-100 for each. Return with key as MCQ letter e.g (A) "
                "and score=value as JSON",
            ),
        ),
    )


def evaluator_template() -> StageTemplate:
    return StageTemplate(
        stage=STAGE_EVALUATOR,
        instruction=(
            "You are a schema matching expert, your task is to rate if any of the "
            "suggested matches are potential good matches for the query. Be lenient "
            "and rate a match as good (4 or 5) if it is relevant to the query. Rate "
            "the matches from 1-5. If none of the matches are good, rate 0."
        ),
        input_fields=(
            ("Query", "the query"),
            ("Answers", "possible matches"),
        ),
        output_fields=(
            ("Reasoning", f"{COT_PREFIX} produce the rating. We ..."),
            (
                "Rating",
                "Rate if any of the suggested matches are good for the query from "
                "1-5. Only output the rating and nothing else.",
            ),
        ),
        cot=True,
    )


# ---------------------------------------------------------------------------
# Output parsing

_LETTER_KEY_RE = re.compile(r"^\(?\s*([A-Za-z])\s*\)?$")
_RATING_RE = re.compile(r"Rating\s*:\s*(-?\d+)")
_TRAILING_INT_RE = re.compile(r"(-?\d+)\s*$")


def _unwrap_quoted_json(text: str) -> str:
    """Completions sometimes arrive as a JSON-encoded string of JSON."""
    stripped = text.strip()
    if stripped.startswith('"') and stripped.endswith('"'):
        try:
            inner = json.loads(stripped)
        except json.JSONDecodeError:
            return text
        if isinstance(inner, str):
            return inner
    return text


def iter_json_objects(text: str) -> Iterator[dict]:
    """Yield every balanced JSON object embedded anywhere in the text."""
    decoder = json.JSONDecoder()
    pos = 0
    while True:
        start = text.find("{", pos)
        if start < 0:
            return
        try:
            obj, end = decoder.raw_decode(text, start)
        except ValueError:
            pos = start + 1
            continue
        if isinstance(obj, dict):
            yield obj
        pos = max(end, start + 1)


def parse_json_value_list(text: str) -> list[str]:
    """Extract the ordered "related" strings from a candidate-list completion.

    The completion may surround the JSON object with prose or backticks; the
    first object shaped like {"value": [{"related": ...}]} wins.
    """
    text = _unwrap_quoted_json(text)
    for obj in iter_json_objects(text):
        value = obj.get("value")
        if not isinstance(value, list):
            continue
        if all(isinstance(item, dict) and isinstance(item.get("related"), str) for item in value):
            return [item["related"] for item in value]
    raise ParseError("no JSON object with the expected candidate-list shape")


@dataclass
class RelationScores:
    scores: dict[str, float]
    warnings: list[str] = field(default_factory=list)


def parse_relation_scores(text: str) -> RelationScores:
    """Parse a letter -> score object, accepting "(A)" and "A" key styles.

    Keys normalize to bare uppercase letters; values clamp into [0, 100] with
    a warning. A letter-keyed object with a non-numeric value is an error.
    """
    text = _unwrap_quoted_json(text)
    for obj in iter_json_objects(text):
        if not obj:
            continue
        normalized: dict[str, float] = {}
        letter_keyed = True
        for raw_key, raw_value in obj.items():
            match = _LETTER_KEY_RE.match(str(raw_key).strip())
            if not match:
                letter_keyed = False
                break
            letter = match.group(1).upper()
            if isinstance(raw_value, bool) or not isinstance(raw_value, (int, float, str)):
                raise ParseError(f"non-numeric score for option {letter}: {raw_value!r}")
            try:
                value = float(raw_value)
            except ValueError:
                raise ParseError(f"non-numeric score for option {letter}: {raw_value!r}")
            if math.isnan(value) or math.isinf(value):
                raise ParseError(f"non-finite score for option {letter}: {raw_value!r}")
            normalized[letter] = value
        if not letter_keyed:
            continue
        warnings = []
        for letter, value in list(normalized.items()):
            clamped = max(0.0, min(100.0, value))
            if clamped != value:
                warnings.append(f"score for {letter} clamped from {value} to {clamped}")
                normalized[letter] = clamped
        return RelationScores(scores=normalized, warnings=warnings)
    raise ParseError("no letter-keyed JSON score object found")


def parse_rating(text: str) -> int:
    """Extract a 0-5 rating from "Rating: <n>" or a bare trailing integer."""
    text = _unwrap_quoted_json(text)
    matches = _RATING_RE.findall(text)
    if matches:
        value = int(matches[-1])
    else:
        trailing = _TRAILING_INT_RE.search(text.strip())
        if not trailing:
            raise ParseError("no rating found in completion")
        value = int(trailing.group(1))
    if not 0 <= value <= 5:
        raise ParseError(f"rating {value} out of range 0-5")
    return value


# ---------------------------------------------------------------------------
# Repair loop

FORMAT_REMINDER = (
    "Reminder: respond strictly in the format described above; "
    "output only the requested final field."
)


def complete_parsed(
    backend: Backend,
    stage: str,
    prompt_text: str,
    params: LlmParams,
    parser: Callable[[str], object],
):
    """Call the backend and parse; on a parse failure, re-prompt exactly once
    with an appended format reminder before surfacing the error.

    Returns (raw_text, parsed, repaired).
    """
    raw = backend.complete(stage, prompt_text, params)
    try:
        return raw, parser(raw), False
    except ParseError:
        repair_prompt = f"{prompt_text}\n\n{FORMAT_REMINDER}"
        raw = backend.complete(stage, repair_prompt, params)
        return raw, parser(raw), True
