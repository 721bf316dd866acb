"""Metrics and experiment protocols over completed match runs.

accuracy@k scores every gold entry, nulls included: a null gold counts
correct only when the system abstained. Confidence entropy drives the
human-deferral analysis; pooled text similarity between a wrong prediction
and the true target drives the remedial-action analysis.

Everything here is a pure function of a finished run, so callers are free
to parallelize across variants.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Mapping, Sequence

from .embedding_index import Embedder, pooled_similarity
from .schema_model import AttributeRef, MappingSet, Schema, render_query

if TYPE_CHECKING:  # pragma: no cover
    from .match_pipeline import MatchRun, QueryOutcome

DEFAULT_DEFERRAL_PERCENTS = (0, 10, 20, 30, 40, 50)

POLICY_ENTROPY = "entropy"
POLICY_RANDOM = "random"


class EvalError(ValueError):
    """Gold entries without run records, or other evaluation mismatches."""


def entropy(scores: Mapping[str, float]) -> float:
    """Shannon entropy (natural log) of the normalized score distribution.

    Scores are normalized to probabilities by their sum; an all-zero map is
    treated as uniform. The abstain option participates like any other: mass
    on "no match" is genuine uncertainty about whether a match exists.
    """
    if not scores:
        raise ValueError("entropy requires at least one option")
    values = [max(0.0, float(v)) for v in scores.values()]
    total = sum(values)
    if total == 0:
        probs = [1.0 / len(values)] * len(values)
    else:
        probs = [v / total for v in values]
    return -sum(p * math.log(p) for p in probs if p > 0)


@dataclass
class MetricReport:
    accuracy_at: dict[int, float]
    n_queries: int
    n_abstained: int
    warnings: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accuracy_at": {str(k): v for k, v in sorted(self.accuracy_at.items())},
            "n_queries": self.n_queries,
            "n_abstained": self.n_abstained,
            "warnings": dict(sorted(self.warnings.items())),
        }


@dataclass
class DeferralCurve:
    policy: str
    seed: int | None
    points: list[tuple[int, float]]  # (percent, accuracy@1 after deferral)

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "seed": self.seed,
            "points": [{"p": p, "accuracy_at_1": acc} for p, acc in self.points],
        }


def _gold_outcomes(run: "MatchRun", gold: MappingSet) -> list[tuple["QueryOutcome", AttributeRef | None]]:
    """Pair each gold entry with its run record, preserving run order."""
    gold_by_source = gold.as_dict()
    pairs = []
    seen = set()
    for outcome in run.outcomes:
        if outcome.query.ref in gold_by_source:
            pairs.append((outcome, gold_by_source[outcome.query.ref]))
            seen.add(outcome.query.ref)
    missing = [src.dotted() for src in gold_by_source if src not in seen]
    if missing:
        raise EvalError(f"gold entries without run records: {missing}")
    return pairs


def _correct_at_k(
    outcome: "QueryOutcome",
    gold_target: AttributeRef | None,
    k: int,
    equivalence: Mapping[AttributeRef, set[AttributeRef]] | None = None,
) -> bool:
    scored = outcome.scored
    if scored is None:
        return False
    if gold_target is None:
        return scored.abstained
    accepted = {gold_target}
    if equivalence and gold_target in equivalence:
        accepted |= equivalence[gold_target]
    return any(ref in accepted for ref, _ in scored.ranked[:k])


def accuracy_at_k(
    run: "MatchRun",
    gold: MappingSet,
    k: int,
    equivalence: Mapping[AttributeRef, set[AttributeRef]] | None = None,
) -> float:
    """Fraction of gold entries answered correctly within the top k.

    Non-null gold: correct when the gold target appears in the top-k ranked
    predictions. Null gold: correct only when the query abstained. The
    optional equivalence map treats listed target pairs as interchangeable.
    """
    pairs = _gold_outcomes(run, gold)
    if not pairs:
        raise EvalError("no gold entries to evaluate")
    correct = sum(
        1 for outcome, tgt in pairs if _correct_at_k(outcome, tgt, k, equivalence)
    )
    return correct / len(pairs)


def metric_report(
    run: "MatchRun",
    gold: MappingSet,
    ks: Sequence[int] = (1, 3, 5),
    equivalence: Mapping[AttributeRef, set[AttributeRef]] | None = None,
) -> MetricReport:
    pairs = _gold_outcomes(run, gold)
    return MetricReport(
        accuracy_at={k: accuracy_at_k(run, gold, k, equivalence) for k in ks},
        n_queries=len(pairs),
        n_abstained=sum(
            1 for o, _ in pairs if o.scored is not None and o.scored.abstained
        ),
        warnings=dict(run.metadata.warnings),
    )


def load_equivalence_map(path) -> dict[AttributeRef, set[AttributeRef]]:
    """Optional CSV of interchangeable target pairs, `a.b,c.d` per line."""
    from pathlib import Path

    mapping: dict[AttributeRef, set[AttributeRef]] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.lower() == "left,right":
            continue
        left_raw, _, right_raw = line.partition(",")
        left = AttributeRef.from_dotted(left_raw.strip())
        right = AttributeRef.from_dotted(right_raw.strip())
        mapping.setdefault(left, set()).add(right)
        mapping.setdefault(right, set()).add(left)
    return mapping


# ---------------------------------------------------------------------------
# Entropy-based human deferral


def _deferral_order(
    pairs: list[tuple["QueryOutcome", AttributeRef | None]],
    policy: str,
    seed: int | None,
) -> list[int]:
    """Indices of queries in the order they would be handed to the oracle.

    Random deferral shuffles once and takes prefixes, so growing p always
    defers a superset: corrections never get undone at a higher percentage.
    """
    n = len(pairs)
    if policy == POLICY_ENTROPY:
        entropies = [
            pairs[i][0].scored.entropy if pairs[i][0].scored else float("inf")
            for i in range(n)
        ]
        return sorted(range(n), key=lambda i: (-entropies[i], i))
    if policy == POLICY_RANDOM:
        order = list(range(n))
        random.Random(seed).shuffle(order)
        return order
    raise ValueError(f"unknown deferral policy {policy!r}")


def deferral_curve(
    run: "MatchRun",
    gold: MappingSet,
    policy: str = POLICY_ENTROPY,
    seed: int | None = 0,
    percents: Sequence[int] = DEFAULT_DEFERRAL_PERCENTS,
) -> DeferralCurve:
    """accuracy@1 after deferring each percentage of queries to an oracle.

    The deferred queries' predictions are replaced by gold (a null gold
    becomes a correct abstention), then accuracy@1 is recomputed.
    """
    pairs = _gold_outcomes(run, gold)
    n = len(pairs)
    order = _deferral_order(pairs, policy, seed)
    baseline = [_correct_at_k(outcome, tgt, 1) for outcome, tgt in pairs]
    points = []
    for p in percents:
        deferred = set(order[: math.ceil(p / 100 * n)])
        correct = sum(
            1 for i in range(n) if i in deferred or baseline[i]
        )
        points.append((p, correct / n if n else 0.0))
    return DeferralCurve(
        policy=policy,
        seed=seed if policy == POLICY_RANDOM else None,
        points=points,
    )


# ---------------------------------------------------------------------------
# Remedial-action analysis


def remedial_analysis(
    run: "MatchRun",
    gold: MappingSet,
    target: Schema,
    embedder: Embedder,
    thresholds: Sequence[float],
) -> list[tuple[float, float]]:
    """accuracy@1 after correcting wrong predictions that sit semantically
    close to their true targets.

    For each threshold t, a query wrong at k=1 is corrected when the pooled
    similarity between the predicted attribute's text and the gold
    attribute's text is >= t. Errors with no comparable text pair (an
    abstention against a non-null gold, a prediction against a null gold, or
    a failed query) correct only at the t <= 0 sentinel.
    """
    pairs = _gold_outcomes(run, gold)
    n = len(pairs)
    baseline_correct = 0
    similarities: list[float | None] = []  # None: no text pair exists
    for outcome, tgt in pairs:
        if _correct_at_k(outcome, tgt, 1):
            baseline_correct += 1
            similarities.append(None)
            continue
        scored = outcome.scored
        if scored is None or tgt is None or not scored.ranked:
            similarities.append(None)
        else:
            predicted = scored.ranked[0][0]
            similarities.append(
                pooled_similarity(
                    render_query(predicted, target),
                    render_query(tgt, target),
                    embedder,
                )
            )

    wrong = [
        (i, similarities[i])
        for i, (outcome, tgt) in enumerate(pairs)
        if not _correct_at_k(outcome, tgt, 1)
    ]
    results = []
    for t in thresholds:
        corrected = sum(
            1
            for _, sim in wrong
            if (sim is not None and sim >= t) or (sim is None and t <= 0.0)
        )
        results.append((t, (baseline_correct + corrected) / n if n else 0.0))
    return results


# ---------------------------------------------------------------------------
# Ablation comparison


@dataclass
class AblationRow:
    variant: str
    accuracy_at: dict[int, float] | None
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "accuracy_at": None
            if self.accuracy_at is None
            else {str(k): v for k, v in sorted(self.accuracy_at.items())},
            "error": self.error,
        }


def ablation_report(
    run_variant: Callable[[str], "MatchRun"],
    variants: Sequence[str],
    gold: MappingSet,
    ks: Sequence[int] = (1, 3, 5),
) -> list[AblationRow]:
    """Run each candidate-generation variant and tabulate accuracy@k.

    A failing variant contributes an error row; the others still complete.
    """
    rows = []
    for variant in variants:
        try:
            run = run_variant(variant)
            rows.append(
                AblationRow(
                    variant=variant,
                    accuracy_at={k: accuracy_at_k(run, gold, k) for k in ks},
                )
            )
        except Exception as exc:
            rows.append(AblationRow(variant=variant, accuracy_at=None, error=str(exc)))
    return rows


def format_table(rows: list[AblationRow], ks: Sequence[int] = (1, 3, 5)) -> str:
    """Aligned-column text table for terminal reports."""
    header = ["variant"] + [f"acc@{k}" for k in ks]
    body = []
    for row in rows:
        if row.accuracy_at is None:
            body.append([row.variant] + [f"error: {row.error}"] + [""] * (len(ks) - 1))
        else:
            body.append([row.variant] + [f"{row.accuracy_at[k]:.4f}" for k in ks])
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    return "\n".join(lines)
