/**
 * Pure view-model builders. The queue view model preserves the API's item
 * order exactly (the service already sorts by entropy): the client never
 * resorts, so what renders is what the API returned.
 */

import type {
  AttributeRef,
  DeferredItem,
  MetricsPayload,
  RunSummary,
  TargetAttribute,
} from "./api.js";

export function queryKey(ref: AttributeRef): string {
  return `${ref.table}.${ref.attribute}`;
}

export interface CandidateVM {
  index: number;
  letter: string;
  target: AttributeRef;
  key: string;
  description: string;
  score: number;
  /** score as a 0..100 width for the confidence bar */
  barPercent: number;
}

export interface QueueItemVM {
  key: string;
  query: AttributeRef;
  queryText: string;
  entropy: number;
  entropyLabel: string;
  abstained: boolean;
  candidates: CandidateVM[];
  decided: boolean;
}

export interface QueueVM {
  items: QueueItemVM[];
  pendingCount: number;
}

export function buildQueueVM(
  items: DeferredItem[],
  locallyDecided: ReadonlySet<string> = new Set(),
): QueueVM {
  const vms = items.map((item) => {
    const key = queryKey(item.query);
    return {
      key,
      query: { table: item.query.table, attribute: item.query.attribute },
      queryText: item.query.text,
      entropy: item.entropy,
      entropyLabel: item.entropy.toFixed(3),
      abstained: item.abstained,
      decided: locallyDecided.has(key),
      candidates: item.candidates.map((c, index) => ({
        index,
        letter: c.letter,
        target: c.target,
        key: c.key,
        description: c.description,
        score: c.score,
        barPercent: Math.max(0, Math.min(100, c.score)),
      })),
    };
  });
  return {
    items: vms,
    pendingCount: vms.filter((item) => !item.decided).length,
  };
}

export interface RunRowVM {
  runId: string;
  status: string;
  createdAt: string;
  /** Complete runs open the queue; failed runs open so the error shows. */
  clickable: boolean;
}

export function buildRunListVM(runs: RunSummary[]): RunRowVM[] {
  return runs.map((run) => ({
    runId: run.run_id,
    status: run.status,
    createdAt: run.created_at,
    clickable: run.status === "complete" || run.status === "failed",
  }));
}

export interface MetricsVM {
  mode: "accuracy" | "entropy";
  withDecisions: boolean;
  nQueries: number;
  nAbstained: number;
  nDecided: number;
  accuracyRows: Array<{ k: string; percent: string; value: number }>;
  histogram: Array<{ from: string; to: string; count: number }>;
}

export function buildMetricsVM(payload: MetricsPayload): MetricsVM {
  const accuracyRows = Object.entries(payload.accuracy_at ?? {})
    .sort(([a], [b]) => Number(a) - Number(b))
    .map(([k, value]) => ({
      k,
      value,
      percent: `${(value * 100).toFixed(1)}%`,
    }));
  const histogram = [];
  const h = payload.entropy_histogram;
  if (h) {
    for (let i = 0; i < h.counts.length; i++) {
      histogram.push({
        from: (h.bin_edges[i] ?? 0).toFixed(2),
        to: (h.bin_edges[i + 1] ?? 0).toFixed(2),
        count: h.counts[i] ?? 0,
      });
    }
  }
  return {
    mode: payload.accuracy_at ? "accuracy" : "entropy",
    withDecisions: payload.with_decisions,
    nQueries: payload.n_queries,
    nAbstained: payload.n_abstained,
    nDecided: payload.n_decided,
    accuracyRows,
    histogram,
  };
}

export interface SearchHit {
  key: string;
  target: AttributeRef;
  description: string;
}

/** Case-insensitive substring search over the target-attribute catalog. */
export function searchCatalog(
  catalog: TargetAttribute[],
  needle: string,
  limit = 8,
): SearchHit[] {
  const query = needle.trim().toLowerCase();
  if (!query) {
    return [];
  }
  const hits: SearchHit[] = [];
  for (const entry of catalog) {
    const haystack = `${entry.key} ${entry.description}`.toLowerCase();
    if (haystack.includes(query)) {
      hits.push({
        key: entry.key,
        target: { table: entry.table, attribute: entry.attribute },
        description: entry.description,
      });
      if (hits.length >= limit) {
        break;
      }
    }
  }
  return hits;
}
