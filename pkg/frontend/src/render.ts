/**
 * HTML-string renderers. Pure functions of view models so tests can assert
 * on rendered order without a browser; the DOM layer injects the strings
 * verbatim and wires events by data attributes.
 */

import type { MetricsVM, QueueItemVM, QueueVM, RunRowVM, SearchHit } from "./viewmodel.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;")
    .replace(/'/g, "&#39;");
}

export function renderRunList(rows: RunRowVM[]): string {
  if (rows.length === 0) {
    return `<p class="empty">No runs yet. Start one with the CLI or POST /api/v1/runs.</p>`;
  }
  const body = rows
    .map((row) => {
      const link = row.clickable
        ? `<a href="#/run/${escapeHtml(row.runId)}">${escapeHtml(row.runId)}</a>`
        : escapeHtml(row.runId);
      return `<tr data-run-id="${escapeHtml(row.runId)}">
        <td>${link}</td>
        <td><span class="badge badge-${escapeHtml(row.status)}">${escapeHtml(row.status)}</span></td>
        <td>${escapeHtml(row.createdAt)}</td>
      </tr>`;
    })
    .join("\n");
  return `<table class="runs"><thead><tr><th>run</th><th>status</th><th>created</th></tr></thead><tbody>${body}</tbody></table>`;
}

function renderCandidates(item: QueueItemVM): string {
  if (item.candidates.length === 0) {
    return `<p class="empty">No candidates were scored for this query.</p>`;
  }
  return item.candidates
    .map(
      (c) => `<li class="candidate" data-candidate-index="${c.index}">
      <span class="pick-hint">${c.index + 1}</span>
      <span class="key">${escapeHtml(c.key)}</span>
      <span class="bar"><span class="bar-fill" style="width: ${c.barPercent}%"></span></span>
      <span class="score">${c.score}</span>
      <span class="description">${escapeHtml(c.description)}</span>
    </li>`,
    )
    .join("\n");
}

export function renderQueueItem(
  item: QueueItemVM,
  selected: boolean,
): string {
  const classes = ["item"];
  if (selected) classes.push("selected");
  if (item.decided) classes.push("decided");
  const badge = item.decided ? `<span class="badge badge-decided">decided</span>` : "";
  const abstain = item.abstained
    ? `<span class="badge badge-abstained">abstained</span>`
    : "";
  return `<li class="${classes.join(" ")}" data-query-key="${escapeHtml(item.key)}">
    <header>
      <span class="query">${escapeHtml(item.queryText)}</span>
      ${badge} ${abstain}
      <span class="entropy" title="confidence entropy">H=${item.entropyLabel}</span>
    </header>
    <ul class="candidates">${renderCandidates(item)}</ul>
  </li>`;
}

export function renderQueue(vm: QueueVM, selectedKey: string | null): string {
  if (vm.items.length === 0) {
    return `<p class="empty">Nothing deferred at this percentage. Raise the slider or celebrate.</p>`;
  }
  const items = vm.items
    .map((item) => renderQueueItem(item, item.key === selectedKey))
    .join("\n");
  return `<ol class="queue">${items}</ol>`;
}

/** Queue keys in rendered order; tests compare this against the API order. */
export function renderedQueueOrder(html: string): string[] {
  const keys: string[] = [];
  const pattern = /data-query-key="([^"]*)"/g;
  let match;
  while ((match = pattern.exec(html)) !== null) {
    keys.push(match[1] ?? "");
  }
  return keys;
}

export function renderMetrics(vm: MetricsVM): string {
  const header = `<p class="meta">${vm.nQueries} queries, ${vm.nAbstained} abstained, ${vm.nDecided} decided</p>`;
  if (vm.mode === "accuracy") {
    const rows = vm.accuracyRows
      .map(
        (row) =>
          `<tr data-k="${escapeHtml(row.k)}"><td>accuracy@${escapeHtml(row.k)}</td><td>${escapeHtml(row.percent)}</td></tr>`,
      )
      .join("\n");
    const label = vm.withDecisions ? "with human decisions" : "model only";
    return `${header}<p class="mode">${label}</p><table class="metrics"><tbody>${rows}</tbody></table>`;
  }
  const bars = vm.histogram
    .map(
      (bin) =>
        `<tr><td>${bin.from}-${bin.to}</td><td data-count="${bin.count}">${"#".repeat(bin.count)} ${bin.count}</td></tr>`,
    )
    .join("\n");
  return `${header}<p class="mode">no gold mapping attached; entropy distribution</p><table class="histogram"><tbody>${bars}</tbody></table>`;
}

export function renderSearchHits(hits: SearchHit[]): string {
  if (hits.length === 0) {
    return "";
  }
  const rows = hits
    .map(
      (hit, i) => `<li class="hit" data-hit-index="${i}" data-table="${escapeHtml(hit.target.table)}" data-attribute="${escapeHtml(hit.target.attribute)}">
      <span class="key">${escapeHtml(hit.key)}</span>
      <span class="description">${escapeHtml(hit.description)}</span>
    </li>`,
    )
    .join("\n");
  return `<ul class="search-hits">${rows}</ul>`;
}
