/**
 * Browser bootstrap: hash routing, state, and event wiring. All data comes
 * from the API client; all markup comes from the pure renderers. Decisions
 * apply optimistically and roll back on 409/422.
 */

import { ApiClient, ApiError } from "./api.js";
import type { DeferredItem, TargetAttribute } from "./api.js";
import { SHORTCUT_LEGEND, shortcutFor } from "./keyboard.js";
import {
  renderMetrics,
  renderQueue,
  renderRunList,
  renderSearchHits,
} from "./render.js";
import {
  buildMetricsVM,
  buildQueueVM,
  buildRunListVM,
  queryKey,
  searchCatalog,
} from "./viewmodel.js";

const api = new ApiClient("");

interface QueueState {
  runId: string;
  p: number;
  items: DeferredItem[];
  decided: Set<string>;
  selectedKey: string | null;
  catalog: TargetAttribute[];
  hasGold: boolean;
  searching: boolean;
}

let queueState: QueueState | null = null;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) {
    throw new Error(`missing #${id}`);
  }
  return node as T;
}

function notice(text: string, isError = false): void {
  const banner = el<HTMLElement>("notice");
  banner.textContent = text;
  banner.className = isError ? "notice error" : "notice";
  banner.hidden = text === "";
}

// ---------------------------------------------------------------------------
// Routing

interface Route {
  view: "runs" | "queue" | "metrics";
  runId?: string;
  p?: number;
}

function parseRoute(hash: string): Route {
  const queue = hash.match(/^#\/run\/([^/]+)(?:\?p=(\d+))?$/);
  if (queue?.[1]) {
    return { view: "queue", runId: queue[1], p: Number(queue[2] ?? "30") };
  }
  const metrics = hash.match(/^#\/run\/([^/]+)\/metrics$/);
  if (metrics?.[1]) {
    return { view: "metrics", runId: metrics[1] };
  }
  return { view: "runs" };
}

async function navigate(): Promise<void> {
  notice("");
  const route = parseRoute(window.location.hash);
  try {
    if (route.view === "runs") {
      await showRunList();
    } else if (route.view === "queue" && route.runId) {
      await showQueue(route.runId, route.p ?? 30);
    } else if (route.view === "metrics" && route.runId) {
      await showMetrics(route.runId);
    }
  } catch (error) {
    if (error instanceof ApiError) {
      notice(`${error.code}: ${error.message}`, true);
    } else {
      notice(`service unreachable: ${String(error)}`, true);
    }
  }
}

// ---------------------------------------------------------------------------
// Views

async function showRunList(): Promise<void> {
  queueState = null;
  const runs = await api.listRuns();
  el("view").innerHTML = `
    <h2>Runs</h2>
    ${renderRunList(buildRunListVM(runs))}
  `;
}

async function showQueue(runId: string, p: number): Promise<void> {
  const [record, deferred] = await Promise.all([
    api.getRun(runId),
    api.getDeferred(runId, p),
  ]);
  queueState = {
    runId,
    p,
    items: deferred.items,
    decided: new Set<string>(),
    selectedKey: deferred.items[0] ? queryKey(deferred.items[0].query) : null,
    catalog: record.target_attributes,
    hasGold: record.has_gold,
    searching: false,
  };
  el("view").innerHTML = `
    <h2>Review queue <small>run ${runId}</small></h2>
    <div class="toolbar">
      <label>defer top
        <input id="p-slider" type="range" min="0" max="50" step="10" value="${p}" />
        <span id="p-value">${p}%</span>
      </label>
      <a href="#/run/${runId}/metrics">metrics</a>
      <a href="#/">all runs</a>
    </div>
    <div class="search" hidden id="search-box">
      <input id="search-input" placeholder="search target attributes" />
      <div id="search-results"></div>
    </div>
    <div id="queue"></div>
    <footer class="legend">${SHORTCUT_LEGEND.map(([k, what]) => `<span><kbd>${k}</kbd> ${what}</span>`).join(" ")}</footer>
  `;
  el<HTMLInputElement>("p-slider").addEventListener("change", (event) => {
    const value = (event.target as HTMLInputElement).value;
    window.location.hash = `#/run/${runId}?p=${value}`;
  });
  el<HTMLInputElement>("search-input").addEventListener("input", onSearchInput);
  el("queue").addEventListener("click", onQueueClick);
  repaintQueue();
}

function repaintQueue(): void {
  if (!queueState) return;
  const vm = buildQueueVM(queueState.items, queueState.decided);
  el("queue").innerHTML = renderQueue(vm, queueState.selectedKey);
  const searchBox = el("search-box");
  searchBox.hidden = !queueState.searching;
}

async function showMetrics(runId: string): Promise<void> {
  queueState = null;
  const render = async (withDecisions: boolean) => {
    const payload = await api.getMetrics(runId, withDecisions);
    el("metrics-panel").innerHTML = renderMetrics(buildMetricsVM(payload));
  };
  el("view").innerHTML = `
    <h2>Metrics <small>run ${runId}</small></h2>
    <div class="toolbar">
      <label><input type="checkbox" id="with-decisions" /> apply human decisions</label>
      <a href="#/run/${runId}">queue</a>
      <a href="#/">all runs</a>
    </div>
    <div id="metrics-panel"></div>
  `;
  el<HTMLInputElement>("with-decisions").addEventListener("change", (event) => {
    void render((event.target as HTMLInputElement).checked);
  });
  await render(false);
}

// ---------------------------------------------------------------------------
// Queue interaction

function selectedItem(): DeferredItem | null {
  if (!queueState?.selectedKey) return null;
  return (
    queueState.items.find((i) => queryKey(i.query) === queueState?.selectedKey) ??
    null
  );
}

function moveSelection(delta: number): void {
  if (!queueState || queueState.items.length === 0) return;
  const keys = queueState.items.map((i) => queryKey(i.query));
  const current = queueState.selectedKey ? keys.indexOf(queueState.selectedKey) : 0;
  const next = Math.min(keys.length - 1, Math.max(0, current + delta));
  queueState.selectedKey = keys[next] ?? null;
  repaintQueue();
}

function advancePastSelection(): void {
  if (!queueState) return;
  const pending = queueState.items
    .map((i) => queryKey(i.query))
    .filter((key) => !queueState?.decided.has(key));
  queueState.selectedKey = pending[0] ?? null;
  repaintQueue();
}

async function decide(
  decision:
    | { kind: "accept_top1" }
    | { kind: "no_match" }
    | { kind: "choose"; target: { table: string; attribute: string } },
): Promise<void> {
  const state = queueState;
  const item = selectedItem();
  if (!state || !item) return;
  const key = queryKey(item.query);
  if (state.decided.has(key)) {
    notice("already decided; it will drop from the queue on refetch", true);
    return;
  }
  // Optimistic: mark decided, advance, roll back on rejection.
  state.decided.add(key);
  advancePastSelection();
  try {
    await api.submitDecision(state.runId, {
      query: { table: item.query.table, attribute: item.query.attribute },
      decision,
      reviewer: "ui",
    });
    notice(`${key}: ${decision.kind} recorded`);
  } catch (error) {
    state.decided.delete(key);
    state.selectedKey = key;
    repaintQueue();
    if (error instanceof ApiError && (error.status === 409 || error.status === 422)) {
      notice(`rolled back: ${error.message}`, true);
      if (error.status === 409) {
        await reloadQueue();
      }
    } else {
      notice(String(error), true);
    }
  }
}

async function reloadQueue(): Promise<void> {
  if (!queueState) return;
  const deferred = await api.getDeferred(queueState.runId, queueState.p);
  queueState.items = deferred.items;
  queueState.decided.clear();
  advancePastSelection();
}

function onQueueClick(event: Event): void {
  const target = event.target as HTMLElement;
  const itemNode = target.closest<HTMLElement>("[data-query-key]");
  if (!itemNode || !queueState) return;
  queueState.selectedKey = itemNode.dataset["queryKey"] ?? null;
  const candidateNode = target.closest<HTMLElement>("[data-candidate-index]");
  if (candidateNode) {
    const index = Number(candidateNode.dataset["candidateIndex"]);
    void pickCandidate(index);
    return;
  }
  repaintQueue();
}

async function pickCandidate(index: number): Promise<void> {
  const item = selectedItem();
  const candidate = item?.candidates[index];
  if (!candidate) return;
  await decide({ kind: "choose", target: candidate.target });
}

function onSearchInput(): void {
  if (!queueState) return;
  const needle = el<HTMLInputElement>("search-input").value;
  const hits = searchCatalog(queueState.catalog, needle);
  el("search-results").innerHTML = renderSearchHits(hits);
  el("search-results").querySelectorAll<HTMLElement>("[data-hit-index]").forEach((node) => {
    node.addEventListener("click", () => {
      const table = node.dataset["table"] ?? "";
      const attribute = node.dataset["attribute"] ?? "";
      if (queueState) {
        queueState.searching = false;
      }
      void decide({ kind: "choose", target: { table, attribute } });
    });
  });
}

function onKeydown(event: KeyboardEvent): void {
  if (!queueState) return;
  const inInput = (event.target as HTMLElement).tagName === "INPUT";
  const action = shortcutFor(event.key, inInput);
  if (!action) return;
  event.preventDefault();
  switch (action.kind) {
    case "accept": {
      const item = selectedItem();
      if (item && item.candidates.length > 0) {
        void decide({ kind: "accept_top1" });
      }
      break;
    }
    case "noMatch":
      void decide({ kind: "no_match" });
      break;
    case "next":
      moveSelection(1);
      break;
    case "prev":
      moveSelection(-1);
      break;
    case "pick":
      void pickCandidate(action.index);
      break;
    case "search":
      queueState.searching = !queueState.searching;
      repaintQueue();
      if (queueState.searching) {
        el<HTMLInputElement>("search-input").focus();
      }
      break;
  }
}

// ---------------------------------------------------------------------------

window.addEventListener("hashchange", () => void navigate());
window.addEventListener("keydown", onKeydown);
void navigate();
