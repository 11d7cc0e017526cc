/** Console wiring: canvas, toolbar, API, event stream. */

import { ApiClient, ApiError } from "./api.js";
import { EditHistory, issuesByEntity, placeEntity, PlaceKind } from "./editor.js";
import { subscribeEvents } from "./live.js";
import { drawScene } from "./render.js";
import {
  applyEvent,
  fitView,
  initialLiveState,
  initialViewState,
  isStale,
  markDisconnected,
  pan,
  screenToWorld,
  zoom,
  type EditMode,
} from "./state.js";
import type { ScenarioDoc } from "./types.js";

const params = new URLSearchParams(location.search);
const base = params.get("api") ?? `http://${location.hostname}:8080`;
const api = new ApiClient(base);

const canvas = document.getElementById("view") as HTMLCanvasElement;
const ctx = canvas.getContext("2d")!;
const toastEl = document.getElementById("toast")!;
const bannerEl = document.getElementById("banner")!;
const statusEl = document.getElementById("status")!;
const countEl = document.getElementById("map-count")!;

let view = initialViewState();
let live = initialLiveState();
let scenario: ScenarioDoc | null = null;
let mapPoints: [number, number, number][] = [];
let invalidEntities = new Set<string>();
const history = new EditHistory();

function toast(message: string): void {
  toastEl.textContent = message;
  toastEl.classList.add("show");
  setTimeout(() => toastEl.classList.remove("show"), 2500);
}

function redraw(): void {
  canvas.width = canvas.clientWidth;
  canvas.height = canvas.clientHeight;
  drawScene(ctx, view, mapPoints, scenario, live, invalidEntities);
  statusEl.textContent = `${live.status}${live.speed != null ? ` · ${live.speed.toFixed(1)} m/s` : ""}`;
  bannerEl.classList.toggle("show", isStale(live, Date.now()));
  const proceed = document.getElementById("btn-proceed") as HTMLButtonElement;
  proceed.disabled = live.status !== "holding-at-stop";
}

async function loadMapView(): Promise<void> {
  const body = await api.map();
  mapPoints = body.points;
  countEl.textContent = `${body.points.length} pts (server: ${body.count})`;
  view = fitView(view, canvas.clientWidth, canvas.clientHeight, mapPoints);
  redraw();
}

async function loadScenario(): Promise<void> {
  scenario = await api.scenario();
  redraw();
}

async function persistScenario(next: ScenarioDoc): Promise<boolean> {
  try {
    const warnings = await api.putScenario(next);
    scenario = next;
    invalidEntities = new Set(issuesByEntity(warnings).keys());
    redraw();
    return true;
  } catch (e) {
    if (e instanceof ApiError) {
      invalidEntities = new Set(issuesByEntity(e.issues).keys());
      toast(`rejected: ${e.message}`);
      redraw();
      return false;
    }
    throw e;
  }
}

// --- editing

function setMode(mode: EditMode): void {
  view = { ...view, mode };
  for (const el of document.querySelectorAll("[data-mode]")) {
    el.classList.toggle("active", el.getAttribute("data-mode") === mode);
  }
}

canvas.addEventListener("click", async (ev) => {
  if (view.mode === "inspect" || !scenario) return;
  const [x, y] = screenToWorld(view, canvas.width, canvas.height, ev.offsetX, ev.offsetY);
  const kind = view.mode.replace("place-", "") as PlaceKind;
  history.push(scenario);
  const placed = placeEntity(scenario, kind, Number(x.toFixed(3)), Number(y.toFixed(3)));
  if (await persistScenario(placed.doc)) {
    view = { ...view, selected: placed.entityId };
    redraw();
  }
});

let dragging: { x: number; y: number } | null = null;
canvas.addEventListener("mousedown", (ev) => {
  if (view.mode === "inspect") dragging = { x: ev.offsetX, y: ev.offsetY };
});
canvas.addEventListener("mousemove", (ev) => {
  if (!dragging) return;
  view = pan(view, ev.offsetX - dragging.x, ev.offsetY - dragging.y);
  dragging = { x: ev.offsetX, y: ev.offsetY };
  redraw();
});
canvas.addEventListener("mouseup", () => (dragging = null));
canvas.addEventListener("wheel", (ev) => {
  ev.preventDefault();
  view = zoom(view, canvas.width, canvas.height, ev.offsetX, ev.offsetY, ev.deltaY < 0 ? 1.15 : 0.87);
  redraw();
});

document.getElementById("btn-undo")!.addEventListener("click", async () => {
  const prev = history.undo();
  if (prev) await persistScenario(prev);
  else toast("nothing to undo");
});

for (const el of document.querySelectorAll("[data-mode]")) {
  el.addEventListener("click", () => setMode(el.getAttribute("data-mode") as EditMode));
}

// --- run control: UI state always follows the server's confirmed status

for (const cmd of ["start", "pause", "resume", "proceed"] as const) {
  document.getElementById(`btn-${cmd}`)!.addEventListener("click", async () => {
    try {
      await api.command(cmd);
    } catch (e) {
      if (e instanceof ApiError) toast(e.message);
      else throw e;
    }
  });
}

// --- live stream

subscribeEvents(`${base}/events`, {
  onEvent: (event, receivedAt) => {
    live = applyEvent(live, event, receivedAt);
    redraw();
  },
  onDisconnect: () => {
    live = markDisconnected(live);
    redraw();
  },
  onReconnect: async () => {
    // recover anything missed (fired triggers, pose) from the status snapshot
    live = applyEvent(live, { kind: "status", data: await api.runStatus() }, Date.now());
    redraw();
  },
});

setInterval(redraw, 1000); // keeps the staleness banner honest

setMode("inspect");
loadMapView().catch((e) => toast(`map: ${e.message}`));
loadScenario().catch((e) => toast(`scenario: ${e.message}`));
