/** Pure state containers updated only from server messages.
 *
 * The console never computes trigger or visibility semantics itself: trigger
 * fired/armed flags and agent visibility come verbatim from server events,
 * so every displayed state is traceable to a message.
 */

import type { AgentLive, PoseJson, RunStatusName, ServerEvent } from "./types.js";

export interface TriggerLive {
  fired: boolean;
  firedAtMs: number | null; // receipt clock, for style-change latency checks
}

export interface LiveState {
  status: RunStatusName;
  vehicle: PoseJson | null;
  stamp: number | null;
  speed: number | null;
  agents: Record<string, AgentLive>;
  triggers: Record<string, TriggerLive>;
  firedOrder: string[];
  lastHeartbeatMs: number | null;
  connected: boolean;
  error: string | null;
}

export function initialLiveState(): LiveState {
  return {
    status: "idle",
    vehicle: null,
    stamp: null,
    speed: null,
    agents: {},
    triggers: {},
    firedOrder: [],
    lastHeartbeatMs: null,
    connected: false,
    error: null,
  };
}

/** Apply one server event; `nowMs` is the receipt clock (injectable for tests). */
export function applyEvent(state: LiveState, event: ServerEvent, nowMs: number): LiveState {
  const next = { ...state, connected: true, lastHeartbeatMs: nowMs };
  switch (event.kind) {
    case "status": {
      const s = event.data;
      next.status = s.status;
      next.error = s.error ?? null;
      if (s.pose) next.vehicle = s.pose;
      if (s.t !== undefined) next.stamp = s.t;
      if (s.speed !== undefined) next.speed = s.speed;
      if (s.agents) next.agents = s.agents;
      if (s.armed) {
        // resync snapshot: rebuild trigger table from authoritative armed map
        const triggers: Record<string, TriggerLive> = {};
        for (const [id, armed] of Object.entries(s.armed)) {
          const wasFired = state.triggers[id]?.fired ?? false;
          triggers[id] = {
            fired: !armed || wasFired,
            firedAtMs: state.triggers[id]?.firedAtMs ?? (!armed ? nowMs : null),
          };
        }
        next.triggers = triggers;
      }
      if (s.fired) {
        next.firedOrder = [...s.fired];
        for (const id of s.fired) {
          const prev = next.triggers[id];
          next.triggers = {
            ...next.triggers,
            [id]: { fired: true, firedAtMs: prev?.firedAtMs ?? nowMs },
          };
        }
      }
      return next;
    }
    case "pose":
      next.vehicle = event.data.pose;
      next.stamp = event.data.t;
      return next;
    case "agents":
      next.agents = event.data.agents;
      next.stamp = event.data.t;
      return next;
    case "trigger": {
      const id = event.data.id;
      const prev = state.triggers[id];
      if (prev?.fired) return next; // style change happens exactly once
      next.triggers = { ...state.triggers, [id]: { fired: true, firedAtMs: nowMs } };
      next.firedOrder = [...state.firedOrder, id];
      return next;
    }
    case "heartbeat":
      if (event.data.status) next.status = event.data.status;
      return next;
  }
}

export const STALE_HEARTBEAT_MS = 2000;

/** A stale stream (no message in 2 s) shows the disconnected banner. */
export function isStale(state: LiveState, nowMs: number): boolean {
  if (!state.connected || state.lastHeartbeatMs === null) return true;
  return nowMs - state.lastHeartbeatMs > STALE_HEARTBEAT_MS;
}

export function markDisconnected(state: LiveState): LiveState {
  return { ...state, connected: false };
}

// ---------------------------------------------------------------------------
// view state: top-down camera + editing mode

export type EditMode = "inspect" | "place-trigger" | "place-agent" | "place-waypoint";

export interface ViewState {
  centerX: number; // world meters at canvas center
  centerY: number;
  scale: number; // pixels per meter
  mode: EditMode;
  selected: string | null;
}

export function initialViewState(): ViewState {
  return { centerX: 0, centerY: 0, scale: 4, mode: "inspect", selected: null };
}

export function worldToScreen(v: ViewState, w: number, h: number, x: number, y: number): [number, number] {
  // +y world is up on screen
  return [w / 2 + (x - v.centerX) * v.scale, h / 2 - (y - v.centerY) * v.scale];
}

export function screenToWorld(v: ViewState, w: number, h: number, px: number, py: number): [number, number] {
  return [v.centerX + (px - w / 2) / v.scale, v.centerY - (py - h / 2) / v.scale];
}

export function pan(v: ViewState, dxPx: number, dyPx: number): ViewState {
  return { ...v, centerX: v.centerX - dxPx / v.scale, centerY: v.centerY + dyPx / v.scale };
}

/** Zoom about a screen anchor so the world point under the cursor stays put. */
export function zoom(v: ViewState, w: number, h: number, px: number, py: number, factor: number): ViewState {
  const [wx, wy] = screenToWorld(v, w, h, px, py);
  const scale = Math.min(200, Math.max(0.5, v.scale * factor));
  const centerX = wx - (px - w / 2) / scale;
  const centerY = wy + (py - h / 2) / scale;
  return { ...v, scale, centerX, centerY };
}

export function fitView(v: ViewState, w: number, h: number, points: [number, number, number][]): ViewState {
  if (points.length === 0) return v;
  let minX = Infinity, maxX = -Infinity, minY = Infinity, maxY = -Infinity;
  for (const [x, y] of points) {
    if (x < minX) minX = x;
    if (x > maxX) maxX = x;
    if (y < minY) minY = y;
    if (y > maxY) maxY = y;
  }
  const spanX = Math.max(maxX - minX, 1);
  const spanY = Math.max(maxY - minY, 1);
  const scale = Math.min(w / (spanX * 1.1), h / (spanY * 1.1));
  return { ...v, centerX: (minX + maxX) / 2, centerY: (minY + maxY) / 2, scale };
}
