/** Top-down canvas rendering. Pure drawing: every style decision reads
 * server-provided state (visible flags, fired flags); nothing is recomputed
 * client-side.
 */

import type { LiveState, ViewState } from "./state.js";
import { worldToScreen } from "./state.js";
import type { ScenarioDoc } from "./types.js";

export interface Ctx2D {
  canvas: { width: number; height: number };
  fillStyle: string | CanvasGradient | CanvasPattern;
  strokeStyle: string | CanvasGradient | CanvasPattern;
  globalAlpha: number;
  lineWidth: number;
  fillRect(x: number, y: number, w: number, h: number): void;
  strokeRect(x: number, y: number, w: number, h: number): void;
  beginPath(): void;
  arc(x: number, y: number, r: number, a0: number, a1: number): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  fill(): void;
  stroke(): void;
  save(): void;
  restore(): void;
  font: string;
  fillText(text: string, x: number, y: number): void;
}

export const STYLE = {
  background: "#10141a",
  mapPoint: "#4a5a78",
  route: "#2f6f4f",
  stopWaypoint: "#57c486",
  triggerArmed: "#c9a227",
  triggerFired: "#e4572e",
  agentVisible: "#7dd0ff",
  agentDimmed: "rgba(125, 208, 255, 0.25)",
  vehicle: "#f2f2f2",
  selection: "#ffffff",
  invalid: "#ff5370",
};

export function drawScene(
  ctx: Ctx2D,
  view: ViewState,
  mapPoints: [number, number, number][],
  scenario: ScenarioDoc | null,
  live: LiveState,
  invalidEntities: Set<string> = new Set(),
): void {
  const w = ctx.canvas.width;
  const h = ctx.canvas.height;
  ctx.fillStyle = STYLE.background;
  ctx.fillRect(0, 0, w, h);

  ctx.fillStyle = STYLE.mapPoint;
  ctx.globalAlpha = 0.7;
  for (const [x, y] of mapPoints) {
    const [px, py] = worldToScreen(view, w, h, x, y);
    if (px < -2 || px > w + 2 || py < -2 || py > h + 2) continue;
    ctx.fillRect(px, py, 1.5, 1.5);
  }
  ctx.globalAlpha = 1;

  if (scenario) {
    drawRoute(ctx, view, scenario);
    drawTriggers(ctx, view, scenario, live, invalidEntities);
    drawStagedAgents(ctx, view, scenario, invalidEntities);
  }
  drawLiveAgents(ctx, view, live);
  drawVehicle(ctx, view, live);
}

function drawRoute(ctx: Ctx2D, view: ViewState, scenario: ScenarioDoc): void {
  const route = scenario.route ?? [];
  if (route.length === 0) return;
  const w = ctx.canvas.width;
  const h = ctx.canvas.height;
  ctx.strokeStyle = STYLE.route;
  ctx.lineWidth = 2;
  ctx.beginPath();
  route.forEach((wp, i) => {
    const [px, py] = worldToScreen(view, w, h, wp.position[0], wp.position[1]);
    if (i === 0) ctx.moveTo(px, py);
    else ctx.lineTo(px, py);
  });
  ctx.stroke();
  for (const wp of route) {
    if (!wp.stop) continue;
    const [px, py] = worldToScreen(view, w, h, wp.position[0], wp.position[1]);
    ctx.fillStyle = STYLE.stopWaypoint;
    ctx.beginPath();
    ctx.arc(px, py, 4, 0, Math.PI * 2);
    ctx.fill();
  }
}

function drawTriggers(
  ctx: Ctx2D,
  view: ViewState,
  scenario: ScenarioDoc,
  live: LiveState,
  invalid: Set<string>,
): void {
  const w = ctx.canvas.width;
  const h = ctx.canvas.height;
  for (const trig of scenario.triggers ?? []) {
    const fired = live.triggers[trig.id]?.fired ?? false;
    ctx.strokeStyle = invalid.has(trig.id)
      ? STYLE.invalid
      : fired
        ? STYLE.triggerFired
        : STYLE.triggerArmed;
    ctx.lineWidth = fired ? 3 : 1.5;
    if (trig.shape.type === "box") {
      const [cx, cy] = trig.shape.center;
      const [hx, hy] = trig.shape.half_extents;
      const [x0, y0] = worldToScreen(view, w, h, cx - hx, cy + hy);
      const [x1, y1] = worldToScreen(view, w, h, cx + hx, cy - hy);
      ctx.strokeRect(x0, y0, x1 - x0, y1 - y0);
    } else {
      const [cx, cy] = trig.shape.center;
      const [px, py] = worldToScreen(view, w, h, cx, cy);
      ctx.beginPath();
      ctx.arc(px, py, trig.shape.radius * view.scale, 0, Math.PI * 2);
      ctx.stroke();
    }
    if (view.selected === trig.id) drawSelection(ctx, view, trig.shape.center[0], trig.shape.center[1]);
  }
}

function drawStagedAgents(ctx: Ctx2D, view: ViewState, scenario: ScenarioDoc, invalid: Set<string>): void {
  const w = ctx.canvas.width;
  const h = ctx.canvas.height;
  for (const agent of scenario.agents ?? []) {
    const [x, y] = agent.initial_pose.position;
    const [px, py] = worldToScreen(view, w, h, x, y);
    ctx.strokeStyle = invalid.has(agent.id) ? STYLE.invalid : STYLE.agentVisible;
    ctx.lineWidth = 1;
    ctx.strokeRect(px - 3, py - 3, 6, 6);
    if (agent.path.length > 0) {
      ctx.beginPath();
      ctx.moveTo(px, py);
      for (const leg of agent.path) {
        const [lx, ly] = worldToScreen(view, w, h, leg.waypoint[0], leg.waypoint[1]);
        ctx.lineTo(lx, ly);
      }
      ctx.stroke();
    }
    if (view.selected === agent.id) drawSelection(ctx, view, x, y);
  }
}

function drawLiveAgents(ctx: Ctx2D, view: ViewState, live: LiveState): void {
  const w = ctx.canvas.width;
  const h = ctx.canvas.height;
  for (const [, agent] of Object.entries(live.agents)) {
    if (!agent.active) continue;
    // dim beyond the render cap exactly as the server decided
    ctx.fillStyle = agent.visible ? STYLE.agentVisible : STYLE.agentDimmed;
    const [px, py] = worldToScreen(view, w, h, agent.pos[0], agent.pos[1]);
    ctx.beginPath();
    ctx.arc(px, py, 5, 0, Math.PI * 2);
    ctx.fill();
  }
}

function drawVehicle(ctx: Ctx2D, view: ViewState, live: LiveState): void {
  if (!live.vehicle) return;
  const w = ctx.canvas.width;
  const h = ctx.canvas.height;
  const [x, y] = [live.vehicle.t[0], live.vehicle.t[1]];
  const yaw = yawOf(live.vehicle.q);
  const [px, py] = worldToScreen(view, w, h, x, y);
  ctx.save();
  ctx.fillStyle = STYLE.vehicle;
  ctx.beginPath();
  const s = Math.max(6, view.scale * 1.2);
  ctx.moveTo(px + s * Math.cos(-yaw), py + s * Math.sin(-yaw));
  ctx.lineTo(px + (s * 0.6) * Math.cos(-yaw + 2.5), py + (s * 0.6) * Math.sin(-yaw + 2.5));
  ctx.lineTo(px + (s * 0.6) * Math.cos(-yaw - 2.5), py + (s * 0.6) * Math.sin(-yaw - 2.5));
  ctx.fill();
  ctx.restore();
}

function drawSelection(ctx: Ctx2D, view: ViewState, x: number, y: number): void {
  const w = ctx.canvas.width;
  const h = ctx.canvas.height;
  const [px, py] = worldToScreen(view, w, h, x, y);
  ctx.strokeStyle = STYLE.selection;
  ctx.lineWidth = 1;
  ctx.beginPath();
  ctx.arc(px, py, 10, 0, Math.PI * 2);
  ctx.stroke();
}

export function yawOf(q: [number, number, number, number]): number {
  const [qw, qx, qy, qz] = q;
  return Math.atan2(2 * (qw * qz + qx * qy), 1 - 2 * (qy * qy + qz * qz));
}
