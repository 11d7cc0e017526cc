/** The console invariant: everything drawn is traceable to server messages.
 *
 * This test renders purely from a recorded event stream (no API, no client
 * computation of trigger or visibility semantics) and inspects the recorded
 * draw calls: trigger markers change style exactly once, and agents are
 * dimmed exactly when the server said visible=false.
 */

import { readFileSync } from "node:fs";
import { join } from "node:path";
import { describe, expect, it } from "vitest";

import { drawScene, STYLE, type Ctx2D } from "../src/render.js";
import { applyEvent, initialLiveState, initialViewState } from "../src/state.js";
import type { ScenarioDoc, ServerEvent } from "../src/types.js";

const RECORDED: { event: ServerEvent; atMs: number }[] = JSON.parse(
  readFileSync(join(__dirname, "fixtures", "recorded_stream.json"), "utf-8"),
).map((event: ServerEvent, i: number) => ({ event, atMs: 1000 + i * 50 }));

const SCENARIO: ScenarioDoc = {
  portobello_scenario: 1,
  map_ref: "m.pmap",
  triggers: [
    { id: "t0", shape: { type: "box", center: [1.2, 0, 1], half_extents: [1, 4, 2] }, one_shot: true },
    { id: "t1", shape: { type: "box", center: [40, 0, 1], half_extents: [1, 4, 2] }, one_shot: true },
  ],
  agents: [],
  bindings: [],
  route: [
    { position: [0, 0, 0], target_speed: 5 },
    { position: [60, 0, 0], target_speed: 5 },
  ],
};

interface Op {
  op: string;
  fill: string;
  stroke: string;
}

function recordingCtx(): { ctx: Ctx2D; ops: Op[] } {
  const ops: Op[] = [];
  const ctx: Ctx2D = {
    canvas: { width: 800, height: 600 },
    fillStyle: "",
    strokeStyle: "",
    globalAlpha: 1,
    lineWidth: 1,
    font: "",
    fillRect: () => ops.push({ op: "fillRect", fill: String(ctx.fillStyle), stroke: String(ctx.strokeStyle) }),
    strokeRect: () => ops.push({ op: "strokeRect", fill: String(ctx.fillStyle), stroke: String(ctx.strokeStyle) }),
    beginPath: () => {},
    arc: () => ops.push({ op: "arc", fill: String(ctx.fillStyle), stroke: String(ctx.strokeStyle) }),
    moveTo: () => {},
    lineTo: () => {},
    fill: () => ops.push({ op: "fill", fill: String(ctx.fillStyle), stroke: String(ctx.strokeStyle) }),
    stroke: () => ops.push({ op: "stroke", fill: String(ctx.fillStyle), stroke: String(ctx.strokeStyle) }),
    save: () => {},
    restore: () => {},
    fillText: () => {},
  };
  return { ctx, ops };
}

describe("rendering from a recorded stream", () => {
  it("trigger style flips to fired exactly once, at the trigger event", () => {
    let state = initialLiveState();
    const view = { ...initialViewState(), centerX: 20, centerY: 0, scale: 6 };
    const transitions: number[] = [];
    let wasFired = false;

    for (const { event, atMs } of RECORDED) {
      state = applyEvent(state, event, atMs);
      const { ctx, ops } = recordingCtx();
      drawScene(ctx, view, [], SCENARIO, state);
      const firedRects = ops.filter((o) => o.op === "strokeRect" && o.stroke === STYLE.triggerFired);
      const firedNow = firedRects.length > 0;
      if (firedNow !== wasFired) transitions.push(atMs);
      wasFired = firedNow;
      // t1 never fired in the recording; exactly one trigger may show fired
      expect(firedRects.length).toBeLessThanOrEqual(1);
    }
    expect(transitions.length).toBe(1);
    // the flip happened when the trigger event arrived, not before
    const triggerAt = RECORDED.find(({ event }) => event.kind === "trigger")!.atMs;
    expect(transitions[0]).toBe(triggerAt);
  });

  it("agents are dimmed exactly per the server visibility flag", () => {
    let state = initialLiveState();
    for (const { event, atMs } of RECORDED) state = applyEvent(state, event, atMs);
    const { ctx, ops } = recordingCtx();
    drawScene(ctx, { ...initialViewState(), centerX: 20, scale: 6 }, [], SCENARIO, state);

    const agentFills = ops.filter(
      (o) => o.op === "fill" && (o.fill === STYLE.agentVisible || o.fill === STYLE.agentDimmed),
    );
    // near -> visible, far -> dimmed, hidden (inactive) -> not drawn at all
    expect(agentFills.filter((o) => o.fill === STYLE.agentVisible).length).toBe(1);
    expect(agentFills.filter((o) => o.fill === STYLE.agentDimmed).length).toBe(1);
  });

  it("duplicate trigger delivery leaves the receipt time of the first", () => {
    let state = initialLiveState();
    for (const { event, atMs } of RECORDED) state = applyEvent(state, event, atMs);
    const triggerReceipts = RECORDED.filter(({ event }) => event.kind === "trigger").map((r) => r.atMs);
    expect(triggerReceipts.length).toBe(2);
    expect(state.triggers.t0.firedAtMs).toBe(triggerReceipts[0]);
  });
});
