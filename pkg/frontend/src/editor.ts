/** Staging edits: pure scenario-document transforms plus an undo stack.
 *
 * Placement writes the dropped map coordinates into the document verbatim;
 * the server is the validator of record and its per-entity issues are
 * attached back for inline display.
 */

import type { ScenarioDoc, ValidationIssue } from "./types.js";

export type PlaceKind = "trigger" | "agent" | "waypoint";

function clone<T>(doc: T): T {
  return JSON.parse(JSON.stringify(doc));
}

function freshId(prefix: string, taken: Set<string>): string {
  for (let i = 0; ; i++) {
    const id = `${prefix}${String(i).padStart(2, "0")}`;
    if (!taken.has(id)) return id;
  }
}

export interface Placement {
  doc: ScenarioDoc;
  entityId: string; // trigger/agent id, or "route[i]" for waypoints
}

export function placeEntity(doc: ScenarioDoc, kind: PlaceKind, x: number, y: number, z = 0): Placement {
  const next = clone(doc);
  if (kind === "trigger") {
    next.triggers = next.triggers ?? [];
    const id = freshId("trigger", new Set(next.triggers.map((t) => t.id)));
    next.triggers.push({
      id,
      shape: { type: "box", center: [x, y, z], half_extents: [1.5, 4.0, 2.0] },
      one_shot: true,
    });
    return { doc: next, entityId: id };
  }
  if (kind === "agent") {
    next.agents = next.agents ?? [];
    const id = freshId("agent", new Set(next.agents.map((a) => a.id)));
    next.agents.push({
      id,
      kind: "pedestrian",
      initial_pose: { position: [x, y, z] },
      path: [],
      initially_active: false,
    });
    return { doc: next, entityId: id };
  }
  next.route = next.route ?? [];
  next.route.push({ position: [x, y, z], target_speed: 5.0, stop: false });
  return { doc: next, entityId: `route[${next.route.length - 1}]` };
}

export function moveEntity(doc: ScenarioDoc, entityId: string, x: number, y: number): ScenarioDoc {
  const next = clone(doc);
  const trig = next.triggers?.find((t) => t.id === entityId);
  if (trig) {
    trig.shape.center = [x, y, trig.shape.center[2]];
    return next;
  }
  const agent = next.agents?.find((a) => a.id === entityId);
  if (agent) {
    agent.initial_pose.position = [x, y, agent.initial_pose.position[2]];
    return next;
  }
  const m = entityId.match(/^route\[(\d+)\]$/);
  if (m && next.route?.[Number(m[1])]) {
    const wp = next.route[Number(m[1])];
    wp.position = [x, y, wp.position[2]];
    return next;
  }
  return next;
}

export function removeEntity(doc: ScenarioDoc, entityId: string): ScenarioDoc {
  const next = clone(doc);
  next.triggers = next.triggers?.filter((t) => t.id !== entityId);
  next.agents = next.agents?.filter((a) => a.id !== entityId);
  next.bindings = next.bindings?.filter((b) => {
    if (b.trigger_id === entityId) return false;
    return !b.actions.some((a) => (a as { agent_id?: string }).agent_id === entityId);
  });
  const m = entityId.match(/^route\[(\d+)\]$/);
  if (m) next.route = next.route?.filter((_, i) => i !== Number(m[1]));
  return next;
}

/** Undo stack over scenario documents; snapshots are taken before each edit. */
export class EditHistory {
  private stack: ScenarioDoc[] = [];

  constructor(private limit = 50) {}

  push(doc: ScenarioDoc): void {
    this.stack.push(clone(doc));
    if (this.stack.length > this.limit) this.stack.shift();
  }

  undo(): ScenarioDoc | null {
    return this.stack.pop() ?? null;
  }

  get depth(): number {
    return this.stack.length;
  }
}

/** Group server validation issues by the entity they blame. */
export function issuesByEntity(issues: ValidationIssue[]): Map<string, ValidationIssue[]> {
  const out = new Map<string, ValidationIssue[]>();
  for (const issue of issues) {
    // entities arrive as "agent:ped00", "trigger:crosswalk01", "route[3]"
    const name = issue.entity.includes(":") ? issue.entity.split(":")[1].split(".")[0] : issue.entity;
    const list = out.get(name) ?? [];
    list.push(issue);
    out.set(name, list);
  }
  return out;
}
