/** Wire shapes of the backend HTTP + event-stream API (see API.md). */

export interface PoseJson {
  q: [number, number, number, number];
  t: [number, number, number];
}

export interface ShapeBox {
  type: "box";
  center: [number, number, number];
  half_extents: [number, number, number];
}

export interface ShapeCylinder {
  type: "cylinder";
  center: [number, number, number];
  radius: number;
  height: number;
}

export interface AgentDoc {
  id: string;
  kind: "pedestrian" | "prop";
  initial_pose: { position: [number, number, number]; orientation?: [number, number, number, number] };
  path: { waypoint: [number, number, number]; speed: number }[];
  initially_active: boolean;
}

export interface TriggerDoc {
  id: string;
  shape: ShapeBox | ShapeCylinder;
  one_shot: boolean;
}

export interface BindingDoc {
  trigger_id: string;
  actions: Record<string, unknown>[];
}

export interface RouteWaypointDoc {
  position: [number, number, number];
  target_speed: number;
  stop?: boolean;
}

export interface ScenarioDoc {
  portobello_scenario: number;
  map_ref: string;
  render_distance?: number;
  agents?: AgentDoc[];
  triggers?: TriggerDoc[];
  bindings?: BindingDoc[];
  route?: RouteWaypointDoc[];
  map_hash?: string;
}

export interface ValidationIssue {
  severity: "error" | "warning";
  code: string;
  entity: string;
  message: string;
}

export interface MapMeta {
  count: number;
  voxel: number;
  source_count?: number;
}

export interface MapBody extends MapMeta {
  points: [number, number, number][];
}

export type RunStatusName =
  | "idle"
  | "running"
  | "paused"
  | "holding-at-stop"
  | "finished"
  | "failed"
  | "stopped";

export interface AgentLive {
  pos: [number, number, number];
  yaw: number;
  active: boolean;
  visible: boolean;
}

export interface RunStatus {
  status: RunStatusName;
  t?: number;
  pose?: PoseJson;
  speed?: number;
  agents?: Record<string, AgentLive>;
  fired?: string[];
  events?: { id: string; t: number; pose: PoseJson }[];
  armed?: Record<string, boolean>;
  error?: string | null;
}

export type ServerEvent =
  | { kind: "status"; data: RunStatus }
  | { kind: "pose"; data: { t: number; pose: PoseJson } }
  | { kind: "agents"; data: { t: number; agents: Record<string, AgentLive> } }
  | { kind: "trigger"; data: { id: string; t: number; pose: PoseJson } }
  | { kind: "heartbeat"; data: { t: number | null; status: RunStatusName } };
