/** Thin HTTP client for the console backend. */

import type { MapBody, MapMeta, RunStatus, ScenarioDoc, ValidationIssue } from "./types.js";

export class ApiError extends Error {
  constructor(
    message: string,
    public status: number,
    public issues: ValidationIssue[] = [],
  ) {
    super(message);
  }
}

export class ApiClient {
  constructor(public base: string, private fetchImpl: typeof fetch = fetch) {}

  private async request(path: string, init?: RequestInit): Promise<Response> {
    const r = await this.fetchImpl(`${this.base}${path}`, init);
    if (!r.ok) {
      let message = `${init?.method ?? "GET"} ${path}: ${r.status}`;
      let issues: ValidationIssue[] = [];
      try {
        const body = await r.json();
        if (body.error) message = body.error;
        if (body.detail) message = body.detail;
        if (body.issues) issues = body.issues;
      } catch {
        /* non-JSON error body */
      }
      throw new ApiError(message, r.status, issues);
    }
    return r;
  }

  async mapMeta(): Promise<MapMeta> {
    return (await this.request("/map?meta=1")).json();
  }

  async map(): Promise<MapBody> {
    return (await this.request("/map")).json();
  }

  async scenario(): Promise<ScenarioDoc> {
    return (await this.request("/scenario")).json();
  }

  /** Returns server warnings; throws ApiError with issues on rejection. */
  async putScenario(doc: ScenarioDoc): Promise<ValidationIssue[]> {
    const r = await this.request("/scenario", {
      method: "PUT",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(doc),
    });
    const body = await r.json();
    return body.issues ?? [];
  }

  async runStatus(): Promise<RunStatus> {
    return (await this.request("/run")).json();
  }

  async command(command: "start" | "pause" | "resume" | "proceed" | "stop"): Promise<RunStatus["status"]> {
    const r = await this.request("/run", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ command }),
    });
    return (await r.json()).status;
  }
}
