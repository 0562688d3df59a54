// Scenario store: the editable patient histories, their interventions, and
// the last service results. Enforces one in-flight request per scenario and
// drops stale responses by request id.

import type { BundleResponse, DeltaRow, HistoryEvent } from "./api.js";

export type Sex = "F" | "M" | "U";

// Simulation output attached to a scenario: plain /v1/simulate fills only
// `base`; /v1/intervene fills both arms plus the delta table.
export interface ScenarioResult {
  seed: number;
  base: BundleResponse;
  intervened: BundleResponse | null;
  deltas: DeltaRow[];
}

export interface Scenario {
  id: number;
  label: string;
  age: number;
  sex: Sex;
  events: HistoryEvent[];
  intervention: HistoryEvent | null;
  result: ScenarioResult | null;
  pendingRequest: number | null;
  lastSeed: number | null;
  error: string | null;
}

export interface SessionExport {
  version: 1;
  scenarios: {
    label: string;
    age: number;
    sex: Sex;
    events: HistoryEvent[];
    intervention: HistoryEvent | null;
    lastSeed: number | null;
  }[];
}

const byDate = (a: HistoryEvent, b: HistoryEvent) =>
  a.date < b.date ? -1 : a.date > b.date ? 1 : 0;

export class ScenarioStore {
  scenarios: Scenario[] = [];
  private nextScenarioId = 1;
  private nextRequestId = 1;

  addScenario(label?: string): Scenario {
    const s: Scenario = {
      id: this.nextScenarioId++,
      label: label ?? `Scenario ${this.nextScenarioId - 1}`,
      age: 70,
      sex: "F",
      events: [],
      intervention: null,
      result: null,
      pendingRequest: null,
      lastSeed: null,
      error: null,
    };
    this.scenarios.push(s);
    return s;
  }

  duplicateScenario(id: number): Scenario | null {
    const src = this.get(id);
    if (!src) return null;
    const copy = this.addScenario(`${src.label} (copy)`);
    copy.age = src.age;
    copy.sex = src.sex;
    copy.events = src.events.map((e) => ({ ...e }));
    copy.intervention = src.intervention ? { ...src.intervention } : null;
    return copy;
  }

  removeScenario(id: number): void {
    this.scenarios = this.scenarios.filter((s) => s.id !== id);
  }

  get(id: number): Scenario | null {
    return this.scenarios.find((s) => s.id === id) ?? null;
  }

  setDemographics(id: number, age: number, sex: Sex): void {
    const s = this.must(id);
    s.age = age;
    s.sex = sex;
    this.invalidate(s);
  }

  addEvent(id: number, event: HistoryEvent): void {
    const s = this.must(id);
    s.events = [...s.events, { ...event }].sort(byDate);
    this.invalidate(s);
  }

  removeEvent(id: number, index: number): void {
    const s = this.must(id);
    s.events = s.events.filter((_, i) => i !== index);
    this.invalidate(s);
  }

  setIntervention(id: number, event: HistoryEvent | null): void {
    const s = this.must(id);
    s.intervention = event ? { ...event } : null;
    this.invalidate(s);
  }

  setLabel(id: number, label: string): void {
    this.must(id).label = label;
  }

  // One request per scenario at a time: returns a request id, or null if a
  // request is already pending.
  beginRequest(id: number): number | null {
    const s = this.must(id);
    if (s.pendingRequest !== null) return null;
    s.pendingRequest = this.nextRequestId++;
    s.error = null;
    return s.pendingRequest;
  }

  // False when the response is stale (superseded or scenario edited).
  applyResult(id: number, requestId: number, result: ScenarioResult): boolean {
    const s = this.get(id);
    if (!s || s.pendingRequest !== requestId) return false;
    s.result = result;
    s.lastSeed = result.seed;
    s.pendingRequest = null;
    return true;
  }

  applyError(id: number, requestId: number, message: string): boolean {
    const s = this.get(id);
    if (!s || s.pendingRequest !== requestId) return false;
    s.error = message;
    s.pendingRequest = null;
    return true;
  }

  completedScenarios(): Scenario[] {
    return this.scenarios.filter((s) => s.result !== null);
  }

  exportSession(): string {
    const body: SessionExport = {
      version: 1,
      scenarios: this.scenarios.map((s) => ({
        label: s.label,
        age: s.age,
        sex: s.sex,
        events: s.events.map((e) => ({ ...e })),
        intervention: s.intervention ? { ...s.intervention } : null,
        lastSeed: s.lastSeed,
      })),
    };
    return JSON.stringify(body, null, 2);
  }

  importSession(json: string): void {
    const body = JSON.parse(json) as SessionExport;
    if (body.version !== 1 || !Array.isArray(body.scenarios)) {
      throw new Error("unrecognized session export");
    }
    this.scenarios = [];
    for (const raw of body.scenarios) {
      const s = this.addScenario(raw.label);
      s.age = raw.age;
      s.sex = raw.sex;
      s.events = raw.events.map((e) => ({ ...e })).sort(byDate);
      s.intervention = raw.intervention ? { ...raw.intervention } : null;
      s.lastSeed = raw.lastSeed;
    }
  }

  private must(id: number): Scenario {
    const s = this.get(id);
    if (!s) throw new Error(`no scenario ${id}`);
    return s;
  }

  private invalidate(s: Scenario): void {
    // Edits orphan any in-flight request; its response must not land.
    s.pendingRequest = null;
    s.result = null;
  }
}
