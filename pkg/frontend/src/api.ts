// Typed client for the simulation service. The UI never computes
// probabilities or costs itself; everything rendered comes back through
// these response types.

// One row per (tracked condition, time bucket).
export interface EventProbRow {
  predicate: string;
  bucket: number;
  bucket_days: number;
  p: number;
}

export interface AnyTimeRow {
  predicate: string;
  p: number;
}

export interface BundleResponse {
  seed: number;
  horizon_days: number;
  n_futures: number;
  n_futures_completed: number;
  predicted_cost: number;
  cost_std_error: number;
  event_probs: EventProbRow[];
  any_time: AnyTimeRow[];
  futures?: string[][];
}

export interface DeltaRow {
  predicate: string;
  p_base: number;
  p_intervened: number;
  delta: number;
  std_error: number;
}

export interface InterveneResponse {
  seed: number;
  base: BundleResponse;
  intervened: BundleResponse;
  deltas: DeltaRow[];
}

export interface HistoryEvent {
  date: string;
  system: string;
  code: string;
  paid?: number | null;
}

export interface HistorySpec {
  age: number;
  sex: string;
  events: HistoryEvent[];
}

export interface SimulateKnobs {
  n_futures?: number;
  horizon_days?: number;
  temperature?: number;
  top_k?: number;
  seed?: number;
}

export interface VocabSummary {
  size: number;
  kinds: Record<string, number>;
  cost_edges: number[];
  gap_buckets: { lo: number; hi: number | null; name: string }[];
  surfaces: string[];
}

export interface HealthResponse {
  status: string;
  model_config: Record<string, unknown>;
  vocab_size: number;
  defaults: SimulateKnobs;
}

export class ServiceError extends Error {
  constructor(public status: number, detail: string) {
    super(detail);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ServiceClient {
  constructor(
    private baseUrl: string = "",
    private fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async post<T>(path: string, body: unknown): Promise<T> {
    const resp = await this.fetchImpl(this.baseUrl + path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!resp.ok) {
      let detail = `${resp.status}`;
      try {
        const parsed = await resp.json();
        if (parsed && typeof parsed.detail === "string") detail = parsed.detail;
      } catch {
        // keep the bare status
      }
      throw new ServiceError(resp.status, detail);
    }
    return (await resp.json()) as T;
  }

  private async get<T>(path: string): Promise<T> {
    const resp = await this.fetchImpl(this.baseUrl + path);
    if (!resp.ok) throw new ServiceError(resp.status, `${resp.status}`);
    return (await resp.json()) as T;
  }

  simulate(history: HistorySpec | string[], knobs: SimulateKnobs = {}): Promise<BundleResponse> {
    return this.post<BundleResponse>("/v1/simulate", { history, ...knobs });
  }

  intervene(
    history: HistorySpec | string[],
    intervention: { system: string; code: string; paid?: number },
    knobs: SimulateKnobs = {},
  ): Promise<InterveneResponse> {
    return this.post<InterveneResponse>("/v1/intervene", {
      history,
      intervention,
      simulate: knobs,
    });
  }

  vocab(): Promise<VocabSummary> {
    return this.get<VocabSummary>("/v1/vocab");
  }

  health(): Promise<HealthResponse> {
    return this.get<HealthResponse>("/v1/health");
  }
}
