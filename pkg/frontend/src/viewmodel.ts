// Response -> display mapping. Numbers are echoed from the service JSON
// verbatim (String(n)); this module regroups rows but never derives a
// probability or cost.

import type { BundleResponse, DeltaRow, InterveneResponse } from "./api.js";

// Exact textual echo of a JSON number.
export const echo = (n: number): string => String(n);

export interface CostSummary {
  predicted: string;
  stdError: string;
  nFutures: string;
  completed: string;
  seed: string;
}

export function costSummary(bundle: BundleResponse): CostSummary {
  return {
    predicted: echo(bundle.predicted_cost),
    stdError: echo(bundle.cost_std_error),
    nFutures: echo(bundle.n_futures),
    completed: echo(bundle.n_futures_completed),
    seed: echo(bundle.seed),
  };
}

export interface DeltaDisplayRow {
  name: string;
  pBase: string;
  pIntervened: string;
  delta: string;
  stdError: string;
  significant: boolean; // |delta| > 1.96 * SE, display hint only
}

export function deltaTable(deltas: DeltaRow[]): DeltaDisplayRow[] {
  return deltas.map((d) => ({
    name: d.predicate,
    pBase: echo(d.p_base),
    pIntervened: echo(d.p_intervened),
    delta: echo(d.delta),
    stdError: echo(d.std_error),
    significant: Math.abs(d.delta) > 1.96 * d.std_error,
  }));
}

export function trackedConditions(bundle: BundleResponse): string[] {
  return bundle.any_time.map((r) => r.predicate);
}

export interface ConditionTable {
  probs: number[]; // service p values ordered by bucket index
  bucketDays: number;
  anyTime: number;
}

export function tableFor(
  bundle: BundleResponse,
  condition: string,
): ConditionTable | null {
  const rows = bundle.event_probs
    .filter((r) => r.predicate === condition)
    .sort((a, b) => a.bucket - b.bucket);
  const any = bundle.any_time.find((r) => r.predicate === condition);
  if (!rows.length || !any) return null;
  return {
    probs: rows.map((r) => r.p),
    bucketDays: rows[0].bucket_days,
    anyTime: any.p,
  };
}

export interface CurveSeries {
  label: string;
  probs: number[]; // service values passed straight to the chart
  bucketDays: number;
  anyTime: string; // echoed
}

export function curvesFor(
  arms: { label: string; bundle: BundleResponse }[],
  condition: string,
): { series: CurveSeries[]; horizonMismatch: boolean } {
  const series: CurveSeries[] = [];
  let mismatch = false;
  let buckets: number | null = null;
  for (const arm of arms) {
    const table = tableFor(arm.bundle, condition);
    if (!table) continue;
    if (buckets === null) buckets = table.probs.length;
    else if (buckets !== table.probs.length) mismatch = true;
    series.push({
      label: arm.label,
      probs: table.probs,
      bucketDays: table.bucketDays,
      anyTime: echo(table.anyTime),
    });
  }
  if (mismatch) {
    const common = Math.min(...series.map((s) => s.probs.length));
    for (const s of series) s.probs = s.probs.slice(0, common);
  }
  return { series, horizonMismatch: mismatch };
}

export function comparisonArms(
  result: InterveneResponse,
  scenarioLabel: string,
): { label: string; bundle: BundleResponse }[] {
  return [
    { label: `${scenarioLabel} - base`, bundle: result.base },
    { label: `${scenarioLabel} - intervened`, bundle: result.intervened },
  ];
}
