// SVG geometry for probability-over-time curves. Pure functions: callers
// hand in the service's per-bucket probabilities, this module only maps
// them to coordinates.

export interface ChartLayout {
  width: number;
  height: number;
  padLeft: number;
  padBottom: number;
  padTop: number;
  padRight: number;
}

export const DEFAULT_LAYOUT: ChartLayout = {
  width: 560,
  height: 260,
  padLeft: 42,
  padBottom: 28,
  padTop: 10,
  padRight: 12,
};

export interface CurveGeometry {
  path: string;          // SVG path for the probability polyline
  band: string;          // SVG polygon points for +-band (empty if none)
  points: { x: number; y: number }[];
}

export function xScale(layout: ChartLayout, nBuckets: number) {
  const span = layout.width - layout.padLeft - layout.padRight;
  const step = nBuckets > 1 ? span / (nBuckets - 1) : 0;
  return (bucket: number) => layout.padLeft + bucket * step;
}

export function yScale(layout: ChartLayout, yMax: number) {
  const span = layout.height - layout.padTop - layout.padBottom;
  const top = yMax <= 0 ? 1 : yMax;
  return (p: number) => layout.padTop + span * (1 - p / top);
}

export function curveGeometry(
  probs: number[],
  layout: ChartLayout = DEFAULT_LAYOUT,
  yMax = 1,
  band?: number[],
): CurveGeometry {
  const sx = xScale(layout, probs.length);
  const sy = yScale(layout, yMax);
  const points = probs.map((p, i) => ({ x: sx(i), y: sy(p) }));
  const path = points
    .map((pt, i) => `${i === 0 ? "M" : "L"}${pt.x.toFixed(2)},${pt.y.toFixed(2)}`)
    .join(" ");
  let bandPoints = "";
  if (band && band.length === probs.length) {
    const upper = probs.map((p, i) => ({ x: sx(i), y: sy(Math.min(yMax, p + band[i])) }));
    const lower = probs.map((p, i) => ({ x: sx(i), y: sy(Math.max(0, p - band[i])) }));
    bandPoints = [...upper, ...lower.reverse()]
      .map((pt) => `${pt.x.toFixed(2)},${pt.y.toFixed(2)}`)
      .join(" ");
  }
  return { path, band: bandPoints, points };
}

export function axisTicks(nBuckets: number, bucketDays: number, every = 3): {
  bucket: number;
  label: string;
}[] {
  const ticks = [];
  for (let b = 0; b < nBuckets; b += every) {
    ticks.push({ bucket: b, label: `${b * bucketDays}d` });
  }
  return ticks;
}

// Shared y-max across series so the comparison is on one scale.
export function sharedYMax(allProbs: number[][]): number {
  let max = 0;
  for (const probs of allProbs) for (const p of probs) if (p > max) max = p;
  return max === 0 ? 1 : Math.min(1, max * 1.15);
}

export const SERIES_COLORS = [
  "#3b6ea5", "#b5543b", "#4a8c5c", "#8458a8", "#a08030", "#567d8e",
];
