// Metrics panel: one inline SVG line chart per metric name, drawn straight
// from the time series the API returned.

import type { Metric } from "../api";
import { el } from "../dom";

const WIDTH = 480;
const HEIGHT = 120;
const PAD = 8;

function polyline(points: Metric[]): string {
  const ts = points.map((p) => p.ts);
  const vs = points.map((p) => p.value);
  const t0 = Math.min(...ts);
  const t1 = Math.max(...ts);
  const v0 = Math.min(...vs);
  const v1 = Math.max(...vs);
  const sx = (t: number) => (t1 === t0 ? WIDTH / 2 : PAD + ((t - t0) / (t1 - t0)) * (WIDTH - 2 * PAD));
  const sy = (v: number) => (v1 === v0 ? HEIGHT / 2 : HEIGHT - PAD - ((v - v0) / (v1 - v0)) * (HEIGHT - 2 * PAD));
  return points.map((p) => `${sx(p.ts).toFixed(1)},${sy(p.value).toFixed(1)}`).join(" ");
}

export function renderMetrics(metrics: Metric[]): HTMLElement {
  const byName = new Map<string, Metric[]>();
  for (const metric of metrics) {
    const series = byName.get(metric.name) ?? [];
    series.push(metric);
    byName.set(metric.name, series);
  }
  const section = el("section.metrics", {}, el("h3", {}, `metrics (${byName.size} series)`));
  for (const [name, series] of byName) {
    series.sort((a, b) => a.ts - b.ts);
    const chart = el("figure.metric-chart", { dataset: { metric: name } });
    const svg = document.createElementNS("http://www.w3.org/2000/svg", "svg");
    svg.setAttribute("viewBox", `0 0 ${WIDTH} ${HEIGHT}`);
    svg.setAttribute("width", String(WIDTH));
    svg.setAttribute("height", String(HEIGHT));
    const line = document.createElementNS("http://www.w3.org/2000/svg", "polyline");
    line.setAttribute("points", polyline(series));
    line.setAttribute("fill", "none");
    line.setAttribute("stroke", "currentColor");
    line.setAttribute("stroke-width", "1.5");
    svg.append(line);
    chart.append(svg, el("figcaption", {}, `${name} (${series.length} points)`));
    section.append(chart);
  }
  return section;
}
