/** Pure-string SVG builders: fixed style, no timestamps, deterministic. */

import { Table, column, requireColumns } from "./csv.js";

const PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

export interface ScatterOptions {
  /** |Spearman| annotations indexed [estimated][true], from eval.json. */
  annotations?: number[][];
  panelSize?: number;
  maxPointsPerPanel?: number;
}

function fmt(v: number): string {
  if (!Number.isFinite(v)) return "0";
  return Number(v.toFixed(2)).toString();
}

function extent(values: number[]): [number, number] {
  let lo = Infinity;
  let hi = -Infinity;
  for (const v of values) {
    if (v < lo) lo = v;
    if (v > hi) hi = v;
  }
  if (!Number.isFinite(lo) || lo === hi) {
    return [lo - 1, hi + 1];
  }
  return [lo, hi];
}

function scale(v: number, [lo, hi]: [number, number], a: number, b: number): number {
  return a + ((v - lo) / (hi - lo)) * (b - a);
}

/**
 * n-by-n scatter matrix from the long-format export: panel (i, j) plots the
 * estimated component i against the true component j, with an optional
 * rank-correlation annotation per panel.
 */
export function scatterMatrixSvg(table: Table, opts: ScatterOptions = {}): string {
  requireColumns(table, ["i", "j", "zhat_value", "z_value"]);
  const iCol = column(table, "i");
  const jCol = column(table, "j");
  const zhat = column(table, "zhat_value");
  const z = column(table, "z_value");
  const n = Math.max(...iCol);
  const size = opts.panelSize ?? 190;
  const pad = 46;
  const gap = 12;
  const W = pad + n * (size + gap);
  const H = pad + n * (size + gap);
  const cap = opts.maxPointsPerPanel ?? 1200;

  const panels: Map<string, [number, number][]> = new Map();
  for (let k = 0; k < iCol.length; k++) {
    const key = `${iCol[k]},${jCol[k]}`;
    if (!panels.has(key)) panels.set(key, []);
    panels.get(key)!.push([z[k], zhat[k]]);
  }

  const parts: string[] = [];
  parts.push(
    `<svg xmlns="http://www.w3.org/2000/svg" width="${W}" height="${H}" viewBox="0 0 ${W} ${H}" font-family="Helvetica, Arial, sans-serif">`,
    `<rect width="${W}" height="${H}" fill="white"/>`,
  );
  for (let i = 1; i <= n; i++) {
    for (let j = 1; j <= n; j++) {
      const x0 = pad + (j - 1) * (size + gap);
      const y0 = pad / 2 + (i - 1) * (size + gap);
      const pts = panels.get(`${i},${j}`) ?? [];
      const stride = Math.max(1, Math.floor(pts.length / cap));
      const kept = pts.filter((_, k) => k % stride === 0);
      const xr = extent(kept.map((p) => p[0]));
      const yr = extent(kept.map((p) => p[1]));
      parts.push(
        `<rect x="${x0}" y="${y0}" width="${size}" height="${size}" fill="none" stroke="#444" stroke-width="1"/>`,
      );
      const dots = kept
        .map(([zx, zy]) => {
          const cx = scale(zx, xr, x0 + 4, x0 + size - 4);
          const cy = scale(zy, yr, y0 + size - 4, y0 + 4);
          return `<circle cx="${cx.toFixed(1)}" cy="${cy.toFixed(1)}" r="1.2" fill="#1f77b4" fill-opacity="0.35"/>`;
        })
        .join("");
      parts.push(dots);
      const score = opts.annotations?.[i - 1]?.[j - 1];
      if (score !== undefined) {
        parts.push(
          `<text x="${x0 + size - 6}" y="${y0 + 16}" text-anchor="end" font-size="13" fill="#d62728">${score.toFixed(2)}</text>`,
        );
      }
      if (i === n) {
        parts.push(
          `<text x="${x0 + size / 2}" y="${y0 + size + 14}" text-anchor="middle" font-size="13">Z${j}</text>`,
        );
      }
      if (j === 1) {
        parts.push(
          `<text x="${x0 - 10}" y="${y0 + size / 2}" text-anchor="middle" font-size="13" transform="rotate(-90 ${x0 - 10} ${y0 + size / 2})">Zhat${i}</text>`,
        );
      }
    }
  }
  parts.push("</svg>");
  return parts.join("\n");
}

export interface LossSeries {
  label: string;
  table: Table;
}

const HISTORY_COLUMNS = ["step", "env", "elbo", "sparsity", "moral", "total"];

/** Overlaid ELBO (solid) and sparsity (dashed) curves, one color per run. */
export function lossCurvesSvg(series: LossSeries[]): string {
  if (series.length === 0) {
    throw new Error("usage: at least one history file is required");
  }
  for (const s of series) {
    requireColumns(s.table, HISTORY_COLUMNS);
  }
  const W = 760;
  const H = 420;
  const left = 64;
  const bottom = H - 44;
  const top = 18;
  const right = W - 16;

  const allSteps = series.flatMap((s) => column(s.table, "step"));
  const allValues = series.flatMap((s) => [
    ...column(s.table, "elbo"),
    ...column(s.table, "sparsity"),
  ]);
  const xr = extent(allSteps);
  const yr = extent(allValues);

  const parts: string[] = [];
  parts.push(
    `<svg xmlns="http://www.w3.org/2000/svg" width="${W}" height="${H}" viewBox="0 0 ${W} ${H}" font-family="Helvetica, Arial, sans-serif">`,
    `<rect width="${W}" height="${H}" fill="white"/>`,
    `<line x1="${left}" y1="${bottom}" x2="${right}" y2="${bottom}" stroke="#000"/>`,
    `<line x1="${left}" y1="${top}" x2="${left}" y2="${bottom}" stroke="#000"/>`,
    `<text x="${(left + right) / 2}" y="${H - 10}" text-anchor="middle" font-size="13">training step</text>`,
    `<text x="16" y="${(top + bottom) / 2}" text-anchor="middle" font-size="13" transform="rotate(-90 16 ${(top + bottom) / 2})">loss</text>`,
    `<text x="${left - 6}" y="${bottom + 4}" text-anchor="end" font-size="11">${fmt(yr[0])}</text>`,
    `<text x="${left - 6}" y="${top + 8}" text-anchor="end" font-size="11">${fmt(yr[1])}</text>`,
    `<text x="${left}" y="${bottom + 16}" text-anchor="middle" font-size="11">${fmt(xr[0])}</text>`,
    `<text x="${right}" y="${bottom + 16}" text-anchor="end" font-size="11">${fmt(xr[1])}</text>`,
  );

  series.forEach((s, idx) => {
    const color = PALETTE[idx % PALETTE.length];
    const steps = column(s.table, "step");
    for (const [name, dash] of [
      ["elbo", ""],
      ["sparsity", "6 4"],
    ] as const) {
      const values = column(s.table, name);
      const stride = Math.max(1, Math.floor(values.length / 1500));
      const path = steps
        .map((st, k) => [st, values[k]] as const)
        .filter((_, k) => k % stride === 0)
        .map(([st, v], k) => {
          const x = scale(st, xr, left, right).toFixed(1);
          const y = scale(v, yr, bottom, top).toFixed(1);
          return `${k === 0 ? "M" : "L"}${x} ${y}`;
        })
        .join(" ");
      parts.push(
        `<path d="${path}" fill="none" stroke="${color}" stroke-width="1.4"${dash ? ` stroke-dasharray="${dash}"` : ""}/>`,
      );
    }
    const ly = top + 16 + idx * 18;
    parts.push(
      `<line x1="${right - 150}" y1="${ly - 4}" x2="${right - 122}" y2="${ly - 4}" stroke="${color}" stroke-width="2"/>`,
      `<text x="${right - 116}" y="${ly}" font-size="12">${s.label}</text>`,
    );
  });
  parts.push(
    `<text x="${left + 8}" y="${top + 12}" font-size="11" fill="#555">solid: elbo, dashed: sparsity</text>`,
  );
  parts.push("</svg>");
  return parts.join("\n");
}
