/** One-page HTML report embedding the figures and evaluation tables.
 * Missing inputs render as explicit placeholders, never silently. */

export interface EvalReport {
  alignment: {
    permutation: number[];
    score_matrix: number[][];
    aligned_scores: number[];
  };
  structure: {
    exact_match: boolean;
    shd: number;
    moral_shd: number;
    tc_shd: number;
  };
  mixing: {
    component: number;
    allowed: number[];
    r2_allowed: number;
    r2_full: number;
    improvement: number;
    supported: boolean;
  }[];
}

export interface ReportInputs {
  scatterSvg?: string;
  lossSvg?: string;
  evalReport?: EvalReport;
}

function missing(name: string): string {
  return `<div class="missing">missing: ${name}</div>`;
}

function matrixTable(matrix: number[][], caption: string): string {
  const header = matrix[0].map((_, j) => `<th>Z${j + 1}</th>`).join("");
  const body = matrix
    .map(
      (row, i) =>
        `<tr><th>Zhat${i + 1}</th>${row.map((v) => `<td>${v.toFixed(3)}</td>`).join("")}</tr>`,
    )
    .join("");
  return `<table><caption>${caption}</caption><tr><th></th>${header}</tr>${body}</table>`;
}

export function htmlReport(inputs: ReportInputs): string {
  const sections: string[] = [];
  sections.push("<h2>Recovered versus true latent variables</h2>");
  sections.push(inputs.scatterSvg ?? missing("scatter.csv"));
  sections.push("<h2>Training losses</h2>");
  sections.push(inputs.lossSvg ?? missing("history.csv"));
  sections.push("<h2>Evaluation</h2>");
  if (inputs.evalReport) {
    const ev = inputs.evalReport;
    sections.push(matrixTable(ev.alignment.score_matrix, "|Spearman| between components"));
    sections.push(
      `<table><caption>structure</caption>` +
        `<tr><th>exact match</th><td>${ev.structure.exact_match}</td></tr>` +
        `<tr><th>SHD</th><td>${ev.structure.shd}</td></tr>` +
        `<tr><th>moral SHD</th><td>${ev.structure.moral_shd}</td></tr>` +
        `<tr><th>transitive-closure SHD</th><td>${ev.structure.tc_shd}</td></tr></table>`,
    );
    const rows = ev.mixing
      .map(
        (m) =>
          `<tr><td>Zhat for Z${m.component + 1}</td>` +
          `<td>{${m.allowed.map((a) => `Z${a + 1}`).join(", ")}}</td>` +
          `<td>${m.r2_allowed.toFixed(3)}</td><td>${m.r2_full.toFixed(3)}</td>` +
          `<td>${m.improvement.toFixed(3)}</td><td>${m.supported}</td></tr>`,
      )
      .join("");
    sections.push(
      `<table><caption>functional dependence (k-NN R&sup2;)</caption>` +
        `<tr><th>component</th><th>permitted set</th><th>R&sup2; permitted</th>` +
        `<th>R&sup2; full</th><th>improvement</th><th>supported</th></tr>${rows}</table>`,
    );
  } else {
    sections.push(missing("eval.json"));
  }
  return [
    "<!DOCTYPE html>",
    '<html><head><meta charset="utf-8"><title>crl report</title>',
    "<style>",
    "body { font-family: Helvetica, Arial, sans-serif; margin: 2em; }",
    "table { border-collapse: collapse; margin: 1em 0; }",
    "td, th { border: 1px solid #999; padding: 4px 10px; font-size: 14px; }",
    "caption { caption-side: top; font-weight: bold; padding: 4px; }",
    ".missing { color: #b00; border: 1px dashed #b00; padding: 1em; margin: 1em 0; }",
    "</style></head><body>",
    "<h1>Causal representation learning report</h1>",
    ...sections,
    "</body></html>",
  ].join("\n");
}
