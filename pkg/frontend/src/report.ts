/** CLI: render figures and the HTML report from crl run artifacts.
 *
 *   report.ts scatter --in scatter.csv [--eval eval.json] --out out.svg
 *   report.ts losses  --in a.csv [--in b.csv ...] --out out.svg
 *   report.ts html    --in RUN_DIR --out report.html
 *
 * Every number shown is read from the inputs; nothing is recomputed.
 */

import * as fs from "node:fs";
import * as path from "node:path";

import { CsvError, parseCsv } from "./csv.js";
import { EvalReport, htmlReport } from "./html.js";
import { LossSeries, lossCurvesSvg, scatterMatrixSvg } from "./svg.js";

interface Args {
  command: string;
  inputs: string[];
  out?: string;
  evalPath?: string;
}

export function parseArgs(argv: string[]): Args {
  const [command, ...rest] = argv;
  if (!["scatter", "losses", "html"].includes(command ?? "")) {
    throw new Error("usage: report.ts scatter|losses|html --in PATH [--in PATH ...] --out PATH");
  }
  const args: Args = { command, inputs: [] };
  for (let k = 0; k < rest.length; k++) {
    const flag = rest[k];
    const value = rest[++k];
    if (value === undefined) throw new Error(`missing value for ${flag}`);
    if (flag === "--in") args.inputs.push(value);
    else if (flag === "--out") args.out = value;
    else if (flag === "--eval") args.evalPath = value;
    else throw new Error(`unknown flag ${flag}`);
  }
  if (args.inputs.length === 0) throw new Error("usage: at least one --in is required");
  if (!args.out) throw new Error("usage: --out is required");
  return args;
}

function readEval(p: string): EvalReport {
  return JSON.parse(fs.readFileSync(p, "utf-8")) as EvalReport;
}

export function renderScatter(csvPath: string, evalPath?: string): string {
  const table = parseCsv(fs.readFileSync(csvPath, "utf-8"));
  const annotations = evalPath ? readEval(evalPath).alignment.score_matrix : undefined;
  return scatterMatrixSvg(table, { annotations });
}

export function renderLosses(paths: string[]): string {
  const series: LossSeries[] = paths.map((p) => ({
    label: path.basename(path.dirname(p)) || path.basename(p),
    table: parseCsv(fs.readFileSync(p, "utf-8")),
  }));
  return lossCurvesSvg(series);
}

export function renderHtml(runDir: string): string {
  const maybe = (p: string): string | undefined => (fs.existsSync(p) ? p : undefined);
  const scatterCsv = maybe(path.join(runDir, "scatter.csv"));
  const evalJson = maybe(path.join(runDir, "eval.json"));
  const histories: string[] = [];
  if (fs.existsSync(runDir)) {
    for (const entry of fs.readdirSync(runDir).sort()) {
      const hist = path.join(runDir, entry, "history.csv");
      if (entry.startsWith("iter_") && fs.existsSync(hist)) histories.push(hist);
    }
    const flat = path.join(runDir, "history.csv");
    if (fs.existsSync(flat)) histories.push(flat);
  }
  return htmlReport({
    scatterSvg: scatterCsv ? renderScatter(scatterCsv, evalJson) : undefined,
    lossSvg: histories.length > 0 ? renderLosses(histories) : undefined,
    evalReport: evalJson ? readEval(evalJson) : undefined,
  });
}

export function main(argv: string[]): number {
  let args: Args;
  try {
    args = parseArgs(argv);
  } catch (err) {
    console.error((err as Error).message);
    return 2;
  }
  try {
    let output: string;
    if (args.command === "scatter") output = renderScatter(args.inputs[0], args.evalPath);
    else if (args.command === "losses") output = renderLosses(args.inputs);
    else output = renderHtml(args.inputs[0]);
    fs.mkdirSync(path.dirname(path.resolve(args.out!)), { recursive: true });
    fs.writeFileSync(args.out!, output);
    console.log(`wrote ${args.out}`);
    return 0;
  } catch (err) {
    if (err instanceof CsvError) {
      console.error(`malformed CSV: ${err.message}`);
      return 1;
    }
    console.error((err as Error).message);
    return 1;
  }
}

const entry = process.argv[1] ?? "";
if (entry.endsWith("report.ts") || entry.endsWith("report.js")) {
  process.exit(main(process.argv.slice(2)));
}
