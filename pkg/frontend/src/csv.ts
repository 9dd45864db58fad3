/** Minimal CSV reading for the run artifacts (headered, numeric columns). */

export interface Table {
  columns: string[];
  rows: number[][];
}

export class CsvError extends Error {
  readonly line: number;

  constructor(message: string, line: number) {
    super(`${message} (line ${line})`);
    this.line = line;
  }
}

export function parseCsv(text: string): Table {
  const lines = text.split(/\r?\n/).filter((l) => l.length > 0);
  if (lines.length === 0) {
    throw new CsvError("empty CSV", 1);
  }
  const columns = lines[0].split(",").map((c) => c.trim());
  const rows: number[][] = [];
  for (let k = 1; k < lines.length; k++) {
    const cells = lines[k].split(",");
    if (cells.length !== columns.length) {
      throw new CsvError(
        `expected ${columns.length} cells, got ${cells.length}`,
        k + 1,
      );
    }
    const row = cells.map((c) => Number(c));
    const bad = row.findIndex((v) => Number.isNaN(v));
    if (bad >= 0) {
      throw new CsvError(`non-numeric value ${JSON.stringify(cells[bad])}`, k + 1);
    }
    rows.push(row);
  }
  return { columns, rows };
}

/** Column accessor; names the missing column on schema mismatch. */
export function column(table: Table, name: string): number[] {
  const idx = table.columns.indexOf(name);
  if (idx < 0) {
    throw new Error(`missing column ${JSON.stringify(name)}`);
  }
  return table.rows.map((r) => r[idx]);
}

export function requireColumns(table: Table, names: string[]): void {
  for (const name of names) {
    if (!table.columns.includes(name)) {
      throw new Error(`missing column ${JSON.stringify(name)}`);
    }
  }
}
