import { describe, expect, it } from "vitest";

import { CsvError, column, parseCsv, requireColumns } from "../src/csv.js";

const GOOD = "step,env,elbo\n0,0,1.5\n1,1,-0.25\n";

describe("parseCsv", () => {
  it("parses headered numeric tables", () => {
    const t = parseCsv(GOOD);
    expect(t.columns).toEqual(["step", "env", "elbo"]);
    expect(t.rows).toHaveLength(2);
    expect(column(t, "elbo")).toEqual([1.5, -0.25]);
  });

  it("reports the offending line number on malformed input", () => {
    expect(() => parseCsv("a,b\n1,2\n3,oops\n")).toThrowError(/line 3/);
    try {
      parseCsv("a,b\n1\n");
    } catch (err) {
      expect(err).toBeInstanceOf(CsvError);
      expect((err as CsvError).line).toBe(2);
    }
  });

  it("rejects empty input", () => {
    expect(() => parseCsv("")).toThrowError(/empty/);
  });

  it("names the missing column on schema mismatch", () => {
    const t = parseCsv(GOOD);
    expect(() => column(t, "sparsity")).toThrowError(/"sparsity"/);
    expect(() => requireColumns(t, ["step", "moral"])).toThrowError(/"moral"/);
  });
});
