import { describe, expect, it } from "vitest";

import { buildFilterGraph, partitionFilters } from "../src/distill";

describe("filter graph", () => {
  it("gives zero weight to identically activated filters", () => {
    const w = buildFilterGraph([Float32Array.from([0.5, 0.5]),
                                Float32Array.from([0.2, 0.2])]);
    expect(w[0][1]).toBe(0);
  });

  it("gives zero weight when a filter never activates", () => {
    const w = buildFilterGraph([Float32Array.from([0, 0.7, 0.3])]);
    expect(w[0][1]).toBe(0);
    expect(w[0][2]).toBe(0);
    expect(w[1][2]).toBeGreaterThan(0);
  });

  it("matches a hand-computed three-filter case", () => {
    // single sample a = [1, 2, 4]
    const w = buildFilterGraph([Float32Array.from([1, 2, 4])]);
    expect(w[0][1]).toBeCloseTo(1 * 2 * 1, 6);
    expect(w[0][2]).toBeCloseTo(1 * 4 * 3, 6);
    expect(w[1][2]).toBeCloseTo(2 * 4 * 2, 6);
    expect(w[1][0]).toBe(w[0][1]); // symmetric
    expect(w[0][0]).toBe(0); // no self loops
  });

  it("accumulates over samples", () => {
    const single = buildFilterGraph([Float32Array.from([1, 3])]);
    const double = buildFilterGraph([Float32Array.from([1, 3]),
                                     Float32Array.from([1, 3])]);
    expect(double[0][1]).toBeCloseTo(2 * single[0][1], 6);
  });
});

describe("filter partitioning", () => {
  it("handles the degenerate arities", () => {
    const w = buildFilterGraph([Float32Array.from([1, 2, 3, 4])]);
    expect(partitionFilters(w, 1)).toEqual([[0, 1, 2, 3]]);
    const singletons = partitionFilters(w, 4);
    expect(singletons.flat().sort((a, b) => a - b)).toEqual([0, 1, 2, 3]);
    expect(singletons.every((s) => s.length === 1)).toBe(true);
  });

  it("keeps sizes balanced", () => {
    const w = buildFilterGraph([Float32Array.from(
      [...Array(10).keys()].map((i) => 0.1 + i * 0.13))]);
    const parts = partitionFilters(w, 3);
    const sizes = parts.map((p) => p.length).sort();
    expect(sizes).toEqual([3, 3, 4]);
    expect(parts.flat().sort((a, b) => a - b)).toEqual([...Array(10).keys()]);
  });

  it("separates the endpoints of heavy edges", () => {
    // two heavy pairs (0,1) and (2,3); everything else negligible
    const w = [
      [0, 10, 0.01, 0.01],
      [10, 0, 0.01, 0.01],
      [0.01, 0.01, 0, 9],
      [0.01, 0.01, 9, 0],
    ];
    const parts = partitionFilters(w, 2);
    const setOf = (v: number) => parts.findIndex((p) => p.includes(v));
    expect(setOf(0)).not.toBe(setOf(1));
    expect(setOf(2)).not.toBe(setOf(3));
    // exhaustive check: no balanced 2-partition has lower intra-set weight
    const intra = (assign: number[]) => {
      let total = 0;
      for (let i = 0; i < 4; i++) {
        for (let j = i + 1; j < 4; j++) {
          if (assign[i] === assign[j]) total += w[i][j];
        }
      }
      return total;
    };
    const chosen = [0, 1, 2, 3].map(setOf);
    let best = Infinity;
    for (const assign of [[0, 0, 1, 1], [0, 1, 0, 1], [0, 1, 1, 0]]) {
      best = Math.min(best, intra(assign));
    }
    expect(intra(chosen)).toBeCloseTo(best, 9);
  });
});
