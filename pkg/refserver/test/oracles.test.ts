// Distribution fixtures captured from the Python engine.  toEqual on arrays
// of numbers is exact equality, which is the point: the server must produce
// the same doubles, not approximately the same.

import { describe, expect, it } from "vitest";

import { normalize } from "../src/distribution.js";
import {
  FactorizedOracle,
  MarkovOracle,
  NoisyOracle,
  TemplateOracle,
  oracleFromJson,
  parseOracleText,
  toyOracle,
} from "../src/oracles.js";

const VOCAB4 = { size: 4, maskId: 4, eosId: 3 };

function chain(size: number, stay: number) {
  return oracleFromJson({ type: "symmetric-chain", size, stay });
}

describe("normalize", () => {
  it("skips the divide when the sum is exactly 1", () => {
    expect(normalize([0.25, 0.25, 0.25, 0.25])).toEqual([0.25, 0.25, 0.25, 0.25]);
    // 0.2 + 0.5 + 0.2 + 0.1 accumulates to a hair above 1, so it divides
    expect(normalize([0.2, 0.5, 0.2, 0.1])).toEqual([
      0.20000000000000004, 0.5000000000000001, 0.20000000000000004, 0.10000000000000002,
    ]);
  });

  it("rejects bad vectors", () => {
    expect(() => normalize([])).toThrow("empty");
    expect(() => normalize([0, 0])).toThrow("zero mass");
    expect(() => normalize([0.5, -0.1])).toThrow("invalid");
    expect(() => normalize([0.5, Infinity])).toThrow("invalid");
  });
});

describe("MarkovOracle", () => {
  it("conditions on the nearest observed neighbors", () => {
    const oracle = chain(4, 0.85);
    const out = oracle.predict([], [null, 2, null, null]);
    expect(out.get(0)).toEqual([
      0.05000000000000001, 0.05000000000000001, 0.85, 0.05000000000000001,
    ]);
    expect(out.get(2)).toEqual([
      0.05000000000000001, 0.05000000000000001, 0.85, 0.05000000000000001,
    ]);
    expect(out.get(3)).toEqual([
      0.09000000000000002, 0.09000000000000002, 0.7299999999999999, 0.09000000000000002,
    ]);
  });

  it("selects a parameter set from the prompt digest", () => {
    const oracle = new MarkovOracle(
      [
        { pi: [0.5, 0.5], a: [[0.9, 0.1], [0.2, 0.8]] },
        { pi: [0.1, 0.9], a: [[0.5, 0.5], [0.3, 0.7]] },
      ],
      { size: 2, maskId: 2, eosId: 1 }
    );
    expect(oracle.setIndex([])).toBe(0);
    expect(oracle.setIndex([0])).toBe(1);
    const first = oracle.predict([1], [null, 0, null]);
    expect(first.get(0)).toEqual([0.8181818181818181, 0.18181818181818182]);
    expect(first.get(2)).toEqual([0.9, 0.1]);
    const second = oracle.predict([0], [null, 0, null]);
    expect(second.get(0)).toEqual([0.15625, 0.84375]);
    expect(second.get(2)).toEqual([0.5, 0.5]);
  });
});

describe("NoisyOracle", () => {
  it("mixes deterministic per-context noise into the inner rows", () => {
    const rows = [
      [0.6, 0.3, 0.05, 0.05],
      [0.2, 0.5, 0.2, 0.1],
      [0.1, 0.2, 0.3, 0.4],
      [0.25, 0.25, 0.25, 0.25],
    ];
    const inner = new FactorizedOracle(rows, VOCAB4);
    const noisy = new NoisyOracle(inner, 0.3, 5n);
    const out = noisy.predict([], [null, 1, null, 2]);
    expect(out.get(0)).toEqual([
      0.4920016389486967, 0.24801600127059192, 0.14030022963426522, 0.11968213014644608,
    ]);
    expect(out.get(2)).toEqual([
      0.15784676059212305, 0.2691607377380303, 0.27604059595044517, 0.29695190571940144,
    ]);
  });

  it("is bit-transparent at eta = 0", () => {
    const rows = [[0.2, 0.5, 0.2, 0.1]];
    const inner = new FactorizedOracle(rows, VOCAB4);
    const noisy = new NoisyOracle(inner, 0.0, 7n);
    expect(noisy.predict([], [null]).get(0)).toEqual(inner.predict([], [null]).get(0));
  });
});

describe("TemplateOracle", () => {
  const rows = [
    [0.6, 0.3, 0.05, 0.05],
    [0.2, 0.5, 0.2, 0.1],
    [0.1, 0.2, 0.3, 0.4],
    [0.25, 0.25, 0.25, 0.25],
  ];
  const oracle = new TemplateOracle(
    [0, "content", 1, "content"],
    new FactorizedOracle(rows, VOCAB4),
    VOCAB4
  );

  it("keeps the EOS tail soft while content is masked", () => {
    const out = oracle.predict([], [null, null, null, null, null, null]);
    expect(out.get(0)).toEqual([
      0.995, 0.001666666666666668, 0.001666666666666668, 0.001666666666666668,
    ]);
    expect(out.get(1)).toEqual([
      0.20000000000000004, 0.5000000000000001, 0.20000000000000004, 0.10000000000000002,
    ]);
    expect(out.get(4)).toEqual([
      0.13333333333333333, 0.13333333333333333, 0.13333333333333333, 0.6,
    ]);
  });

  it("sharpens the tail once every content slot is decoded", () => {
    const out = oracle.predict([], [null, 1, null, 2, null, null]);
    expect(out.get(4)).toEqual([
      0.001666666666666668, 0.001666666666666668, 0.001666666666666668, 0.995,
    ]);
    expect(out.get(5)).toEqual(out.get(4));
  });

  it("rejects states shorter than the template", () => {
    expect(() => oracle.predict([], [null, null])).toThrow("shorter than true_length");
  });
});

describe("oracleFromJson", () => {
  it("loads nested specs and keeps 63-bit seeds exact", () => {
    const text = JSON.stringify({
      type: "noisy",
      eta: 0.25,
      seed: 0,
      inner: { type: "symmetric-chain", size: 4, stay: 0.85 },
    }).replace('"seed":0', '"seed":4611686018427387907');
    const oracle = oracleFromJson(parseOracleText(text)) as NoisyOracle;
    expect(oracle.seed).toBe(4611686018427387907n);
    expect(oracle.vocab).toEqual({ size: 4, maskId: 4, eosId: 3 });
  });

  it("names the faulty field", () => {
    expect(() => oracleFromJson({ type: "factorized", size: 3 })).toThrow(
      "oracle: needs per_position"
    );
    expect(() => oracleFromJson({ type: "nope", size: 3 })).toThrow("oracle.type");
    expect(() =>
      oracleFromJson({
        type: "template",
        size: 4,
        layout: [0],
        true_length: 2,
        base: { type: "factorized", size: 4, per_position: [[0.25, 0.25, 0.25, 0.25]] },
      })
    ).toThrow("true_length 2 != layout length 1");
  });
});

describe("toyOracle", () => {
  it("is deterministic in the seed", () => {
    const a = toyOracle(7);
    const b = toyOracle(7);
    const c = toyOracle(8);
    expect(a.perPosition).toEqual(b.perPosition);
    expect(a.perPosition).not.toEqual(c.perPosition);
    expect(a.length).toBe(8);
    for (const row of a.perPosition) {
      expect(row).toHaveLength(4);
      const total = row.reduce((x, y) => x + y, 0);
      expect(Math.abs(total - 1)).toBeLessThan(1e-12);
    }
  });
});
