// The four solvable mask predictors, ported operation-for-operation from the
// Python engine. Prediction math is plain double arithmetic with pinned
// accumulation order (left-to-right sums, iterative matrix powers), so a
// decode driven through this server is bit-identical to an in-process one.

import { normalize, validateDistRow } from "./distribution.js";
import { contextDigest, promptDigest, splitmix64, unitFloat } from "./rng.js";

const NOISE_FLOOR = 1e-3;
const TEMPLATE_MASS = 0.995;
const EOS_MASS_PRE = 0.6;
const EOS_MASS_POST = 0.995;

export type Response = Array<number | null>;

export interface Vocab {
  size: number;
  maskId: number;
  eosId: number;
}

export interface Oracle {
  vocab: Vocab;
  // Distributions for every masked position, keyed by position.
  predict(prompt: number[], response: Response): Map<number, number[]>;
}

function makeVocab(size: number, maskId: number, eosId: number): Vocab {
  if (!Number.isInteger(size) || size < 1) {
    throw new Error(`vocabulary size must be >= 1, got ${size}`);
  }
  if (maskId === -1) maskId = size;
  if (eosId === -1) eosId = size - 1;
  if (maskId >= 0 && maskId < size) {
    throw new Error(`mask_id ${maskId} must be outside 0..${size - 1}`);
  }
  if (eosId < 0 || eosId >= size) {
    throw new Error(`eos_id ${eosId} must be inside 0..${size - 1}`);
  }
  return { size, maskId, eosId };
}

function maskedPositions(response: Response): number[] {
  const out: number[] = [];
  for (let i = 0; i < response.length; i++) {
    if (response[i] === null) out.push(i);
  }
  return out;
}

interface ParameterSet {
  pi: number[];
  a: number[][];
}

export class MarkovOracle implements Oracle {
  vocab: Vocab;
  private sets: ParameterSet[];
  private powers: number[][][][];
  private marginals: number[][][];

  constructor(sets: Array<{ pi: unknown; a: unknown }>, vocab: Vocab) {
    if (sets.length === 0) {
      throw new Error("markov oracle needs at least one (pi, A) parameter set");
    }
    this.vocab = vocab;
    this.sets = sets.map((s, n) => {
      const pi = validateDistRow(s.pi, `parameter_sets[${n}].pi`, vocab.size);
      if (!Array.isArray(s.a) || s.a.length !== vocab.size) {
        throw new Error(`parameter_sets[${n}].A must have ${vocab.size} rows`);
      }
      const a = s.a.map((row, r) =>
        validateDistRow(row, `parameter_sets[${n}].A[${r}]`, vocab.size)
      );
      return { pi, a };
    });
    this.powers = this.sets.map(() => []);
    this.marginals = this.sets.map(() => []);
  }

  setIndex(prompt: number[]): number {
    if (this.sets.length === 1) return 0;
    return Number(promptDigest(prompt) % BigInt(this.sets.length));
  }

  // A^k with A^0 = I, extended iteratively; inner sums run left to right.
  private power(setIdx: number, k: number): number[][] {
    const cache = this.powers[setIdx];
    const size = this.vocab.size;
    if (cache.length === 0) {
      const ident: number[][] = [];
      for (let i = 0; i < size; i++) {
        const row: number[] = [];
        for (let j = 0; j < size; j++) row.push(i === j ? 1.0 : 0.0);
        ident.push(row);
      }
      cache.push(ident);
    }
    const a = this.sets[setIdx].a;
    while (cache.length <= k) {
      const prev = cache[cache.length - 1];
      const nxt: number[][] = [];
      for (let i = 0; i < size; i++) {
        const row: number[] = [];
        for (let j = 0; j < size; j++) {
          let acc = 0.0;
          for (let m = 0; m < size; m++) {
            acc += prev[i][m] * a[m][j];
          }
          row.push(acc);
        }
        nxt.push(row);
      }
      cache.push(nxt);
    }
    return cache[k];
  }

  private marginal(setIdx: number, i: number): number[] {
    const cache = this.marginals[setIdx];
    if (cache.length === 0) {
      cache.push(this.sets[setIdx].pi);
    }
    const a = this.sets[setIdx].a;
    const size = this.vocab.size;
    while (cache.length <= i) {
      const prev = cache[cache.length - 1];
      const nxt: number[] = [];
      for (let j = 0; j < size; j++) {
        let acc = 0.0;
        for (let m = 0; m < size; m++) {
          acc += prev[m] * a[m][j];
        }
        nxt.push(acc);
      }
      cache.push(nxt);
    }
    return cache[i];
  }

  predict(prompt: number[], response: Response): Map<number, number[]> {
    const setIdx = this.setIndex(prompt);
    const size = this.vocab.size;
    const n = response.length;
    const out = new Map<number, number[]>();
    for (let i = 0; i < n; i++) {
      if (response[i] !== null) continue;
      let left = -1;
      let right = -1;
      for (let j = i - 1; j >= 0; j--) {
        if (response[j] !== null) {
          left = j;
          break;
        }
      }
      for (let j = i + 1; j < n; j++) {
        if (response[j] !== null) {
          right = j;
          break;
        }
      }
      let base: number[];
      if (left >= 0) {
        const pLeft = this.power(setIdx, i - left);
        const aTok = response[left] as number;
        base = [];
        for (let v = 0; v < size; v++) base.push(pLeft[aTok][v]);
      } else {
        base = [...this.marginal(setIdx, i)];
      }
      let vals: number[];
      if (right >= 0) {
        const pRight = this.power(setIdx, right - i);
        const bTok = response[right] as number;
        vals = [];
        for (let v = 0; v < size; v++) vals.push(base[v] * pRight[v][bTok]);
      } else {
        vals = base;
      }
      out.set(i, normalize(vals));
    }
    return out;
  }
}

export class FactorizedOracle implements Oracle {
  vocab: Vocab;
  perPosition: number[][];

  constructor(perPosition: unknown[], vocab: Vocab) {
    if (perPosition.length === 0) {
      throw new Error("factorized oracle needs at least one position");
    }
    this.vocab = vocab;
    this.perPosition = perPosition.map((row, i) =>
      normalize(validateDistRow(row, `per_position[${i}]`, vocab.size))
    );
  }

  get length(): number {
    return this.perPosition.length;
  }

  predict(_prompt: number[], response: Response): Map<number, number[]> {
    if (response.length !== this.length) {
      throw new Error(
        `factorized oracle covers ${this.length} positions, state has ${response.length}`
      );
    }
    const out = new Map<number, number[]>();
    for (const i of maskedPositions(response)) {
      out.set(i, this.perPosition[i]);
    }
    return out;
  }
}

export class NoisyOracle implements Oracle {
  vocab: Vocab;
  inner: Oracle;
  eta: number;
  seed: bigint;

  constructor(inner: Oracle, eta: number, seed: bigint) {
    if (!(eta >= 0.0 && eta <= 1.0)) {
      throw new Error(`eta must be in [0, 1], got ${eta}`);
    }
    this.inner = inner;
    this.eta = eta;
    this.seed = seed;
    this.vocab = inner.vocab;
  }

  noiseDist(position: number, context: Array<[number, number]>): number[] {
    let s = contextDigest(this.seed, position, context);
    const weights: number[] = [];
    for (let k = 0; k < this.vocab.size; k++) {
      let word: bigint;
      [s, word] = splitmix64(s);
      weights.push(unitFloat(word) + NOISE_FLOOR);
    }
    return normalize(weights);
  }

  predict(prompt: number[], response: Response): Map<number, number[]> {
    const innerDists = this.inner.predict(prompt, response);
    if (this.eta === 0.0) {
      // degenerate mixture: return the inner rows untouched, bit for bit
      return innerDists;
    }
    const pairs: Array<[number, number]> = [];
    for (let i = 0; i < response.length; i++) {
      const tok = response[i];
      if (tok !== null) pairs.push([i, tok]);
    }
    const out = new Map<number, number[]>();
    const oneMinus = 1.0 - this.eta;
    for (const [i, dist] of innerDists) {
      const q = this.noiseDist(i, pairs);
      const mixed: number[] = [];
      for (let v = 0; v < this.vocab.size; v++) {
        mixed.push(oneMinus * dist[v] + this.eta * q[v]);
      }
      out.set(i, normalize(mixed));
    }
    return out;
  }
}

export type LayoutEntry = number | "content";

export class TemplateOracle implements Oracle {
  vocab: Vocab;
  base: FactorizedOracle;
  layout: LayoutEntry[];
  trueLength: number;
  templateMass: number;
  eosMassPre: number;
  eosMassPost: number;
  private contentPositions: number[];

  constructor(
    layout: LayoutEntry[],
    base: FactorizedOracle,
    vocab: Vocab,
    templateMass = TEMPLATE_MASS,
    eosMassPre = EOS_MASS_PRE,
    eosMassPost = EOS_MASS_POST
  ) {
    if (base.vocab.size !== vocab.size) {
      throw new Error("template base vocabulary size mismatch");
    }
    if (layout.length !== base.length) {
      throw new Error(
        `layout has ${layout.length} entries but base covers ${base.length} positions`
      );
    }
    if (!(templateMass >= 0.99 && templateMass < 1.0) || !(eosMassPost >= 0.99 && eosMassPost < 1.0)) {
      throw new Error("template_mass and eos_mass_post must be in [0.99, 1)");
    }
    if (!(eosMassPre > 0.0 && eosMassPre < 1.0)) {
      throw new Error("eos_mass_pre must be in (0, 1)");
    }
    if (vocab.size < 2) {
      throw new Error("template oracle needs vocabulary size >= 2");
    }
    this.vocab = vocab;
    this.base = base;
    this.layout = [...layout];
    this.trueLength = layout.length;
    this.templateMass = templateMass;
    this.eosMassPre = eosMassPre;
    this.eosMassPost = eosMassPost;
    this.contentPositions = [];
    layout.forEach((ent, i) => {
      if (ent === "content") {
        this.contentPositions.push(i);
        return;
      }
      if (!Number.isInteger(ent) || ent < 0 || ent >= vocab.size) {
        throw new Error(`layout[${i}] must be "content" or a token id, got ${JSON.stringify(ent)}`);
      }
    });
  }

  private peaked(token: number, mass: number): number[] {
    const rest = (1.0 - mass) / (this.vocab.size - 1);
    const vals: number[] = [];
    for (let v = 0; v < this.vocab.size; v++) {
      vals.push(v === token ? mass : rest);
    }
    return normalize(vals);
  }

  gateOpen(response: Response): boolean {
    return this.contentPositions.every((i) => response[i] !== null);
  }

  predict(_prompt: number[], response: Response): Map<number, number[]> {
    if (response.length < this.trueLength) {
      throw new Error(
        `state length ${response.length} shorter than true_length ${this.trueLength}`
      );
    }
    const eosMass = this.gateOpen(response) ? this.eosMassPost : this.eosMassPre;
    const out = new Map<number, number[]>();
    for (const i of maskedPositions(response)) {
      if (i >= this.trueLength) {
        out.set(i, this.peaked(this.vocab.eosId, eosMass));
      } else if (this.layout[i] === "content") {
        out.set(i, this.base.perPosition[i]);
      } else {
        out.set(i, this.peaked(this.layout[i] as number, this.templateMass));
      }
    }
    return out;
  }
}

// Built-in model for running the server with no oracle file: 8 independent
// positions over a 4-symbol alphabet, rows drawn from the shared PRNG.
export function toyOracle(seed: number): FactorizedOracle {
  let s = BigInt(seed);
  const rows: number[][] = [];
  for (let i = 0; i < 8; i++) {
    const row: number[] = [];
    for (let k = 0; k < 4; k++) {
      let word: bigint;
      [s, word] = splitmix64(s);
      row.push(unitFloat(word) + 0.05);
    }
    rows.push(normalize(row));
  }
  return new FactorizedOracle(rows, makeVocab(4, -1, -1));
}

// --- oracle file loading --------------------------------------------------

function isObject(x: unknown): x is Record<string, unknown> {
  return typeof x === "object" && x !== null && !Array.isArray(x);
}

// JSON.parse rounds integers above 2^53; noise seeds can be 63-bit.  Quote
// every "seed" value in the raw text first so it survives as a string.
export function parseOracleText(text: string): unknown {
  const quoted = text.replace(/"seed"(\s*:\s*)(-?\d+)/g, '"seed"$1"$2"');
  return JSON.parse(quoted);
}

export function oracleFromJson(spec: unknown, where = "oracle"): Oracle {
  if (!isObject(spec)) {
    throw new Error(`${where}: expected an object`);
  }
  const kind = spec["type"];
  if (kind === "noisy") {
    for (const field of ["eta", "seed", "inner"]) {
      if (!(field in spec)) {
        throw new Error(`${where}.${field}: required for noisy oracles`);
      }
    }
    const inner = oracleFromJson(spec["inner"], `${where}.inner`);
    const rawSeed = spec["seed"];
    let seed: bigint;
    if (typeof rawSeed === "string" && /^-?\d+$/.test(rawSeed)) {
      seed = BigInt(rawSeed);
    } else if (typeof rawSeed === "number" && Number.isInteger(rawSeed)) {
      seed = BigInt(rawSeed);
    } else {
      throw new Error(`${where}.seed: must be an integer`);
    }
    if (typeof spec["eta"] !== "number") {
      throw new Error(`${where}.eta: must be a number`);
    }
    try {
      return new NoisyOracle(inner, spec["eta"], seed);
    } catch (e) {
      throw new Error(`${where}: ${(e as Error).message}`);
    }
  }
  const size = spec["size"];
  if (typeof size !== "number" || !Number.isInteger(size) || size < 1) {
    throw new Error(`${where}.size: must be a positive integer, got ${JSON.stringify(size)}`);
  }
  let vocab: Vocab;
  try {
    vocab = makeVocab(
      size,
      typeof spec["mask_id"] === "number" ? (spec["mask_id"] as number) : -1,
      typeof spec["eos_id"] === "number" ? (spec["eos_id"] as number) : -1
    );
  } catch (e) {
    throw new Error(`${where}: ${(e as Error).message}`);
  }
  try {
    if (kind === "symmetric-chain") {
      if (!("stay" in spec) || typeof spec["stay"] !== "number") {
        throw new Error("needs stay");
      }
      const stay = spec["stay"];
      if (!(stay >= 0.0 && stay <= 1.0)) {
        throw new Error(`stay probability must be in [0, 1], got ${stay}`);
      }
      const off = size > 1 ? (1.0 - stay) / (size - 1) : 0.0;
      let a: number[][] = [];
      let pi: number[] = [];
      for (let i = 0; i < size; i++) {
        const row: number[] = [];
        for (let j = 0; j < size; j++) row.push(i === j ? stay : off);
        a.push(row);
        pi.push(1.0 / size);
      }
      if (size === 1) {
        a = [[1.0]];
        pi = [1.0];
      }
      return new MarkovOracle([{ pi, a }], vocab);
    }
    if (kind === "markov") {
      let sets: Array<{ pi: unknown; a: unknown }>;
      if ("parameter_sets" in spec) {
        const raw = spec["parameter_sets"];
        if (!Array.isArray(raw)) {
          throw new Error("parameter_sets must be a list");
        }
        sets = raw.map((ps) => ({
          pi: isObject(ps) ? ps["pi"] : undefined,
          a: isObject(ps) ? ps["A"] : undefined,
        }));
      } else if ("pi" in spec && "A" in spec) {
        sets = [{ pi: spec["pi"], a: spec["A"] }];
      } else {
        throw new Error("needs pi and A (or parameter_sets)");
      }
      return new MarkovOracle(sets, vocab);
    }
    if (kind === "factorized") {
      if (!("per_position" in spec) || !Array.isArray(spec["per_position"])) {
        throw new Error("needs per_position");
      }
      return new FactorizedOracle(spec["per_position"], vocab);
    }
    if (kind === "template") {
      for (const field of ["layout", "true_length", "base"]) {
        if (!(field in spec)) {
          throw new Error(`needs ${field}`);
        }
      }
      const base = oracleFromJson(spec["base"], `${where}.base`);
      if (!(base instanceof FactorizedOracle)) {
        throw new Error("base must be a factorized oracle");
      }
      const layout = spec["layout"];
      if (!Array.isArray(layout)) {
        throw new Error("layout must be a list");
      }
      if (spec["true_length"] !== layout.length) {
        throw new Error(
          `true_length ${spec["true_length"]} != layout length ${layout.length}`
        );
      }
      return new TemplateOracle(
        layout as LayoutEntry[],
        base,
        vocab,
        typeof spec["template_mass"] === "number" ? spec["template_mass"] : TEMPLATE_MASS,
        typeof spec["eos_mass_pre"] === "number" ? spec["eos_mass_pre"] : EOS_MASS_PRE,
        typeof spec["eos_mass_post"] === "number" ? spec["eos_mass_post"] : EOS_MASS_POST
      );
    }
  } catch (e) {
    const msg = (e as Error).message;
    throw new Error(msg.startsWith(where) ? msg : `${where}: ${msg}`);
  }
  throw new Error(
    `${where}.type: must be one of markov|symmetric-chain|factorized|noisy|template, got ${JSON.stringify(kind)}`
  );
}
