// Probability-vector normalization with the exact operation sequence the
// Python client uses: a plain left-to-right sum, then an elementwise divide.
// A total of exactly 1.0 skips the divide, so renormalizing an already
// normalized vector is the identity (this matters for bit-equality).

export function normalize(probs: number[]): number[] {
  if (probs.length === 0) {
    throw new Error("empty probability vector");
  }
  let total = 0.0;
  for (const p of probs) {
    if (!Number.isFinite(p) || p < 0.0) {
      throw new Error(`invalid probability entry ${p}`);
    }
    total += p;
  }
  if (total <= 0.0) {
    throw new Error("probability vector has zero mass");
  }
  if (total !== 1.0) {
    return probs.map((p) => p / total);
  }
  return [...probs];
}

export function validateDistRow(row: unknown, what: string, size: number): number[] {
  if (!Array.isArray(row) || row.length !== size) {
    const got = Array.isArray(row) ? row.length : typeof row;
    throw new Error(`${what} must have ${size} entries, got ${got}`);
  }
  let total = 0.0;
  for (const p of row) {
    if (typeof p !== "number" || !Number.isFinite(p) || p < 0) {
      throw new Error(`${what} has invalid entry ${JSON.stringify(p)}`);
    }
    total += p;
  }
  if (Math.abs(total - 1.0) > 1e-9) {
    throw new Error(`${what} must sum to 1 within 1e-9, got ${total}`);
  }
  return row.map((p) => p as number);
}
