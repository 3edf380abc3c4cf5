// 64-bit mixing helpers on BigInt. These mirror the Python engine's integer
// arithmetic exactly; every float that leaves this file is built as
// (word >> 11) * 2^-53, which is representable without rounding.

const MASK64 = (1n << 64n) - 1n;

export function splitmix64(state: bigint): [bigint, bigint] {
  state = (state + 0x9e3779b97f4a7c15n) & MASK64;
  let z = state;
  z = ((z ^ (z >> 30n)) * 0xbf58476d1ce4e5b9n) & MASK64;
  z = ((z ^ (z >> 27n)) * 0x94d049bb133111ebn) & MASK64;
  return [state, z ^ (z >> 31n)];
}

export function mix64(h: bigint, value: bigint): bigint {
  const [, out] = splitmix64((h ^ (value & MASK64)) & MASK64);
  return out;
}

export function unitFloat(word: bigint): number {
  return Number(word >> 11n) * 2 ** -53;
}

// Digest of (position, sorted unmasked (index, token) pairs), keyed by seed.
export function contextDigest(
  seed: bigint,
  position: number,
  context: Array<[number, number]>
): bigint {
  let h = mix64(0x5ccdn, seed);
  h = mix64(h, BigInt(position));
  const pairs = [...context].sort((a, b) => a[0] - b[0] || a[1] - b[1]);
  for (const [idx, tok] of pairs) {
    h = mix64(h, BigInt(idx));
    h = mix64(h, BigInt(tok));
  }
  return h;
}

// Order-sensitive digest of a prompt; selects a parameter set in chain models.
export function promptDigest(prompt: number[]): bigint {
  let h = mix64(0x9en, BigInt(prompt.length));
  for (const tok of prompt) {
    h = mix64(h, BigInt(tok));
  }
  return h;
}
