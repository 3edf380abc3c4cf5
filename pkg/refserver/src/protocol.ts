// Request/reply handling for the line protocol. One JSON object per line;
// the server speaks first with a handshake, then answers predict requests.
// A malformed line yields an error reply and the connection keeps serving.

import type { Oracle, Response } from "./oracles.js";

export interface Handshake {
  type: "handshake";
  vocab_size: number;
  mask_id: number;
  eos_id: number;
}

export interface ErrorReply {
  type: "error";
  id: number | null;
  reason: string;
}

export interface PredictReply {
  type: "reply";
  id: number;
  dists: Record<string, number[]>;
}

export type Reply = ErrorReply | PredictReply;

export function handshakeObject(oracle: Oracle): Handshake {
  return {
    type: "handshake",
    vocab_size: oracle.vocab.size,
    mask_id: oracle.vocab.maskId,
    eos_id: oracle.vocab.eosId,
  };
}

function errorReply(id: number | null, reason: string): ErrorReply {
  return { type: "error", id, reason };
}

function isObject(x: unknown): x is Record<string, unknown> {
  return typeof x === "object" && x !== null && !Array.isArray(x);
}

function isToken(x: unknown, size: number): x is number {
  return typeof x === "number" && Number.isInteger(x) && x >= 0 && x < size;
}

// One request in, one reply out, plus the updated id watermark.  Ids must
// rise strictly within a connection; the watermark only advances once the
// id itself is well formed.
export function handleLine(
  oracle: Oracle,
  line: string,
  lastId: number
): [Reply, number] {
  let obj: unknown;
  try {
    obj = JSON.parse(line);
  } catch (e) {
    return [errorReply(null, `request is not valid JSON: ${(e as Error).message}`), lastId];
  }
  if (!isObject(obj)) {
    return [errorReply(null, "request must be a JSON object"), lastId];
  }
  const requestId = obj["id"];
  if (typeof requestId !== "number" || !Number.isInteger(requestId)) {
    return [errorReply(null, "request.id must be an integer"), lastId];
  }
  if (requestId <= lastId) {
    return [
      errorReply(requestId, `request ids must increase; got ${requestId} after ${lastId}`),
      lastId,
    ];
  }
  lastId = requestId;
  if (obj["type"] !== "predict") {
    return [errorReply(requestId, `unknown request type ${JSON.stringify(obj["type"])}`), lastId];
  }
  for (const field of ["prompt", "response", "need"]) {
    if (!(field in obj)) {
      return [errorReply(requestId, `request.${field} is required`), lastId];
    }
  }
  const prompt = obj["prompt"];
  const response = obj["response"];
  const need = obj["need"];
  const size = oracle.vocab.size;
  if (!Array.isArray(prompt) || prompt.some((x) => !isToken(x, size))) {
    return [errorReply(requestId, "request.prompt must be a list of in-vocabulary tokens"), lastId];
  }
  if (!Array.isArray(response) || response.length === 0) {
    return [errorReply(requestId, "request.response must be a non-empty list"), lastId];
  }
  for (let k = 0; k < response.length; k++) {
    const x = response[k];
    if (x === null) continue;
    if (!isToken(x, size)) {
      return [
        errorReply(requestId, `request.response[${k}] must be null or an in-vocabulary token`),
        lastId,
      ];
    }
  }
  if (!Array.isArray(need) || need.length === 0) {
    return [errorReply(requestId, "request.need must be a non-empty list of positions"), lastId];
  }
  if (new Set(need).size !== need.length) {
    return [errorReply(requestId, "request.need repeats a position"), lastId];
  }
  for (const i of need) {
    if (typeof i !== "number" || !Number.isInteger(i) || i < 0 || i >= response.length) {
      return [
        errorReply(requestId, `request.need position ${JSON.stringify(i)} is out of range`),
        lastId,
      ];
    }
    if (response[i] !== null) {
      return [errorReply(requestId, `request.need position ${i} is not masked`), lastId];
    }
  }
  let produced: Map<number, number[]>;
  try {
    produced = oracle.predict(prompt as number[], response as Response);
  } catch (e) {
    return [errorReply(requestId, `oracle rejected the request: ${(e as Error).message}`), lastId];
  }
  const dists: Record<string, number[]> = {};
  const wanted = [...(need as number[])].sort((a, b) => a - b);
  for (const i of wanted) {
    const row = produced.get(i);
    if (row === undefined) {
      return [errorReply(requestId, `oracle produced no distribution for position ${i}`), lastId];
    }
    dists[String(i)] = row;
  }
  return [{ type: "reply", id: requestId, dists }, lastId];
}

// Stateful per-connection wrapper: feed it raw chunks, get reply lines out.
export class Connection {
  private oracle: Oracle;
  private buffer = "";
  private lastId = 0;

  constructor(oracle: Oracle) {
    this.oracle = oracle;
  }

  greeting(): string {
    return JSON.stringify(handshakeObject(this.oracle)) + "\n";
  }

  feed(chunk: string): string[] {
    this.buffer += chunk;
    const lines = this.buffer.split("\n");
    this.buffer = lines.pop() ?? "";
    const replies: string[] = [];
    for (const raw of lines) {
      const line = raw.trim();
      if (!line) continue;
      const [reply, nextId] = handleLine(this.oracle, line, this.lastId);
      this.lastId = nextId;
      replies.push(JSON.stringify(reply) + "\n");
    }
    return replies;
  }
}
