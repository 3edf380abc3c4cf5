// Reference predictor server for the line-delimited decode protocol.
//
//   node dist/server.js                                  # toy model, stdio
//   node dist/server.js --mode oracle --oracle m.json    # oracle file, stdio
//   node dist/server.js --transport tcp --port 9741      # TCP instead
//
// Each connection gets the handshake first, then request/reply lines.  EOF
// on stdin ends the process with status 0; a TCP server keeps accepting.

import { readFileSync } from "node:fs";
import net from "node:net";

import { oracleFromJson, parseOracleText, toyOracle, type Oracle } from "./oracles.js";
import { Connection } from "./protocol.js";

interface ServerArgs {
  mode: "toy" | "oracle";
  oracle: string | null;
  transport: "stdio" | "tcp";
  host: string;
  port: number;
  seed: number;
}

const USAGE =
  "usage: server [--mode toy|oracle] [--oracle FILE] [--seed N] " +
  "[--transport stdio|tcp] [--host HOST] [--port PORT]";

function parseArgs(argv: string[]): ServerArgs {
  const result: ServerArgs = {
    mode: "toy",
    oracle: null,
    transport: "stdio",
    host: "127.0.0.1",
    port: 9741,
    seed: 0,
  };
  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i];
    const next = () => {
      i += 1;
      if (i >= argv.length) {
        throw new Error(`${arg} needs a value`);
      }
      return argv[i];
    };
    if (arg === "--mode") {
      const value = next();
      if (value !== "toy" && value !== "oracle") {
        throw new Error(`--mode must be toy or oracle, got ${value}`);
      }
      result.mode = value;
    } else if (arg === "--oracle") {
      result.oracle = next();
    } else if (arg === "--transport") {
      const value = next();
      if (value !== "stdio" && value !== "tcp") {
        throw new Error(`--transport must be stdio or tcp, got ${value}`);
      }
      result.transport = value;
    } else if (arg === "--host") {
      result.host = next();
    } else if (arg === "--port") {
      result.port = parseInt(next(), 10);
      if (!Number.isInteger(result.port) || result.port < 0 || result.port > 65535) {
        throw new Error("--port must be an integer in 0..65535");
      }
    } else if (arg === "--seed") {
      result.seed = parseInt(next(), 10);
      if (!Number.isInteger(result.seed)) {
        throw new Error("--seed must be an integer");
      }
    } else if (arg === "--help" || arg === "-h") {
      console.log(USAGE);
      process.exit(0);
    } else {
      throw new Error(`unknown argument ${arg}`);
    }
  }
  if (result.mode === "oracle" && result.oracle === null) {
    throw new Error("--mode oracle needs --oracle FILE");
  }
  return result;
}

function loadOracle(args: ServerArgs): Oracle {
  if (args.mode === "toy") {
    return toyOracle(args.seed);
  }
  const text = readFileSync(args.oracle as string, "utf-8");
  return oracleFromJson(parseOracleText(text));
}

function serveStdio(oracle: Oracle): void {
  const conn = new Connection(oracle);
  process.stdout.write(conn.greeting());
  process.stdin.setEncoding("utf-8");
  process.stdin.on("data", (chunk: string) => {
    for (const reply of conn.feed(chunk)) {
      process.stdout.write(reply);
    }
  });
  process.stdin.on("end", () => {
    process.exit(0);
  });
}

function serveTcp(oracle: Oracle, host: string, port: number): void {
  const server = net.createServer((socket) => {
    const conn = new Connection(oracle);
    socket.setEncoding("utf-8");
    socket.write(conn.greeting());
    socket.on("data", (chunk: string) => {
      for (const reply of conn.feed(chunk)) {
        socket.write(reply);
      }
    });
    socket.on("error", () => {
      socket.destroy();
    });
  });
  server.listen(port, host, () => {
    const addr = server.address() as net.AddressInfo;
    console.error(`listening on ${host}:${addr.port}`);
  });
}

function main(): void {
  let args: ServerArgs;
  try {
    args = parseArgs(process.argv.slice(2));
  } catch (e) {
    console.error((e as Error).message);
    console.error(USAGE);
    process.exit(2);
  }
  let oracle: Oracle;
  try {
    oracle = loadOracle(args);
  } catch (e) {
    console.error(`cannot load oracle: ${(e as Error).message}`);
    process.exit(2);
  }
  if (args.transport === "tcp") {
    serveTcp(oracle, args.host, args.port);
  } else {
    serveStdio(oracle);
  }
}

main();
