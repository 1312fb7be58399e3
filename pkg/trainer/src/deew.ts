/**
 * Binary weight file shared with the inference runtime.
 *
 * Layout (little-endian): magic "DEEW", version u32, metadata length u32 +
 * UTF-8 JSON, tensor count u32, then per tensor: name length u16 + name,
 * rank u8, dims u32 each, raw float32 data. Tensor bytes are copied
 * verbatim in both directions.
 */

import * as fs from "fs";

export interface TensorRecord {
  name: string;
  shape: number[];
  data: Float32Array;
}

export interface WeightFile {
  metadata: Record<string, unknown>;
  tensors: TensorRecord[];
}

export const MAGIC = "DEEW";
export const FORMAT_VERSION = 1;

/** JSON with recursively sorted keys and no whitespace. */
export function canonicalJson(value: unknown): string {
  if (Array.isArray(value)) {
    return "[" + value.map(canonicalJson).join(",") + "]";
  }
  if (value !== null && typeof value === "object") {
    const keys = Object.keys(value as object).sort();
    const body = keys.map(
      (k) => JSON.stringify(k) + ":" + canonicalJson((value as any)[k]));
    return "{" + body.join(",") + "}";
  }
  return JSON.stringify(value);
}

export function encodeWeights(file: WeightFile): Buffer {
  const parts: Buffer[] = [Buffer.from(MAGIC, "ascii")];
  const u32 = (v: number) => {
    const b = Buffer.alloc(4);
    b.writeUInt32LE(v >>> 0);
    return b;
  };
  parts.push(u32(FORMAT_VERSION));
  const meta = Buffer.from(canonicalJson(file.metadata), "utf8");
  parts.push(u32(meta.length), meta);
  parts.push(u32(file.tensors.length));
  for (const t of file.tensors) {
    const name = Buffer.from(t.name, "utf8");
    if (name.length > 0xffff) throw new Error(`tensor name too long: ${t.name}`);
    const nlen = Buffer.alloc(2);
    nlen.writeUInt16LE(name.length);
    parts.push(nlen, name);
    const expected = t.shape.reduce((a, b) => a * b, 1);
    if (t.data.length !== expected) {
      throw new Error(`${t.name}: ${t.data.length} values for shape [${t.shape}]`);
    }
    if (t.shape.length < 1 || t.shape.length > 4) {
      throw new Error(`${t.name}: rank ${t.shape.length} outside 1..4`);
    }
    const rank = Buffer.alloc(1);
    rank.writeUInt8(t.shape.length);
    parts.push(rank);
    const dims = Buffer.alloc(4 * t.shape.length);
    t.shape.forEach((d, i) => dims.writeUInt32LE(d, 4 * i));
    parts.push(dims);
    parts.push(Buffer.from(t.data.buffer, t.data.byteOffset, t.data.byteLength));
  }
  return Buffer.concat(parts);
}

export function decodeWeights(buf: Buffer): WeightFile {
  let pos = 0;
  const take = (n: number, what: string) => {
    if (pos + n > buf.length) {
      throw new Error(`truncated weight file: needed ${n} bytes for ${what} at ${pos}`);
    }
    const out = buf.subarray(pos, pos + n);
    pos += n;
    return out;
  };
  if (take(4, "magic").toString("ascii") !== MAGIC) {
    throw new Error("bad magic, not a weight file");
  }
  const version = take(4, "version").readUInt32LE();
  if (version !== FORMAT_VERSION) {
    throw new Error(`unsupported weight format version ${version}`);
  }
  const metaLen = take(4, "metadata length").readUInt32LE();
  const metadata = metaLen ? JSON.parse(take(metaLen, "metadata").toString("utf8")) : {};
  const count = take(4, "tensor count").readUInt32LE();
  const tensors: TensorRecord[] = [];
  const seen = new Set<string>();
  for (let i = 0; i < count; i++) {
    const nameLen = take(2, `name length ${i}`).readUInt16LE();
    const name = take(nameLen, `name ${i}`).toString("utf8");
    if (seen.has(name)) throw new Error(`duplicate tensor name ${name}`);
    seen.add(name);
    const rank = take(1, `rank of ${name}`).readUInt8();
    if (rank < 1 || rank > 4) throw new Error(`${name}: rank ${rank} outside 1..4`);
    const shape: number[] = [];
    const dims = take(4 * rank, `dims of ${name}`);
    for (let d = 0; d < rank; d++) shape.push(dims.readUInt32LE(4 * d));
    const n = shape.reduce((a, b) => a * b, 1);
    const raw = take(4 * n, `data of ${name}`);
    // copy into an aligned standalone buffer
    const data = new Float32Array(n);
    for (let v = 0; v < n; v++) data[v] = raw.readFloatLE(4 * v);
    tensors.push({ name, shape, data });
  }
  return { metadata, tensors };
}

export function writeWeightsFile(path: string, file: WeightFile): void {
  fs.writeFileSync(path, encodeWeights(file));
}

export function readWeightsFile(path: string): WeightFile {
  return decodeWeights(fs.readFileSync(path));
}
