/**
 * Multi-branch WideResNet-16xk in tfjs, mirroring the runtime's graph
 * contract exactly: pre-activation blocks, the stride on the second 3x3
 * conv, a 1x1 projection (with bias) whenever shape or stride changes,
 * residual cells adding the raw cell input, early exits as
 * avgpool -> 1x1 conv -> relu -> global avgpool, and the final exit as
 * bn -> relu -> global avgpool.
 *
 * Variables are keyed by the shared weight-naming contract
 * (s{i}.stage{j}.{layer}.{param} etc.) and stored in tfjs layouts:
 * conv kernels [kh,kw,in,out], fc kernels [in,out]. Export/import
 * transposes to the file's [out,in,kh,kw] / [out,in] layouts.
 */

import * as tf from "@tensorflow/tfjs";

import { TensorRecord, WeightFile } from "./deew";
import { CIFAR10_MEAN, CIFAR10_STD } from "./data";

export interface ArchConfig {
  width: number;
  exitPositions: number[];
  classCount: number;
  nStudents: number;
}

export const PAPER_EXIT_POSITIONS = [1, 4, 6, 9, 11, 14, 16];
const BOUNDARIES = [1, 4, 6, 9, 11, 14, 16];
const FINAL_SPATIAL = 8;

type Layer =
  | { kind: "conv"; name: string; inCh: number; outCh: number; k: number; stride: number; pad: number }
  | { kind: "bn"; name: string; ch: number }
  | { kind: "relu"; name: string }
  | { kind: "avgpool"; name: string; k: number; stride: number }
  | { kind: "gap"; name: string }
  | { kind: "add"; name: string; proj: { name: string; inCh: number; outCh: number; stride: number } | null };

interface CellSpec {
  layers: Layer[];
}

export interface GraphSpec {
  arch: ArchConfig;
  stages: CellSpec[][];
  exits: CellSpec[];
  featureDim: number;
  boundaryShapes: Array<[number, number]>; // [channels, spatial] at each chosen boundary
}

function block(inCh: number, outCh: number, stride: number): CellSpec {
  const proj = stride !== 1 || inCh !== outCh
    ? { name: "proj", inCh, outCh, stride }
    : null;
  return {
    layers: [
      { kind: "bn", name: "bn1", ch: inCh },
      { kind: "relu", name: "relu1" },
      { kind: "conv", name: "conv1", inCh, outCh, k: 3, stride: 1, pad: 1 },
      { kind: "bn", name: "bn2", ch: outCh },
      { kind: "relu", name: "relu2" },
      { kind: "conv", name: "conv2", inCh: outCh, outCh, k: 3, stride, pad: 1 },
      { kind: "add", name: "add", proj },
    ],
  };
}

function prefixCell(cell: CellSpec, prefix: string): CellSpec {
  return {
    layers: cell.layers.map((l) => {
      const renamed: Layer = { ...l, name: `${prefix}${l.name}` } as Layer;
      if (l.kind === "add" && l.proj) {
        (renamed as any).proj = { ...l.proj, name: `${prefix}${l.proj.name}` };
      }
      return renamed;
    }),
  };
}

export function buildGraph(arch: ArchConfig): GraphSpec {
  const { width: k, exitPositions } = arch;
  for (const p of exitPositions) {
    if (!BOUNDARIES.includes(p)) {
      throw new Error(`invalid exit position ${p}; valid boundaries: ${BOUNDARIES}`);
    }
  }
  if (exitPositions[exitPositions.length - 1] !== 16) {
    throw new Error("exit positions must end at 16 (the backbone head)");
  }
  const widths = [16, 16 * k, 32 * k, 64 * k];
  const featureDim = 64 * k;

  const cells: CellSpec[] = [
    { layers: [{ kind: "conv", name: "conv", inCh: 3, outCh: widths[0], k: 3, stride: 1, pad: 1 }] },
  ];
  let ch = widths[0];
  const groupPlan: Array<[number, number]> = [
    [widths[1], 1],
    [widths[2], 2],
    [widths[3], 2],
  ];
  for (const [outCh, stride] of groupPlan) {
    for (const unit of [1, 2]) {
      cells.push(block(ch, outCh, unit === 1 ? stride : 1));
      ch = outCh;
    }
  }

  // channels and spatial size after each cell
  const shapes: Array<[number, number]> = [];
  let curCh = 3;
  let spatial = 32;
  for (const cell of cells) {
    for (const l of cell.layers) {
      if (l.kind === "conv") {
        curCh = l.outCh;
        spatial = Math.floor((spatial + 2 * l.pad - l.k) / l.stride) + 1;
      }
    }
    shapes.push([curCh, spatial]);
  }

  const chosen = exitPositions.map((p) => BOUNDARIES.indexOf(p));
  const stages: CellSpec[][] = [];
  let start = 0;
  for (const idx of chosen) {
    let group = cells.slice(start, idx + 1);
    if (group.length > 1) {
      group = group.map((c, n) => prefixCell(c, `u${n + 1}.`));
    }
    stages.push(group);
    start = idx + 1;
  }

  const boundaryShapes = chosen.map((i) => shapes[i]);
  const exits: CellSpec[] = [];
  for (const [c, h] of boundaryShapes.slice(0, -1)) {
    const layers: Layer[] = [];
    if (h > FINAL_SPATIAL) {
      const kk = h / FINAL_SPATIAL;
      layers.push({ kind: "avgpool", name: "pool", k: kk, stride: kk });
    }
    layers.push(
      { kind: "conv", name: "conv", inCh: c, outCh: featureDim, k: 1, stride: 1, pad: 0 },
      { kind: "relu", name: "relu" },
      { kind: "gap", name: "gap" },
    );
    exits.push({ layers });
  }
  exits.push({
    layers: [
      { kind: "bn", name: "bn", ch: featureDim },
      { kind: "relu", name: "relu" },
      { kind: "gap", name: "gap" },
    ],
  });

  return { arch, stages, exits, featureDim, boundaryShapes };
}

// ---------------------------------------------------------------------------
// Variables

export class VarStore {
  private static counter = 0;

  vars = new Map<string, tf.Variable>();
  private readonly id = VarStore.counter++;

  get(name: string): tf.Variable {
    const v = this.vars.get(name);
    if (!v) throw new Error(`missing variable ${name}`);
    return v;
  }

  make(name: string, init: tf.Tensor, trainable: boolean): tf.Variable {
    // engine-level names must be globally unique; our map keys carry the contract
    const v = tf.variable(init, trainable, `v${this.id}/${name}`);
    this.vars.set(name, v);
    return v;
  }

  trainable(excludePrefix?: string): tf.Variable[] {
    return [...this.vars.entries()]
      .filter(([n, v]) => v.trainable && (!excludePrefix || !n.startsWith(excludePrefix)))
      .map(([, v]) => v);
  }

  dispose(): void {
    for (const v of this.vars.values()) v.dispose();
    this.vars.clear();
  }
}

function heConv(kh: number, kw: number, inCh: number, outCh: number): tf.Tensor {
  return tf.randomNormal([kh, kw, inCh, outCh], 0, Math.sqrt(2 / (kh * kw * inCh)));
}

function initCell(store: VarStore, scope: string, cell: CellSpec,
                  convBiasInit = 0, bnBetaInit = 0): void {
  for (const l of cell.layers) {
    if (l.kind === "conv") {
      store.make(`${scope}.${l.name}.weight`, heConv(l.k, l.k, l.inCh, l.outCh), true);
      store.make(`${scope}.${l.name}.bias`,
                 convBiasInit ? tf.fill([l.outCh], convBiasInit) : tf.zeros([l.outCh]), true);
    } else if (l.kind === "bn") {
      store.make(`${scope}.${l.name}.gamma`, tf.ones([l.ch]), true);
      store.make(`${scope}.${l.name}.beta`,
                 bnBetaInit ? tf.fill([l.ch], bnBetaInit) : tf.zeros([l.ch]), true);
      store.make(`${scope}.${l.name}.running_mean`, tf.zeros([l.ch]), false);
      store.make(`${scope}.${l.name}.running_var`, tf.ones([l.ch]), false);
    } else if (l.kind === "add" && l.proj) {
      const p = l.proj;
      store.make(`${scope}.${p.name}.weight`, heConv(1, 1, p.inCh, p.outCh), true);
      store.make(`${scope}.${p.name}.bias`, tf.zeros([p.outCh]), true);
    }
  }
}

export function initVariables(graph: GraphSpec): VarStore {
  const store = new VarStore();
  const { nStudents, classCount } = graph.arch;
  for (let i = 0; i < nStudents; i++) {
    graph.stages.forEach((stage, j) => {
      for (const cell of stage) initCell(store, `s${i}.stage${j + 1}`, cell);
    });
    graph.exits.forEach((cell, j) => {
      // A positive bias (beta for the final exit, which has no conv) gives
      // every depth's pooled feature a shared component, keeping
      // cross-depth feature differences in a narrow, comparable band.
      initCell(store, `s${i}.exit${j + 1}`, cell, 1.5, 0.75);
    });
  }
  const fanIn = nStudents * graph.featureDim;
  store.make("fusion.fc.weight",
             tf.randomNormal([fanIn, classCount], 0, Math.sqrt(1 / fanIn)), true);
  store.make("fusion.fc.bias", tf.zeros([classCount]), true);
  return store;
}

// ---------------------------------------------------------------------------
// Forward execution

export interface BnUpdate {
  runningMean: tf.Variable;
  runningVar: tf.Variable;
  batchMean: tf.Tensor;
  batchVar: tf.Tensor;
}

export interface ForwardCtx {
  training: boolean;
  bnUpdates: BnUpdate[];
}

function runLayer(store: VarStore, scope: string, l: Layer, x: tf.Tensor4D,
                  cellInput: tf.Tensor4D, ctx: ForwardCtx): tf.Tensor4D {
  if (l.kind === "conv") {
    const w = store.get(`${scope}.${l.name}.weight`) as tf.Tensor4D;
    const b = store.get(`${scope}.${l.name}.bias`);
    const xp = l.pad > 0
      ? tf.pad(x, [[0, 0], [l.pad, l.pad], [l.pad, l.pad], [0, 0]]) as tf.Tensor4D
      : x;
    return tf.add(tf.conv2d(xp, w, l.stride, "valid"), b) as tf.Tensor4D;
  }
  if (l.kind === "bn") {
    const gamma = store.get(`${scope}.${l.name}.gamma`);
    const beta = store.get(`${scope}.${l.name}.beta`);
    const rMean = store.get(`${scope}.${l.name}.running_mean`);
    const rVar = store.get(`${scope}.${l.name}.running_var`);
    if (ctx.training) {
      const mean = tf.mean(x, [0, 1, 2]);
      const variance = tf.mean(tf.square(tf.sub(x, mean)), [0, 1, 2]);
      ctx.bnUpdates.push({
        runningMean: rMean, runningVar: rVar,
        batchMean: tf.keep(mean.clone()), batchVar: tf.keep(variance.clone()),
      });
      return tf.batchNorm(x, mean, variance, beta, gamma, 1e-5) as tf.Tensor4D;
    }
    return tf.batchNorm(x, rMean, rVar, beta, gamma, 1e-5) as tf.Tensor4D;
  }
  if (l.kind === "relu") return tf.relu(x);
  if (l.kind === "avgpool") return tf.avgPool(x, l.k, l.stride, "valid");
  if (l.kind === "gap") throw new Error("gap handled by exit runner");
  // add shortcut
  let shortcut: tf.Tensor4D = cellInput;
  if (l.proj) {
    const w = store.get(`${scope}.${l.proj.name}.weight`) as tf.Tensor4D;
    const b = store.get(`${scope}.${l.proj.name}.bias`);
    shortcut = tf.add(tf.conv2d(cellInput, w, l.proj.stride, "valid"), b) as tf.Tensor4D;
  }
  return tf.add(x, shortcut) as tf.Tensor4D;
}

function runCell(store: VarStore, scope: string, cell: CellSpec, x: tf.Tensor4D,
                 ctx: ForwardCtx): tf.Tensor4D {
  const cellInput = x;
  let out = x;
  for (const l of cell.layers) {
    out = runLayer(store, scope, l, out, cellInput, ctx);
  }
  return out;
}

/** Boundary activations for all stages of one student. */
export function forwardStages(store: VarStore, graph: GraphSpec, student: number,
                              x: tf.Tensor4D, ctx: ForwardCtx): tf.Tensor4D[] {
  const boundaries: tf.Tensor4D[] = [];
  let cur = x;
  graph.stages.forEach((stage, j) => {
    for (const cell of stage) {
      cur = runCell(store, `s${student}.stage${j + 1}`, cell, cur, ctx);
    }
    boundaries.push(cur);
  });
  return boundaries;
}

export interface ExitOutput {
  preMap: tf.Tensor4D; // post-activation map before the global pool, NHWC
  feature: tf.Tensor2D; // [batch, featureDim]
}

/** One exit branch on its boundary activation. */
export function forwardExit(store: VarStore, graph: GraphSpec, student: number,
                            exitIndex: number, boundary: tf.Tensor4D,
                            ctx: ForwardCtx): ExitOutput {
  const scope = `s${student}.exit${exitIndex}`;
  const cell = graph.exits[exitIndex - 1];
  let cur = boundary;
  for (const l of cell.layers) {
    if (l.kind === "gap") break;
    cur = runLayer(store, scope, l, cur, boundary, ctx);
  }
  const feature = tf.mean(cur, [1, 2]) as tf.Tensor2D;
  return { preMap: cur, feature };
}

export function fusionLogits(store: VarStore, features: tf.Tensor2D[]): tf.Tensor2D {
  const stacked = tf.concat(features, 1);
  return tf.add(tf.matMul(stacked, store.get("fusion.fc.weight") as tf.Tensor2D),
                store.get("fusion.fc.bias")) as tf.Tensor2D;
}

export function applyBnUpdates(ctx: ForwardCtx, momentum = 0.9): void {
  for (const u of ctx.bnUpdates) {
    tf.tidy(() => {
      u.runningMean.assign(tf.add(tf.mul(u.runningMean, momentum),
                                  tf.mul(u.batchMean, 1 - momentum)));
      u.runningVar.assign(tf.add(tf.mul(u.runningVar, momentum),
                                 tf.mul(u.batchVar, 1 - momentum)));
    });
    u.batchMean.dispose();
    u.batchVar.dispose();
  }
  ctx.bnUpdates.length = 0;
}

// ---------------------------------------------------------------------------
// Export / import in the shared file layouts

export function metadataFor(graph: GraphSpec, extra: Record<string, unknown> = {}):
    Record<string, unknown> {
  return {
    arch: {
      name: `wrn16-${graph.arch.width}`,
      exit_positions: graph.arch.exitPositions,
      class_count: graph.arch.classCount,
      n_students: graph.arch.nStudents,
      feature_dim: graph.featureDim,
    },
    normalization: { mean: CIFAR10_MEAN, std: CIFAR10_STD },
    ...extra,
  };
}

export function exportTensors(store: VarStore): TensorRecord[] {
  const records: TensorRecord[] = [];
  for (const [name, v] of store.vars) {
    let t: tf.Tensor = v;
    if (name.endsWith(".weight")) {
      if (v.shape.length === 4) {
        t = tf.transpose(v, [3, 2, 0, 1]); // [kh,kw,in,out] -> [out,in,kh,kw]
      } else if (v.shape.length === 2) {
        t = tf.transpose(v, [1, 0]); // [in,out] -> [out,in]
      }
    }
    records.push({
      name,
      shape: t.shape.slice(),
      data: t.dataSync() as Float32Array,
    });
    if (t !== v) t.dispose();
  }
  return records;
}

export function exportWeightFile(store: VarStore, graph: GraphSpec,
                                 extraMeta: Record<string, unknown> = {}): WeightFile {
  return { metadata: metadataFor(graph, extraMeta), tensors: exportTensors(store) };
}

/** Load a weight file (runtime layouts) into tfjs-layout variables. */
export function importWeightFile(file: WeightFile): { graph: GraphSpec; store: VarStore } {
  const arch = (file.metadata as any).arch;
  if (!arch) throw new Error("weight file metadata lacks the arch block");
  const width = parseInt(String(arch.name).replace("wrn16-", ""), 10);
  const graph = buildGraph({
    width,
    exitPositions: arch.exit_positions,
    classCount: arch.class_count,
    nStudents: arch.n_students,
  });
  const store = initVariables(graph);
  const byName = new Map(file.tensors.map((t) => [t.name, t]));
  for (const [name, v] of store.vars) {
    const rec = byName.get(name);
    if (!rec) throw new Error(`weight file missing ${name}`);
    let t: tf.Tensor = tf.tensor(rec.data, rec.shape);
    if (name.endsWith(".weight")) {
      if (rec.shape.length === 4) t = tf.transpose(t, [2, 3, 1, 0]); // [o,i,kh,kw] -> [kh,kw,i,o]
      else if (rec.shape.length === 2) t = tf.transpose(t, [1, 0]);
    }
    if (t.shape.join() !== v.shape.join()) {
      throw new Error(`${name}: file shape [${rec.shape}] does not fit [${v.shape}]`);
    }
    v.assign(t as any);
    t.dispose();
  }
  return { graph, store };
}
