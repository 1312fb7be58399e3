/**
 * Training pipeline: teacher fixture, filter partitioning, joint
 * multi-branch distillation of the unified student model, post-hoc fusion
 * head fitting, evaluation, and export in the shared weight format.
 *
 * Branch predictions during joint training come from per-branch auxiliary
 * heads over the students' concatenated features (training-only, never
 * exported). The deployable fusion head is fitted afterwards on frozen
 * features drawn from every branch depth, so a single head serves
 * mixed-depth fusion at inference time.
 */

import * as tf from "@tensorflow/tfjs";

import { Dataset } from "./data";
import { TeacherExport } from "./distill";
import {
  ArchConfig,
  ForwardCtx,
  GraphSpec,
  VarStore,
  applyBnUpdates,
  buildGraph,
  forwardExit,
  forwardStages,
  fusionLogits,
  initVariables,
} from "./model";
import { BranchInputs, LossConfig, hardCrossEntropy, jointLoss } from "./loss";

export interface TrainConfig {
  epochs: number;
  batchSize: number;
  learningRate: number;
  momentum: number;
  decayAt: number[]; // epoch indices where lr *= 0.2
  seed: number;
  loss: LossConfig;
}

function batchTensors(data: Dataset, idx: number[], off: number, count: number):
    { x: tf.Tensor4D; y: tf.Tensor1D; rows: number[] } {
  const rows = idx.slice(off, off + count);
  const imgs = new Float32Array(count * 32 * 32 * 3);
  const labels = new Int32Array(count);
  rows.forEach((r, i) => {
    imgs.set(data.images.subarray(r * 3072, (r + 1) * 3072), i * 3072);
    labels[i] = data.labels[r];
  });
  return {
    x: tf.tensor4d(imgs, [count, 32, 32, 3]),
    y: tf.tensor1d(labels, "int32"),
    rows,
  };
}

/** Scale gradients so their global norm stays below maxNorm. */
function clipGradsInPlace(grads: Record<string, tf.Tensor>, maxNorm: number): void {
  tf.tidy(() => {
    let sq = 0;
    for (const g of Object.values(grads)) {
      sq += tf.sum(tf.square(g)).dataSync()[0];
    }
    const norm = Math.sqrt(sq);
    if (norm > maxNorm) {
      const scale = maxNorm / norm;
      for (const [k, g] of Object.entries(grads)) {
        const clipped = tf.mul(g, scale);
        g.dispose();
        grads[k] = tf.keep(clipped);
      }
    }
  });
}

function shuffled(n: number, seed: number): number[] {
  const idx = [...Array(n).keys()];
  let state = seed >>> 0 || 1;
  const rand = () => {
    state ^= state << 13;
    state ^= state >>> 17;
    state ^= state << 5;
    return ((state >>> 0) % 1_000_000) / 1_000_000;
  };
  for (let i = n - 1; i > 0; i--) {
    const j = Math.floor(rand() * (i + 1));
    [idx[i], idx[j]] = [idx[j], idx[i]];
  }
  return idx;
}

// ---------------------------------------------------------------------------
// Teacher

export function trainTeacher(data: Dataset, arch: ArchConfig, cfg: TrainConfig):
    { graph: GraphSpec; store: VarStore; lossCurve: number[] } {
  const graph = buildGraph(arch);
  const store = initVariables(graph);
  const trainables = store.trainable();
  let lr = cfg.learningRate;
  const lossCurve: number[] = [];
  for (let epoch = 0; epoch < cfg.epochs; epoch++) {
    if (cfg.decayAt.includes(epoch)) lr *= 0.2;
    const optimizer = tf.train.momentum(lr, cfg.momentum);
    const order = shuffled(data.n, cfg.seed + epoch);
    let epochLoss = 0;
    let batches = 0;
    for (let off = 0; off < data.n; off += cfg.batchSize) {
      const count = Math.min(cfg.batchSize, data.n - off);
      const { x, y } = batchTensors(data, order, off, count);
      const ctx: ForwardCtx = { training: true, bnUpdates: [] };
      const { value, grads } = tf.variableGrads(() => tf.tidy(() => {
        const boundaries = forwardStages(store, graph, 0, x, ctx);
        const m = graph.exits.length;
        const { feature } = forwardExit(store, graph, 0, m, boundaries[m - 1], ctx);
        const logits = fusionLogits(store, [feature]);
        return hardCrossEntropy(y, logits);
      }), trainables);
      clipGradsInPlace(grads, 5.0);
      optimizer.applyGradients(grads as any);
      applyBnUpdates(ctx);
      epochLoss += value.dataSync()[0];
      batches += 1;
      value.dispose();
      Object.values(grads).forEach((g) => g.dispose());
      x.dispose();
      y.dispose();
    }
    optimizer.dispose();
    lossCurve.push(epochLoss / batches);
  }
  return { graph, store, lossCurve };
}

/**
 * Replace batchnorm running statistics with statistics pooled over the
 * whole dataset (one training-mode sweep). Short desk-scale runs give the
 * EMA too few updates to settle, which otherwise compounds into eval-mode
 * error at the deep exits.
 */
export function calibrateBnStats(store: VarStore, graph: GraphSpec, data: Dataset,
                                 batchSize = 64): void {
  interface Acc { meanSum: tf.Tensor; sqSum: tf.Tensor; count: number;
                  runningMean: tf.Variable; runningVar: tf.Variable; }
  const accs = new Map<tf.Variable, Acc>();
  const m = graph.exits.length;
  for (let off = 0; off < data.n; off += batchSize) {
    const count = Math.min(batchSize, data.n - off);
    const ctx: ForwardCtx = { training: true, bnUpdates: [] };
    tf.tidy(() => {
      const x = tf.tensor4d(
        data.images.subarray(off * 3072, (off + count) * 3072), [count, 32, 32, 3]);
      for (let i = 0; i < graph.arch.nStudents; i++) {
        const boundaries = forwardStages(store, graph, i, x, ctx);
        forwardExit(store, graph, i, m, boundaries[m - 1], ctx);
      }
    });
    for (const u of ctx.bnUpdates) {
      const prev = accs.get(u.runningMean);
      const sq = tf.tidy(() => tf.keep(tf.add(u.batchVar, tf.square(u.batchMean))));
      if (!prev) {
        accs.set(u.runningMean, {
          meanSum: tf.keep(u.batchMean.clone()), sqSum: sq, count: 1,
          runningMean: u.runningMean, runningVar: u.runningVar,
        });
      } else {
        const nm = tf.tidy(() => tf.keep(tf.add(prev.meanSum, u.batchMean)));
        const ns = tf.tidy(() => tf.keep(tf.add(prev.sqSum, sq)));
        prev.meanSum.dispose();
        prev.sqSum.dispose();
        sq.dispose();
        prev.meanSum = nm;
        prev.sqSum = ns;
        prev.count += 1;
      }
      u.batchMean.dispose();
      u.batchVar.dispose();
    }
  }
  for (const acc of accs.values()) {
    tf.tidy(() => {
      const mean = tf.div(acc.meanSum, acc.count);
      const variance = tf.sub(tf.div(acc.sqSum, acc.count), tf.square(mean));
      acc.runningMean.assign(mean);
      acc.runningVar.assign(tf.maximum(variance, 1e-6));
    });
    acc.meanSum.dispose();
    acc.sqSum.dispose();
  }
}


/** Fused top-1 accuracy with features taken at one branch depth. */
export function accuracyAtBranch(store: VarStore, graph: GraphSpec, data: Dataset,
                                 branch: number, batchSize = 64): number {
  let correct = 0;
  for (let off = 0; off < data.n; off += batchSize) {
    const count = Math.min(batchSize, data.n - off);
    tf.tidy(() => {
      const x = tf.tensor4d(
        data.images.subarray(off * 3072, (off + count) * 3072), [count, 32, 32, 3]);
      const ctx: ForwardCtx = { training: false, bnUpdates: [] };
      const features: tf.Tensor2D[] = [];
      for (let i = 0; i < graph.arch.nStudents; i++) {
        const boundaries = forwardStages(store, graph, i, x, ctx);
        features.push(forwardExit(store, graph, i, branch, boundaries[branch - 1], ctx).feature);
      }
      const pred = tf.argMax(fusionLogits(store, features), 1).dataSync();
      for (let i = 0; i < count; i++) {
        if (pred[i] === data.labels[off + i]) correct += 1;
      }
    });
  }
  return (100 * correct) / data.n;
}

// ---------------------------------------------------------------------------
// Joint student training

export interface JointResult {
  graph: GraphSpec;
  store: VarStore;
  branchLossCurves: number[][];
}

export function trainStudents(trainData: Dataset, teacher: TeacherExport,
                              arch: ArchConfig, cfg: TrainConfig): JointResult {
  const graph = buildGraph(arch);
  const store = initVariables(graph);
  const m = graph.exits.length;
  const n = arch.nStudents;
  const classes = arch.classCount;
  const spatial2 = teacher.spatial * teacher.spatial;

  // One fusion head decodes every branch depth during joint training. The
  // shared decoder is what aligns the exits' feature spaces, which both
  // mixed-depth fusion and the feature-difference measure rely on.
  const trainables = store.trainable();

  const branchLossCurves: number[][] = Array.from({ length: m }, () => []);
  let lr = cfg.learningRate;
  for (let epoch = 0; epoch < cfg.epochs; epoch++) {
    if (cfg.decayAt.includes(epoch)) lr *= 0.2;
    const optimizer = tf.train.momentum(lr, cfg.momentum);
    const order = shuffled(trainData.n, cfg.seed + 1000 + epoch);
    const sums = new Array(m).fill(0);
    let batches = 0;
    for (let off = 0; off < trainData.n; off += cfg.batchSize) {
      const count = Math.min(cfg.batchSize, trainData.n - off);
      const { x, y, rows } = batchTensors(trainData, order, off, count);
      const soft = tf.tensor2d(
        Float32Array.from(rows.flatMap((r) => [...teacher.softLabels.subarray(
          r * classes, (r + 1) * classes)])), [count, classes]);
      const teacherAtt = teacher.attention.map((att) => tf.tensor2d(
        Float32Array.from(rows.flatMap((r) => [...att.subarray(
          r * spatial2, (r + 1) * spatial2)])), [count, spatial2]));

      const ctx: ForwardCtx = { training: true, bnUpdates: [] };
      const kept: tf.Scalar[] = [];
      const { value, grads } = tf.variableGrads(() => tf.tidy(() => {
        const branchInputs: BranchInputs[] = [];
        const perStudent = [...Array(n).keys()].map((i) =>
          forwardStages(store, graph, i, x, ctx));
        for (let j = 1; j <= m; j++) {
          const feats: tf.Tensor2D[] = [];
          const atts: tf.Tensor2D[] = [];
          for (let i = 0; i < n; i++) {
            const out = forwardExit(store, graph, i, j, perStudent[i][j - 1], ctx);
            feats.push(out.feature);
            const att = tf.reshape(tf.sum(tf.square(out.preMap), 3),
                                   [count, -1]) as tf.Tensor2D;
            atts.push(att);
          }
          const logits = fusionLogits(store, feats);
          branchInputs.push({ logits, studentAttentions: atts });
        }
        const { total, perBranch } = jointLoss(branchInputs, y, soft, teacherAtt, cfg.loss);
        perBranch.forEach((l) => kept.push(tf.keep(l.clone()) as tf.Scalar));
        return total;
      }), trainables);
      clipGradsInPlace(grads, 5.0);
      optimizer.applyGradients(grads as any);
      applyBnUpdates(ctx);
      kept.forEach((l, j) => {
        sums[j] += l.dataSync()[0];
        l.dispose();
      });
      batches += 1;
      value.dispose();
      Object.values(grads).forEach((g) => g.dispose());
      x.dispose();
      y.dispose();
      soft.dispose();
      teacherAtt.forEach((t) => t.dispose());
    }
    optimizer.dispose();
    for (let j = 0; j < m; j++) branchLossCurves[j].push(sums[j] / batches);
  }
  return { graph, store, branchLossCurves };
}
