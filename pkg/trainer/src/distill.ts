/**
 * Teacher-side distillation machinery: final-conv filter correlation
 * graph, balanced filter partitioning across students, and the cached
 * teacher targets (temperature-softened labels plus per-partition
 * attention vectors) consumed by the joint loss.
 */

import * as tf from "@tensorflow/tfjs";

import { Dataset } from "./data";
import { ForwardCtx, GraphSpec, VarStore, forwardExit, forwardStages, fusionLogits } from "./model";

/** Mean activation per final-conv filter for every sample: [n, filters]. */
export function filterActivations(store: VarStore, graph: GraphSpec,
                                  data: Dataset, batchSize = 64): Float32Array[] {
  const rows: Float32Array[] = [];
  const m = graph.exits.length;
  for (let off = 0; off < data.n; off += batchSize) {
    const count = Math.min(batchSize, data.n - off);
    tf.tidy(() => {
      const x = tf.tensor4d(
        data.images.subarray(off * 32 * 32 * 3, (off + count) * 32 * 32 * 3),
        [count, 32, 32, 3]);
      const ctx: ForwardCtx = { training: false, bnUpdates: [] };
      const boundaries = forwardStages(store, graph, 0, x, ctx);
      const { preMap } = forwardExit(store, graph, 0, m, boundaries[m - 1], ctx);
      const means = tf.mean(preMap, [1, 2]); // [count, filters]
      const flat = means.dataSync() as Float32Array;
      const filters = means.shape[1] as number;
      for (let i = 0; i < count; i++) {
        rows.push(flat.slice(i * filters, (i + 1) * filters));
      }
    });
  }
  return rows;
}

/**
 * Edge weights between filters: sum over samples of a_i * a_j * |a_i - a_j|.
 * Symmetric with a zero diagonal.
 */
export function buildFilterGraph(activations: Float32Array[]): number[][] {
  if (activations.length === 0) throw new Error("empty activation set");
  const f = activations[0].length;
  const w: number[][] = Array.from({ length: f }, () => new Array(f).fill(0));
  for (const a of activations) {
    for (let i = 0; i < f; i++) {
      for (let j = i + 1; j < f; j++) {
        const v = a[i] * a[j] * Math.abs(a[i] - a[j]);
        w[i][j] += v;
        w[j][i] += v;
      }
    }
  }
  return w;
}

/**
 * Balanced greedy partition that spreads heavy edges: vertices are placed
 * in descending order of incident weight, each into the non-full set where
 * it adds the least intra-set weight. Set sizes differ by at most one.
 */
export function partitionFilters(weights: number[][], n: number): number[][] {
  const f = weights.length;
  if (n < 1) throw new Error("need at least one partition");
  if (n > f) throw new Error(`cannot split ${f} filters into ${n} sets`);
  const cap = Math.ceil(f / n);
  const order = [...Array(f).keys()].sort((a, b) => {
    const sa = weights[a].reduce((x, y) => x + y, 0);
    const sb = weights[b].reduce((x, y) => x + y, 0);
    return sb - sa || a - b;
  });
  const sets: number[][] = Array.from({ length: n }, () => []);
  for (const v of order) {
    let best = -1;
    let bestCost = Infinity;
    for (let s = 0; s < n; s++) {
      if (sets[s].length >= cap) continue;
      // keep sizes within one of each other as we go
      const minLen = Math.min(...sets.map((t) => t.length));
      if (sets[s].length > minLen) continue;
      const cost = sets[s].reduce((acc, u) => acc + weights[v][u], 0);
      if (cost < bestCost - 1e-12 || (Math.abs(cost - bestCost) <= 1e-12 && best === -1)) {
        bestCost = cost;
        best = s;
      }
    }
    if (best === -1) {
      best = sets.findIndex((t) => t.length < cap);
    }
    sets[best].push(v);
  }
  return sets.map((s) => s.sort((a, b) => a - b));
}

export interface TeacherExport {
  softLabels: Float32Array; // [n, classes], softmax(logits / tau)
  attention: Float32Array[]; // per partition: [n, spatial*spatial]
  partitions: number[][];
  tau: number;
  classes: number;
  spatial: number;
}

/** Channelwise sum of squares over a partition, flattened spatially. */
function partitionAttention(preMap: tf.Tensor4D, partition: number[]): tf.Tensor2D {
  const picked = tf.gather(preMap, partition, 3);
  const att = tf.sum(tf.square(picked), 3); // [b, h, w]
  return tf.reshape(att, [preMap.shape[0], -1]) as tf.Tensor2D;
}

export function computeTeacherExport(store: VarStore, graph: GraphSpec, data: Dataset,
                                     partitions: number[][], tau: number,
                                     batchSize = 64): TeacherExport {
  const classes = graph.arch.classCount;
  const m = graph.exits.length;
  const softLabels = new Float32Array(data.n * classes);
  const spatial = 8;
  const attention = partitions.map(() => new Float32Array(data.n * spatial * spatial));
  for (let off = 0; off < data.n; off += batchSize) {
    const count = Math.min(batchSize, data.n - off);
    tf.tidy(() => {
      const x = tf.tensor4d(
        data.images.subarray(off * 32 * 32 * 3, (off + count) * 32 * 32 * 3),
        [count, 32, 32, 3]);
      const ctx: ForwardCtx = { training: false, bnUpdates: [] };
      const boundaries = forwardStages(store, graph, 0, x, ctx);
      const { preMap, feature } = forwardExit(store, graph, 0, m, boundaries[m - 1], ctx);
      const logits = fusionLogits(store, [feature]);
      const soft = tf.softmax(tf.div(logits, tau));
      softLabels.set(soft.dataSync() as Float32Array, off * classes);
      partitions.forEach((p, pi) => {
        const att = partitionAttention(preMap, p);
        attention[pi].set(att.dataSync() as Float32Array, off * spatial * spatial);
      });
    });
  }
  return { softLabels, attention, partitions, tau, classes, spatial };
}

export { partitionAttention };
