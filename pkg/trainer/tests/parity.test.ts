/**
 * Cross-component contract check: weights exported here must produce the
 * same features in the inference runtime, for the same binary batch input.
 * Exercises the weight layouts, naming, padding/stride semantics, shortcut
 * handling, batchnorm convention and normalization constants end to end.
 * Skipped when the runtime package is not importable.
 */

import { execFileSync } from "child_process";
import * as fs from "fs";
import * as os from "os";
import * as path from "path";
import * as tf from "@tensorflow/tfjs";
import { beforeAll, describe, expect, it } from "vitest";

import { initBackend } from "../src/backend";
import { encodeBatch, readBatchFile, syntheticImages } from "../src/data";
import { writeWeightsFile } from "../src/deew";
import {
  PAPER_EXIT_POSITIONS,
  buildGraph,
  exportWeightFile,
  forwardExit,
  forwardStages,
  fusionLogits,
  initVariables,
} from "../src/model";

function pythonAvailable(): boolean {
  try {
    execFileSync("python3", ["-c", "import distree"], { stdio: "pipe" });
    return true;
  } catch {
    return false;
  }
}

const havePython = pythonAvailable();

beforeAll(async () => {
  await initBackend();
});

describe.skipIf(!havePython)("runtime parity", () => {
  it("runtime reproduces exported features and fused logits", () => {
    const dir = fs.mkdtempSync(path.join(os.tmpdir(), "parity-"));
    const graph = buildGraph({
      width: 1, exitPositions: PAPER_EXIT_POSITIONS, classCount: 10, nStudents: 2,
    });
    const store = initVariables(graph);
    // exercise batchnorm running stats with non-trivial values
    for (const [name, v] of store.vars) {
      if (name.endsWith("running_mean")) {
        v.assign(tf.randomNormal(v.shape as number[], 0, 0.05));
      } else if (name.endsWith("running_var")) {
        v.assign(tf.add(tf.ones(v.shape as number[]), 0.3));
      }
    }
    const weightsPath = path.join(dir, "parity.deew");
    writeWeightsFile(weightsPath, exportWeightFile(store, graph));

    const batchPath = path.join(dir, "one.bin");
    const { pixels, labels } = syntheticImages(1, 42);
    fs.writeFileSync(batchPath, encodeBatch(pixels, labels));

    // tfjs side: eval-mode features for both students at exits 1..7
    const ds = readBatchFile(batchPath);
    const x = tf.tensor4d(ds.images, [1, 32, 32, 3]);
    const ctx = { training: false, bnUpdates: [] };
    const feats: number[][] = [];
    const features2d: tf.Tensor2D[] = [];
    for (let i = 0; i < 2; i++) {
      const boundaries = forwardStages(store, graph, i, x, ctx);
      for (let j = 1; j <= 7; j++) {
        const f = forwardExit(store, graph, i, j, boundaries[j - 1], ctx).feature;
        feats.push([...(f.dataSync() as Float32Array)]);
        if (j === 7) features2d.push(f);
      }
    }
    const logitsTs = [...(fusionLogits(store, features2d).dataSync() as Float32Array)];

    const script = `
import json
import numpy as np
from distree.bench import spec_from_metadata
from distree.data import load_cifar10
from distree.model import forward_exit, forward_stage, fusion_forward
from distree.weights import read_weights_file, validate_weights

store, raw = read_weights_file(${JSON.stringify(weightsPath)})
spec = spec_from_metadata(store.metadata)
validate_weights(store, spec)
norm = store.metadata["normalization"]
image = load_cifar10(${JSON.stringify(batchPath)},
                     mean=tuple(norm["mean"]), std=tuple(norm["std"]))[0]
feats = []
finals = []
for i in range(2):
    a = image.pixels
    for j in range(1, 8):
        a = forward_stage(spec, store, i, j, a)
        f = forward_exit(spec, store, i, j, a)
        feats.append([float(v) for v in f])
        if j == 7:
            finals.append(f)
logits = fusion_forward(spec, store, finals)
print(json.dumps({"feats": feats, "logits": [float(v) for v in logits]}))
`;
    const out = execFileSync("python3", ["-c", script], { encoding: "utf8" });
    const py = JSON.parse(out.trim().split("\n").pop() as string);

    expect(py.feats.length).toBe(feats.length);
    let worst = 0;
    for (let k = 0; k < feats.length; k++) {
      for (let v = 0; v < feats[k].length; v++) {
        worst = Math.max(worst, Math.abs(py.feats[k][v] - feats[k][v]));
      }
    }
    for (let v = 0; v < logitsTs.length; v++) {
      worst = Math.max(worst, Math.abs(py.logits[v] - logitsTs[v]));
    }
    expect(worst).toBeLessThan(1e-4);
    store.dispose();
    fs.rmSync(dir, { recursive: true, force: true });
  });
});
