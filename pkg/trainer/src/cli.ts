/**
 * Pipeline entry points.
 *
 *   make-data     write procedural train/test batches in the binary layout
 *   make-teacher  train the desk-scale teacher fixture and export it
 *   train         joint-train students from a teacher checkpoint + batches
 *   desk          full desk-scale pipeline into an artifacts directory
 */

import * as fs from "fs";
import * as path from "path";
import yargs from "yargs";
import { hideBin } from "yargs/helpers";

import { initBackend } from "./backend";
import { Dataset, readBatchFile, writeSyntheticBatch } from "./data";
import { canonicalJson, encodeWeights, readWeightsFile, writeWeightsFile } from "./deew";
import {
  buildFilterGraph,
  computeTeacherExport,
  filterActivations,
  partitionFilters,
} from "./distill";
import { DEFAULT_BRANCH_WEIGHTS } from "./loss";
import {
  PAPER_EXIT_POSITIONS,
  exportWeightFile,
  importWeightFile,
} from "./model";
import {
  TrainConfig,
  accuracyAtBranch,
  calibrateBnStats,
  trainStudents,
  trainTeacher,
} from "./train";

interface DeskOptions {
  out: string;
  trainN: number;
  testN: number;
  teacherEpochs: number;
  studentEpochs: number;
  batch: number;
  lr: number;
  seed: number;
  width: number;
  teacherWidth: number;
  students: number;
  alpha: number;
  beta: number;
  tau: number;
  noise: number;
}

const DESK_DEFAULTS: DeskOptions = {
  out: "../artifacts/desk",
  trainN: 512,
  testN: 512,
  teacherEpochs: 14,
  studentEpochs: 16,
  batch: 32,
  lr: 0.05,
  seed: 7,
  width: 1,
  teacherWidth: 1, // desk profile; the full profile uses the x4 teacher
  students: 2,
  alpha: 0.9,
  beta: 100,
  tau: 4,
  noise: 0.15,
};

function trainConfig(o: DeskOptions, epochs: number): TrainConfig {
  return {
    epochs,
    batchSize: o.batch,
    learningRate: o.lr,
    momentum: 0.9,
    decayAt: [Math.floor(epochs * 0.6), Math.floor(epochs * 0.85)],
    seed: o.seed,
    loss: {
      alpha: o.alpha,
      beta: o.beta,
      tau: o.tau,
      branchWeights: DEFAULT_BRANCH_WEIGHTS,
    },
  };
}

export async function runDesk(o: DeskOptions): Promise<Record<string, unknown>> {
  const backend = await initBackend();
  fs.mkdirSync(o.out, { recursive: true });
  const t0 = Date.now();

  const trainPath = path.join(o.out, "train.bin");
  const testPath = path.join(o.out, "test.bin");
  writeSyntheticBatch(trainPath, o.trainN, o.seed, o.noise);
  writeSyntheticBatch(testPath, o.testN, o.seed + 1, o.noise);
  const trainData = readBatchFile(trainPath);
  const testData = readBatchFile(testPath);
  console.log(`[desk] backend=${backend} train=${trainData.n} test=${testData.n}`);

  // teacher fixture (single-exit backbone)
  const teacherArch = {
    width: o.teacherWidth, exitPositions: [16], classCount: 10, nStudents: 1,
  };
  const teacher = trainTeacher(trainData, teacherArch, trainConfig(o, o.teacherEpochs));
  calibrateBnStats(teacher.store, teacher.graph, trainData);
  const teacherAcc = accuracyAtBranch(teacher.store, teacher.graph, testData, 1);
  console.log(`[desk] teacher test accuracy ${teacherAcc.toFixed(2)}%`);
  writeWeightsFile(path.join(o.out, "teacher.deew"),
                   exportWeightFile(teacher.store, teacher.graph,
                                    { role: "teacher-fixture" }));

  // filter partitioning over the teacher's final-conv activations
  const acts = filterActivations(teacher.store, teacher.graph, trainData);
  const graphW = buildFilterGraph(acts);
  const partitions = partitionFilters(graphW, o.students);
  console.log(`[desk] partition sizes: ${partitions.map((p) => p.length).join(", ")}`);

  const teacherExport = computeTeacherExport(
    teacher.store, teacher.graph, trainData, partitions, o.tau);
  // cache the export in the weight-file container for reuse
  fs.writeFileSync(path.join(o.out, "teacher_export.deew"), encodeWeights({
    metadata: { tau: o.tau, partitions, kind: "teacher-export" },
    tensors: [
      { name: "soft_labels", shape: [trainData.n, 10], data: teacherExport.softLabels },
      ...teacherExport.attention.map((att, i) => ({
        name: `attention.p${i}`,
        shape: [trainData.n, teacherExport.spatial * teacherExport.spatial],
        data: att,
      })),
    ],
  }));

  // joint multi-branch distillation
  const studentArch = {
    width: o.width, exitPositions: PAPER_EXIT_POSITIONS,
    classCount: 10, nStudents: o.students,
  };
  const joint = trainStudents(trainData, teacherExport, studentArch,
                              trainConfig(o, o.studentEpochs));
  calibrateBnStats(joint.store, joint.graph, trainData);
  joint.branchLossCurves.forEach((curve, j) => {
    console.log(`[desk] branch ${j + 1} loss ${curve[0].toFixed(3)} -> ` +
                curve[curve.length - 1].toFixed(3));
  });

  const branchAcc: number[] = [];
  for (let j = 1; j <= joint.graph.exits.length; j++) {
    branchAcc.push(accuracyAtBranch(joint.store, joint.graph, testData, j));
  }
  console.log(`[desk] branch accuracies: ${branchAcc.map((a) => a.toFixed(1)).join(", ")}`);

  const trainMeta = {
    trained: {
      alpha: o.alpha, beta: o.beta, tau: o.tau,
      branch_weights: DEFAULT_BRANCH_WEIGHTS,
      epochs: o.studentEpochs, batch_size: o.batch,
      learning_rate: o.lr, momentum: 0.9, seed: o.seed,
      backend,
    },
  };
  writeWeightsFile(path.join(o.out, "weights.deew"),
                   exportWeightFile(joint.store, joint.graph, trainMeta));

  const metrics = {
    teacher_test_accuracy_pct: teacherAcc,
    teacher_loss_curve: teacher.lossCurve,
    branch_loss_curves: joint.branchLossCurves,
    branch_test_accuracy_pct: branchAcc,
    partition_sizes: partitions.map((p) => p.length),
    config: { ...o, branch_weights: DEFAULT_BRANCH_WEIGHTS, backend },
    elapsed_seconds: (Date.now() - t0) / 1000,
  };
  fs.writeFileSync(path.join(o.out, "metrics.json"),
                   JSON.stringify(metrics, null, 2) + "\n");
  console.log(`[desk] wrote weights.deew, teacher.deew, teacher_export.deew, ` +
              `metrics.json, train.bin, test.bin to ${o.out} ` +
              `(${metrics.elapsed_seconds.toFixed(0)}s)`);
  teacher.store.dispose();
  joint.store.dispose();
  return metrics;
}

async function runTrain(args: any): Promise<void> {
  const backend = await initBackend();
  console.log(`[train] backend=${backend}`);
  const o: DeskOptions = { ...DESK_DEFAULTS, ...args };
  const trainData: Dataset = readBatchFile(args.data);
  const teacherFile = readWeightsFile(args.teacher);
  const { graph: tGraph, store: tStore } = importWeightFile(teacherFile);
  const acts = filterActivations(tStore, tGraph, trainData);
  const partitions = partitionFilters(buildFilterGraph(acts), o.students);
  const teacherExport = computeTeacherExport(tStore, tGraph, trainData, partitions, o.tau);
  const studentArch = {
    width: o.width, exitPositions: PAPER_EXIT_POSITIONS,
    classCount: 10, nStudents: o.students,
  };
  const joint = trainStudents(trainData, teacherExport, studentArch,
                              trainConfig(o, o.studentEpochs));
  calibrateBnStats(joint.store, joint.graph, trainData);
  writeWeightsFile(args.outWeights, exportWeightFile(joint.store, joint.graph, {
    trained: { alpha: o.alpha, beta: o.beta, tau: o.tau, backend },
  }));
  fs.writeFileSync(args.outMetrics, JSON.stringify({
    branch_loss_curves: joint.branchLossCurves,
  }, null, 2) + "\n");
  console.log(`[train] wrote ${args.outWeights} and ${args.outMetrics}`);
}

export function main(argv: string[]): Promise<unknown> {
  return Promise.resolve(yargs(argv)
    .command("make-data <path>", "write a procedural batch file",
             (y) => y.positional("path", { type: "string", demandOption: true })
               .option("n", { type: "number", default: 512 })
               .option("seed", { type: "number", default: 7 })
               .option("noise", { type: "number", default: 0.15 }),
             (a) => {
               writeSyntheticBatch(a.path as string, a.n, a.seed, a.noise);
               console.log(`wrote ${a.n} records to ${a.path}`);
             })
    .command("make-teacher", "train and export the desk teacher fixture",
             (y) => y.option("data", { type: "string", demandOption: true })
               .option("out", { type: "string", demandOption: true })
               .option("epochs", { type: "number", default: DESK_DEFAULTS.teacherEpochs })
               .option("width", { type: "number", default: 1 })
               .option("seed", { type: "number", default: 7 }),
             async (a) => {
               await initBackend();
               const data = readBatchFile(a.data);
               const o = { ...DESK_DEFAULTS, seed: a.seed };
               const arch = { width: a.width, exitPositions: [16],
                              classCount: 10, nStudents: 1 };
               const t = trainTeacher(data, arch, trainConfig(o, a.epochs));
               writeWeightsFile(a.out, exportWeightFile(t.store, t.graph,
                                                        { role: "teacher-fixture" }));
               console.log(`wrote ${a.out}`);
             })
    .command("train", "joint-train students from a teacher checkpoint",
             (y) => y.option("data", { type: "string", demandOption: true })
               .option("teacher", { type: "string", demandOption: true })
               .option("out-weights", { type: "string", demandOption: true })
               .option("out-metrics", { type: "string", demandOption: true })
               .option("student-epochs", { type: "number",
                                           default: DESK_DEFAULTS.studentEpochs })
               .option("seed", { type: "number", default: 7 }),
             (a) => runTrain({ ...a, outWeights: a["out-weights"],
                               outMetrics: a["out-metrics"],
                               studentEpochs: a["student-epochs"] }))
    .command("desk", "full desk-scale pipeline",
             (y) => y.option("out", { type: "string", default: DESK_DEFAULTS.out })
               .option("train-n", { type: "number", default: DESK_DEFAULTS.trainN })
               .option("test-n", { type: "number", default: DESK_DEFAULTS.testN })
               .option("teacher-epochs", { type: "number",
                                           default: DESK_DEFAULTS.teacherEpochs })
               .option("student-epochs", { type: "number",
                                           default: DESK_DEFAULTS.studentEpochs })
               .option("seed", { type: "number", default: DESK_DEFAULTS.seed }),
             async (a) => {
               await runDesk({ ...DESK_DEFAULTS, out: a.out, trainN: a["train-n"],
                               testN: a["test-n"], teacherEpochs: a["teacher-epochs"],
                               studentEpochs: a["student-epochs"], seed: a.seed });
             })
    .demandCommand(1)
    .strict()
    .parse());
}

if (require.main === module) {
  main(hideBin(process.argv)).catch((err) => {
    console.error(err);
    process.exit(1);
  });
}
