/**
 * The joint training objective. Per branch j:
 *
 *   L_j = (1-alpha) * H(y, P_j) + alpha * H(P_T^tau, P_j^tau)
 *         + beta * sum over partitions of
 *             || v_T / ||v_T|| - v_{S,j} / ||v_{S,j}|| ||^2
 *
 * where P_j comes from the branch-j head over the students' concatenated
 * features, the soft targets are the teacher's temperature-tau softmax,
 * and the attention vectors v are channelwise squared sums of the
 * respective feature maps (teacher: its partition slice, student: its
 * branch map). The total objective is sum_j w_j * L_j. With a single
 * branch and unit weight this reduces to the per-student distillation
 * loss the partitioning scheme ships with.
 */

import * as tf from "@tensorflow/tfjs";

export interface LossConfig {
  alpha: number; // soft/hard label mix
  beta: number; // attention-transfer weight
  tau: number; // distillation temperature
  branchWeights: number[];
}

export const DEFAULT_BRANCH_WEIGHTS = [1, 1, 1.1, 1.4, 1.4, 1.3, 1.2];

export function hardCrossEntropy(labels: tf.Tensor1D, logits: tf.Tensor2D): tf.Scalar {
  const oneHot = tf.oneHot(labels, logits.shape[1]);
  const logProbs = tf.logSoftmax(logits);
  return tf.neg(tf.mean(tf.sum(tf.mul(oneHot, logProbs), 1))) as tf.Scalar;
}

/** Cross-entropy of temperature-softened logits against soft targets. */
export function softCrossEntropy(targetProbs: tf.Tensor2D, logits: tf.Tensor2D,
                                 tau: number): tf.Scalar {
  const logProbs = tf.logSoftmax(tf.div(logits, tau));
  return tf.neg(tf.mean(tf.sum(tf.mul(targetProbs, logProbs), 1))) as tf.Scalar;
}

const NORM_EPS = 1e-8;

/** Mean squared distance between row-normalized attention vectors. */
export function attentionLoss(studentAtt: tf.Tensor2D, teacherAtt: tf.Tensor2D): tf.Scalar {
  const ns = tf.div(studentAtt,
                    tf.add(tf.norm(studentAtt, 2, 1, true), NORM_EPS));
  const nt = tf.div(teacherAtt,
                    tf.add(tf.norm(teacherAtt, 2, 1, true), NORM_EPS));
  return tf.mean(tf.sum(tf.square(tf.sub(ns, nt)), 1)) as tf.Scalar;
}

export interface BranchInputs {
  logits: tf.Tensor2D; // branch head over concatenated student features
  studentAttentions: tf.Tensor2D[]; // one per student, [batch, spatial^2]
}

export function branchLoss(branch: BranchInputs, labels: tf.Tensor1D,
                           teacherSoft: tf.Tensor2D, teacherAtt: tf.Tensor2D[],
                           cfg: LossConfig): tf.Scalar {
  let loss = tf.mul(hardCrossEntropy(labels, branch.logits), 1 - cfg.alpha) as tf.Scalar;
  if (cfg.alpha > 0) {
    loss = tf.add(loss, tf.mul(
      softCrossEntropy(teacherSoft, branch.logits, cfg.tau), cfg.alpha)) as tf.Scalar;
  }
  if (cfg.beta > 0) {
    for (let i = 0; i < branch.studentAttentions.length; i++) {
      loss = tf.add(loss, tf.mul(
        attentionLoss(branch.studentAttentions[i], teacherAtt[i]), cfg.beta)) as tf.Scalar;
    }
  }
  return loss;
}

export function jointLoss(branches: BranchInputs[], labels: tf.Tensor1D,
                          teacherSoft: tf.Tensor2D, teacherAtt: tf.Tensor2D[],
                          cfg: LossConfig): { total: tf.Scalar; perBranch: tf.Scalar[] } {
  if (branches.length !== cfg.branchWeights.length) {
    throw new Error(`${branches.length} branches vs ${cfg.branchWeights.length} weights`);
  }
  const perBranch = branches.map((b) => branchLoss(b, labels, teacherSoft, teacherAtt, cfg));
  let total = tf.scalar(0);
  perBranch.forEach((l, j) => {
    total = tf.add(total, tf.mul(l, cfg.branchWeights[j])) as tf.Scalar;
  });
  return { total: total as tf.Scalar, perBranch };
}
