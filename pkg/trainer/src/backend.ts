import * as tf from "@tensorflow/tfjs";

let ready: Promise<string> | null = null;

/**
 * The wasm backend ships no Conv2DBackpropFilter kernel, which blocks
 * convolution training. The filter gradient of a valid-padded convolution
 * is itself a convolution: correlate the (channel-as-batch) transposed
 * input with the (batch-as-channel) transposed output gradient, dilated by
 * the forward stride. Stride flooring can leave extra offsets, hence the
 * final slice to the filter extent.
 */
function registerConvBackpropFilterForWasm(): void {
  tf.registerKernel({
    kernelName: "Conv2DBackpropFilter",
    backendName: "wasm",
    kernelFunc: ({ inputs, attrs }: any) => {
      const { x, dy } = inputs;
      const { strides, pad, filterShape } = attrs;
      const s = Array.isArray(strides) ? strides[0] : strides;
      if (pad !== "valid" && pad !== 0) {
        throw new Error(`composite filter gradient supports valid padding only, got ${pad}`);
      }
      const [k1, k2, inCh, outCh] = filterShape;
      return tf.tidy(() => {
        const xT = tf.transpose(x, [3, 1, 2, 0]);
        const dyF = tf.transpose(dy, [1, 2, 0, 3]);
        const full = tf.conv2d(xT as tf.Tensor4D, dyF as tf.Tensor4D, 1, "valid", "NHWC", s);
        const dW = tf.slice(full, [0, 0, 0, 0], [inCh, k1, k2, outCh]);
        return tf.transpose(dW, [1, 2, 0, 3]);
      });
    },
  });
}

/** Select the fastest working backend; wasm with the composite kernel, else cpu. */
export function initBackend(): Promise<string> {
  if (ready) return ready;
  ready = (async () => {
    try {
      const wasm = require("@tensorflow/tfjs-backend-wasm");
      wasm.setThreadsCount(1);
      const ok = await tf.setBackend("wasm");
      if (ok) {
        registerConvBackpropFilterForWasm();
        return "wasm";
      }
    } catch {
      // fall through to cpu
    }
    await tf.setBackend("cpu");
    return "cpu";
  })();
  return ready;
}
