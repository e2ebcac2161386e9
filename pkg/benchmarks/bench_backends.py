"""Benchmark the compiled convolution kernels against the NumPy fallback.

Times the three conv kernels on the default training shapes plus one full
forward/backward image-encoder pass per backend, and prints a table.

    python benchmarks/bench_backends.py [--repeats 20]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from vlpert.backend import _kernels_np

try:
    from vlpert.backend import _kernels as compiled
except ImportError:
    compiled = None

# (label, batch, h, w, c_in, c_out, stride, pad) for the default conv stack
SHAPES = [
    ("conv1 32x32x1 -> 16x16x8", 64, 32, 32, 1, 8, 2, 1),
    ("conv2 16x16x8 -> 8x8x16", 64, 16, 16, 8, 16, 2, 1),
    ("conv3 8x8x16 -> 4x4x32", 64, 8, 8, 16, 32, 2, 1),
]


def _time(fn, repeats: int) -> float:
    fn()  # warm up
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats


def bench_kernels(repeats: int) -> None:
    impls = [("numpy", _kernels_np)] + ([("compiled", compiled)] if compiled else [])
    print(f"{'kernel':<42} {'backend':<9} {'fwd ms':>8} {'bwd-in ms':>10} {'bwd-w ms':>9}")
    for label, batch, h, w, c_in, c_out, stride, pad in SHAPES:
        rng = np.random.default_rng(0)
        x = rng.normal(size=(batch, h, w, c_in))
        weights = rng.normal(size=(3, 3, c_in, c_out))
        bias = rng.normal(size=c_out)
        for name, impl in impls:
            y = impl.conv2d_forward(x, weights, bias, stride, pad)
            gy = np.ascontiguousarray(rng.normal(size=y.shape))
            fwd = _time(lambda: impl.conv2d_forward(x, weights, bias, stride, pad), repeats)
            bwd_in = _time(lambda: impl.conv2d_grad_input(gy, weights, stride, pad, h, w), repeats)
            bwd_w = _time(lambda: impl.conv2d_grad_weights(x, gy, stride, pad, 3, 3), repeats)
            print(
                f"{label:<42} {name:<9} {fwd * 1e3:>8.3f} {bwd_in * 1e3:>10.3f} {bwd_w * 1e3:>9.3f}"
            )


def bench_encoder_pass(repeats: int) -> None:
    from vlpert import backend
    from vlpert.encoders import AlignmentModel, EncoderConfig
    from vlpert.losses import global_contrastive_loss
    from vlpert.tensor import backward

    rng = np.random.default_rng(1)
    images = rng.uniform(size=(64, 32, 32, 1))

    def step():
        model = bench_encoder_pass.model
        image_global, _ = model.image_encoder.encode_batch(images)
        loss = global_contrastive_loss(image_global, image_global.detach() + 0.01, 0.07)
        backward(loss)

    bench_encoder_pass.model = AlignmentModel(EncoderConfig())
    per = _time(step, max(repeats // 4, 3))
    print(
        f"\nimage-encoder fwd+bwd, batch 64 ({backend.backend_name()} backend): {per * 1e3:.1f} ms"
    )
    print("set VLPERT_BACKEND=numpy or =compiled before launch to pin the backend")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()
    if compiled is None:
        print("compiled extension not available; benchmarking the NumPy fallback only\n")
    bench_kernels(args.repeats)
    bench_encoder_pass(args.repeats)


if __name__ == "__main__":
    main()
