"""Compare the compiled kernel backend against the numpy fallback.

Times im2col / col2im in isolation and a full conv2d forward+backward
pass through the autodiff tape with each backend patched in.

Run as: python3 benchmarks/bench_kernels.py
"""

from __future__ import annotations

import time

import numpy as np

from ssformer import kernels, nn
from ssformer import tensor as T


def _bench(fn, repeats: int = 20, warmup: int = 3) -> float:
    for _ in range(warmup):
        fn()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_raw(backend, x, cols, h, w, k, stride, pad):
    t_i = _bench(lambda: backend.im2col(x, k, stride, pad))
    t_c = _bench(lambda: backend.col2im(cols, h, w, k, stride, pad))
    return t_i, t_c


def bench_conv(backend_name: str, x_data, w_data, b_data) -> float:
    prev = kernels.im2col, kernels.col2im
    backend = kernels.native_backend if backend_name == "native" else kernels.numpy_backend
    kernels.im2col, kernels.col2im = backend.im2col, backend.col2im

    def step():
        with T.Tape() as tape:
            x = T.Tensor(x_data, requires_grad=True)
            w = T.Tensor(w_data, requires_grad=True)
            b = T.Tensor(b_data, requires_grad=True)
            y = nn.conv2d(x, w, b, stride=1, pad=1)
            loss = T.reduce_mean(T.mul(y, y))
            tape.backward(loss)

    try:
        return _bench(step, repeats=10)
    finally:
        kernels.im2col, kernels.col2im = prev


def main() -> None:
    if kernels.native_backend is None:
        print("native backend unavailable; rebuild the extension first")
        return

    rng = np.random.default_rng(0)
    print(f"active backend at import: {kernels.BACKEND}\n")

    cases = [
        ("batch4 64x64 c32 k3", (4, 32, 64, 64), 3, 1, 1),
        ("batch4 88x88 c3 k7s4", (4, 3, 88, 88), 7, 4, 3),
        ("batch8 32x32 c64 k3s2", (8, 64, 32, 32), 3, 2, 1),
    ]
    print(f"{'case':26s} {'op':8s} {'numpy':>10s} {'native':>10s} {'speedup':>8s}")
    for name, shape, k, stride, pad in cases:
        n, c, h, w = shape
        x = rng.standard_normal(shape).astype(np.float32)
        cols = kernels.numpy_backend.im2col(x, k, stride, pad)
        np_i, np_c = bench_raw(kernels.numpy_backend, x, cols, h, w, k, stride, pad)
        na_i, na_c = bench_raw(kernels.native_backend, x, cols, h, w, k, stride, pad)
        print(f"{name:26s} {'im2col':8s} {np_i * 1e3:9.3f}ms {na_i * 1e3:9.3f}ms {np_i / na_i:7.2f}x")
        print(f"{'':26s} {'col2im':8s} {np_c * 1e3:9.3f}ms {na_c * 1e3:9.3f}ms {np_c / na_c:7.2f}x")

    x_data = rng.standard_normal((4, 32, 64, 64)).astype(np.float32)
    w_data = (rng.standard_normal((32, 32, 3, 3)) * 0.05).astype(np.float32)
    b_data = np.zeros(32, dtype=np.float32)
    t_np = bench_conv("numpy", x_data, w_data, b_data)
    t_na = bench_conv("native", x_data, w_data, b_data)
    print(f"\nconv2d fwd+bwd (batch4 64x64 c32 k3):")
    print(f"  numpy  {t_np * 1e3:9.3f}ms")
    print(f"  native {t_na * 1e3:9.3f}ms   speedup {t_np / t_na:.2f}x")


if __name__ == "__main__":
    main()
