"""Time the numba kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--batch B]

Each kernel is run once per backend to warm up (numba compiles on first
call), then timed as the best of ``--repeat`` runs.  A final row times one
training step of a desk-width where stream end to end.
"""
import argparse
import time

import numpy as np

from duostream import _kernels
from duostream import tensor as T
from duostream.fixation import random_fixation
from duostream.nn import Adam
from duostream.scenes import make_scene_set, retinal_saliency_target
from duostream.streams import Stream, StreamConfig


def _best(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(batch, rng):
    x = rng.normal(size=(batch, 16, 64, 64)).astype(np.float32)
    cols = _kernels.im2col3x3(x)
    pooled, idx = _kernels.maxpool2x2_forward(x)
    img = rng.random((batch, 3, 96, 96))
    py = rng.uniform(-5, 100, size=(batch, 64 * 64))
    px = rng.uniform(-5, 100, size=(batch, 64 * 64))
    g = np.ones((batch, 3, 64 * 64))
    return {
        "im2col 3x3 (B,16,64,64)": lambda: _kernels.im2col3x3(x),
        "col2im 3x3 (B,16,64,64)": lambda: _kernels.col2im3x3(cols, batch, 16, 64, 64),
        "maxpool fwd (B,16,64,64)": lambda: _kernels.maxpool2x2_forward(x),
        "maxpool bwd (B,16,64,64)": lambda: _kernels.maxpool2x2_backward(np.ones_like(pooled), idx),
        "bilinear gather 96->64": lambda: _kernels.bilinear_gather(img, py, px),
        "bilinear scatter 64->96": lambda: _kernels.bilinear_scatter(g, py, px, 96, 96),
    }


def training_step(batch):
    where = Stream(StreamConfig.canonical("where", seed=0))
    opt = Adam(where.parameters(), lr=0.002, betas=(0.9, 0.99))
    data = make_scene_set(batch, 0)
    rng = np.random.default_rng(0)
    fix = np.array([random_fixation(rng) for _ in range(batch)])
    target = retinal_saliency_target(data.density, fix, where.a)

    def step():
        feats = where.backbone(where.retina(data.images, fix))
        loss = T.kl_saliency_loss(where.where_head(feats[2], feats[3]), target)
        opt.zero_grad()
        loss.backward()
        opt.step()

    return step


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--batch", type=int, default=16)
    args = p.parse_args(argv)
    backends = ["numpy"] + (["numba"] if _kernels.HAS_NUMBA else [])
    results = {}
    prev = _kernels.backend()
    try:
        for name in backends:
            _kernels.set_backend(name)
            cases = kernel_cases(args.batch, np.random.default_rng(0))
            cases["where stream train step (desk widths)"] = training_step(args.batch)
            for label, fn in cases.items():
                results.setdefault(label, {})[name] = _best(fn, args.repeat)
    finally:
        _kernels.set_backend(prev)
    print(f"{'kernel':40s}" + "".join(f"{b:>12s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for label, row in results.items():
        line = f"{label:40s}" + "".join(f"{row[b] * 1e3:10.2f}ms" for b in backends)
        if len(backends) > 1:
            line += f"{row['numpy'] / row['numba']:11.2f}x"
        print(line)


if __name__ == "__main__":
    main()
