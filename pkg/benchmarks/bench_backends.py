"""Benchmark the numpy kernels against their numba twins.

Times each hot kernel on training-shaped inputs, then a full train step
(forward, backward, Adam) with each backend active.  Run from the repo
root after an editable install:

    python benchmarks/bench_backends.py
    python benchmarks/bench_backends.py --repeat 500 --seq 40
"""

import argparse
import time

import numpy as np

from turntrack import kernels
from turntrack.encoding import FeatureLayout
from turntrack.network import ModelConfig, TransformerModel
from turntrack.training import AdamOptimizer
from turntrack import autodiff as ad


def best_of(fn, repeat: int, warmup: int = 3) -> float:
    """Best wall time in seconds over `repeat` calls (after warmup)."""
    for _ in range(warmup):
        fn()
    best = float("inf")
    for _ in range(repeat):
        started = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - started)
    return best


def kernel_cases(seq: int, d_model: int, ffn: int, rng):
    x_norm = rng.normal(size=(seq, d_model))
    gain = np.ones(d_model)
    bias = np.zeros(d_model)
    dy_norm = rng.normal(size=(seq, d_model))
    heads = 9
    attn = rng.normal(size=(heads * seq, seq))
    attn_probs = np.abs(attn) + 1e-3
    attn_probs /= attn_probs.sum(axis=1, keepdims=True)
    d_attn = rng.normal(size=attn.shape)
    pre = rng.normal(size=(seq, ffn))
    d_pre = rng.normal(size=pre.shape)
    logits = rng.normal(size=(seq, 23))
    labels = np.where(rng.random(logits.shape) < 0.15, 1.0, -1.0)
    mask = (rng.random(logits.shape) < 0.8).astype(np.float64)
    active = ((1.0 - logits * labels) > 0).astype(np.float64) * mask
    n_params = 1_000_000
    p = rng.normal(size=n_params)
    g = rng.normal(size=n_params)
    m = np.zeros(n_params)
    v = np.zeros(n_params)

    def make(table):
        mean = x_norm.mean(axis=1)
        rstd = 1.0 / np.sqrt(x_norm.var(axis=1) + 1e-5)
        return {
            "layernorm_fwd": lambda: table["layernorm_fwd"](
                x_norm, gain, bias, 1e-5),
            "layernorm_bwd": lambda: table["layernorm_bwd"](
                x_norm, gain, mean, rstd, dy_norm),
            "softmax_fwd": lambda: table["softmax_fwd"](attn),
            "softmax_bwd": lambda: table["softmax_bwd"](attn_probs, d_attn),
            "relu_fwd": lambda: table["relu_fwd"](pre),
            "relu_bwd": lambda: table["relu_bwd"](pre, d_pre),
            "hinge_fwd": lambda: table["hinge_fwd"](logits, labels, mask),
            "hinge_bwd": lambda: table["hinge_bwd"](active, labels, 1.0),
            "adam_step_1m": lambda: table["adam_step"](
                p, g, m, v, 1, 1e-4, 0.9, 0.999, 1e-8),
        }

    return make


def train_step_case(seq: int, rng):
    layout = FeatureLayout(capacity=8, history=10, word_dim=16, context_dim=16)
    model = TransformerModel(ModelConfig(
        layout=layout, d_model=144, num_heads=9, ffn_hidden=800,
        head_hidden=800, seed=0))
    optimizer = AdamOptimizer(model.params, 1e-4)
    n = 8
    m = seq - n
    r_rows = rng.normal(size=(n, layout.total_dim))
    u_rows = rng.normal(size=(m, layout.total_dim))
    r_aug = rng.normal(size=(n, layout.stage2_dim))
    u_aug = rng.normal(size=(m, layout.stage2_dim))
    s1_labels = np.where(rng.random((m, 2)) < 0.1, 1.0, -1.0)
    s1_mask = np.ones((m, 2))
    width = 2 * layout.capacity + layout.num_properties
    s2_labels = np.where(rng.random((m, width)) < 0.15, 1.0, -1.0)
    s2_mask = (rng.random((m, width)) < 0.7).astype(np.float64)

    def step():
        model.zero_grads()
        s1 = model.stage1_tensor(r_rows, u_rows)
        s2 = model.stage2_tensor(r_aug, u_aug)
        l1 = ad.scale(ad.hinge_masked_sum(s1, s1_labels, s1_mask), 6.0 / m)
        l2 = ad.scale(ad.hinge_masked_sum(s2, s2_labels, s2_mask), 1.0 / m)
        loss = ad.add_scalar_tensors(l1, l2)
        loss.backward()
        optimizer.step(model.gradients())
        return loss.item()

    return step


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=200,
                        help="timed calls per kernel (best-of)")
    parser.add_argument("--steps", type=int, default=20,
                        help="timed train steps per backend")
    parser.add_argument("--seq", type=int, default=20,
                        help="sequence length (repository rows + tokens)")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    backends = kernels.available_backends()
    rng = np.random.default_rng(args.seed)
    make = kernel_cases(args.seq, 144, 800, rng)
    times: dict[str, dict[str, float]] = {}
    for backend in backends:
        cases = make(kernels.get_table(backend))
        for name, fn in cases.items():
            times.setdefault(name, {})[backend] = best_of(fn, args.repeat)

    restore = kernels.backend_name()
    for backend in backends:
        kernels.set_backend(backend)
        step = train_step_case(args.seq, np.random.default_rng(args.seed))
        times.setdefault("train_step", {})[backend] = best_of(
            step, args.steps, warmup=2)
    kernels.set_backend(restore)

    have_numba = "numba" in backends
    header = f"{'case':<16} {'numpy':>12}"
    if have_numba:
        header += f" {'numba':>12} {'speedup':>9}"
    print(f"seq={args.seq} repeat={args.repeat} backends={','.join(backends)}")
    print(header)
    for name, row in times.items():
        line = f"{name:<16} {row['numpy'] * 1e6:>10.1f}us"
        if have_numba:
            ratio = row["numpy"] / row["numba"]
            line += f" {row['numba'] * 1e6:>10.1f}us {ratio:>8.2f}x"
        print(line)
    if not have_numba:
        print("numba not installed; showing the numpy fallback only")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
