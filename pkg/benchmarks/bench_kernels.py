"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--train-step]

Prints one row per kernel with the best-of-repeat time of each backend.
``--train-step`` also times a full forward/backward step of the default
model with each backend swapped in.
"""
import argparse
import timeit

import numpy as np

from qvqa.tensor import _kernels_py, kernels

try:
    from qvqa.tensor import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    x = rng.standard_normal((3200, 64)).astype(np.float32)
    g = rng.standard_normal(x.shape).astype(np.float32)
    gamma = rng.standard_normal(64).astype(np.float32)
    beta = rng.standard_normal(64).astype(np.float32)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    y = _kernels_py.softmax_fwd(x)
    _, xhat, rstd = _kernels_py.layernorm_fwd(x, gamma, beta, 1e-5)
    a = rng.integers(0, 40, 60).astype(np.int64)
    b = rng.integers(0, 40, 60).astype(np.int64)
    return {
        "softmax_fwd 3200x64": lambda m: m.softmax_fwd(x),
        "softmax_bwd 3200x64": lambda m: m.softmax_bwd(y, g),
        "layernorm_fwd 3200x64": lambda m: m.layernorm_fwd(x, gamma, beta, 1e-5),
        "layernorm_bwd 3200x64": lambda m: m.layernorm_bwd(g, xhat, rstd, gamma),
        "gelu_fwd 204800": lambda m: m.gelu_fwd(flat),
        "gelu_bwd 204800": lambda m: m.gelu_bwd(flat, gflat),
        "lcs_length 60x60": lambda m: m.lcs_length(a, b),
    }


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for name, call in cases(rng).items():
        t_py = best(lambda: call(_kernels_py), repeat) * 1e3
        if _ckernels is None:
            print(f"{name:<24}{t_py:>10.3f}{'n/a':>11}{'':>9}")
            continue
        t_c = best(lambda: call(_ckernels), repeat) * 1e3
        print(f"{name:<24}{t_py:>10.3f}{t_c:>11.3f}{t_py / t_c:>8.2f}x")


def bench_train_step(repeat):
    from qvqa.data import corpus_vocab, make_samples
    from qvqa.model import ModelConfig, QVQAModel
    from qvqa.trainer import Trainer, TrainConfig, encode_sample, sample_qa

    samples = make_samples(0, 25)
    vocab = corpus_vocab(samples)
    batch = [encode_sample(s, vocab) for s in samples]
    rng = np.random.default_rng(0)
    triples = [sample_qa(s.qa, rng) for s in batch]
    backends = {"numpy": _kernels_py}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    for name, impl in backends.items():
        kernels._impl = impl
        trainer = Trainer(QVQAModel(ModelConfig(vocab_size=len(vocab))), TrainConfig(buffer_size=0, lr=1e-4), 100)
        trainer.train_step(batch, triples)  # warm-up
        t = best(lambda: trainer.train_step(batch, triples), max(3, repeat // 4))
        print(f"train step (B=25, default model) with {name:<7} kernels: {t * 1e3:8.1f} ms")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--train-step", action="store_true")
    args = parser.parse_args()
    print(f"active backend: {kernels.BACKEND}")
    bench_kernels(args.repeat)
    if args.train_step:
        bench_train_step(args.repeat)


if __name__ == "__main__":
    main()
