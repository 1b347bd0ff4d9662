"""Self-check suites: engine gradients, loss identities, buffer semantics, metric oracles.

Loss functions are looked up on the ``losses`` module at call time so a
patched implementation is what gets checked.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import losses
from . import metrics
from . import oracles
from . import tensor as T
from .data.reports import split_sentences, template_corpus
from .data.vocab import split_words
from .tensor import _kernels_py, kernels
from .tensor.gradcheck import grad_check

SUITES = ("tensor", "losses", "buffers", "metrics")


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    detail: str = ""

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'} [{self.suite}] {self.name}" + (f": {self.detail}" if self.detail else "")


def _rand(rng, shape, requires_grad=True, scale=1.0):
    return T.Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad, dtype=T.get_default_dtype())


# tensor suite ----------------------------------------------------------------


def _primitive_cases(rng):
    """(name, f, params) for one random configuration of each primitive."""
    r = lambda *s: int(rng.integers(*s))
    n, k, d = r(1, 4), r(2, 6), r(3, 7)  # d=2 layer norm is sign-only, its input gradient ~1e-4
    a = _rand(rng, (n, k))
    b = _rand(rng, (n, k))
    w = _rand(rng, (n, k), requires_grad=False)
    x3 = _rand(rng, (n, k, d))
    w3 = _rand(rng, (n, k, d), requires_grad=False)
    W = _rand(rng, (d, k))
    bias = _rand(rng, (k,))
    gamma, beta = _rand(rng, (d,)), _rand(rng, (d,))
    emb = _rand(rng, (7, d))
    ids = rng.integers(0, 7, size=(n, k))
    pos = T.Tensor(np.abs(rng.standard_normal((n, k))) + 0.5, requires_grad=True, dtype=T.get_default_dtype())
    wd = _rand(rng, (n, k, k), requires_grad=False)
    allowed = rng.random((k, k)) < 0.7
    allowed[np.arange(k), np.arange(k)] = True
    targets = rng.integers(0, k, size=n)
    mask = rng.random(n) < 0.8
    mask[0] = True
    y = _rand(rng, (n, d, k))
    dot = lambda t, ref: T.sum_(T.mul(t, ref))
    return [
        ("add", lambda: dot(T.add(a, b), w), [a, b]),
        ("sub", lambda: dot(T.sub(a, b), w), [a, b]),
        ("mul", lambda: dot(T.mul(a, b), w), [a, b]),
        ("div", lambda: dot(T.div(a, T.sum_(T.mul(pos, pos))), w), [a, pos]),
        ("exp", lambda: dot(T.exp(a), w), [a]),
        ("log", lambda: dot(T.log(pos), w), [pos]),
        ("gelu", lambda: dot(T.gelu(a), w), [a]),
        ("mean", lambda: T.sum_(T.mul(T.mean(x3, axis=1), T.ones((n, d)))), [x3]),
        ("amax", lambda: T.sum_(T.amax(x3, axis=1)), [x3]),
        ("matmul", lambda: dot(T.matmul(x3, y), wd), [x3, y]),
        ("linear", lambda: dot(T.linear(x3, W, bias), wd), [x3, W, bias]),
        ("softmax", lambda: dot(T.softmax(a), w), [a]),
        ("log_softmax", lambda: dot(T.log_softmax(a), w), [a]),
        ("layer_norm", lambda: dot(T.layer_norm(x3, gamma, beta), w3), [x3, gamma, beta]),
        ("embedding", lambda: dot(T.embedding(emb, ids), w3), [emb]),
        ("masked_softmax", lambda: dot(T.softmax(T.masked_fill(T.matmul(x3, T.transpose(x3, (0, 2, 1))), allowed)), wd), [x3]),
        ("transpose_reshape", lambda: dot(T.reshape(T.transpose(x3, (0, 2, 1)), (n, k, d)), w3), [x3]),
        ("concat_split", lambda: dot(T.concat(T.split(x3, [1, d - 1], axis=2)[::-1], axis=2), w3), [x3]),
        ("getitem", lambda: T.sum_(T.mul(x3[:, 1:], T.ones((n, k - 1, d)))), [x3]),
        ("l2_normalize", lambda: dot(T.l2_normalize(x3), w3), [x3]),
        ("cross_entropy", lambda: T.cross_entropy(a, targets, mask), [a]),
    ]


def primitive_gradient_errors(n_configs=20, dtype=np.float64, seed=0):
    """Worst relative gradient error per primitive over ``n_configs`` random shapes.

    At 32-bit the finite differences are taken on a float64 copy of the
    same (float32-rounded) inputs, so the check measures the backward pass
    rather than float32 cancellation noise. Returns name -> (passed, error, failures).
    """
    rng = np.random.default_rng(seed)
    worst = {}
    for c in range(n_configs):
        case_seed = int(rng.integers(2**31))
        with T.default_dtype(dtype):
            cases = _primitive_cases(np.random.default_rng(case_seed))
        refs = [None] * len(cases)
        if dtype != np.float64:
            with T.default_dtype(np.float64):
                ref_cases = _primitive_cases(np.random.default_rng(case_seed))
            for i, ((_, _, params), (_, f_ref, ref_params)) in enumerate(zip(cases, ref_cases)):
                for p, q in zip(params, ref_params):
                    q.data[...] = p.data.astype(np.float64)
                refs[i] = (f_ref, ref_params)
        for (name, f, params), ref in zip(cases, refs):
            with T.default_dtype(dtype):
                rep = grad_check(f, params, reference=ref)
            prev = worst.get(name)
            if prev is None or (prev[0] and (not rep.passed or rep.max_error > prev[1])):
                worst[name] = (rep.passed, rep.max_error, "; ".join(rep.failures))
    return worst


def tensor_suite(n_configs=5, seed=0):
    checks = []
    rng = np.random.default_rng(seed)
    for dtype, bits in ((np.float64, 64), (np.float32, 32)):
        for name, (ok, err, fails) in primitive_gradient_errors(n_configs, dtype, seed).items():
            checks.append(Check("tensor", f"grad {name} {bits}-bit x{n_configs}", ok,
                                f"max rel err {err:.2e}" + (f" {fails}" if fails else "")))

    x = rng.standard_normal((6, 9)) * 5
    s = T.softmax(T.Tensor(x)).data
    checks.append(Check("tensor", "softmax rows sum to 1", bool(np.allclose(s.sum(-1), 1.0, atol=1e-12)) and bool((s >= 0).all())))

    if kernels.BACKEND == "cython":
        diffs = []
        for dt in (np.float32, np.float64):
            z = rng.standard_normal((5, 11)).astype(dt)
            g = rng.standard_normal((5, 11)).astype(dt)
            gm, bt = rng.standard_normal(11).astype(dt), rng.standard_normal(11).astype(dt)
            diffs.append(np.abs(kernels.softmax_fwd(z) - _kernels_py.softmax_fwd(z)).max())
            diffs.append(np.abs(kernels.gelu_fwd(z) - _kernels_py.gelu_fwd(z)).max())
            diffs.append(np.abs(kernels.gelu_bwd(z, g) - _kernels_py.gelu_bwd(z, g)).max())
            y1, xh1, r1 = kernels.layernorm_fwd(z, gm, bt, 1e-5)
            y2, _, _ = _kernels_py.layernorm_fwd(z, gm, bt, 1e-5)
            diffs.append(np.abs(y1 - y2).max())
            gx1 = kernels.layernorm_bwd(g, xh1, r1, gm)[0]
            gx2 = _kernels_py.layernorm_bwd(g, xh1, r1, gm)[0]
            diffs.append(np.abs(gx1 - gx2).max())
        worst_diff = float(max(diffs))
        checks.append(Check("tensor", f"{kernels.BACKEND} kernels match numpy fallback", worst_diff < 1e-5,
                            f"max abs diff {worst_diff:.1e}"))
    return checks


# losses suite ----------------------------------------------------------------

LOSS_KINDS = ("qcl", "cl", "lm", "total")


def _sq_gap(Q, Tt):
    """Smallest gap between the best and second-best token cosine over all pairs."""
    qn = Q / (np.linalg.norm(Q, axis=-1, keepdims=True) + T.COS_EPS)
    tn = Tt / (np.linalg.norm(Tt, axis=-1, keepdims=True) + T.COS_EPS)
    sims = np.einsum("jmd,kd->jkm", qn, tn)
    top2 = np.sort(sims, axis=-1)[..., -2:]
    return float((top2[..., 1] - top2[..., 0]).min())


def loss_config(rng, min_gap=0.02):
    """One random (B, N, m, d) configuration with features away from s_q kinks."""
    B = int(rng.choice([1, 2, 3]))
    N = int(rng.choice([0, 2]))
    m = int(rng.choice([2, 4]))
    d = int(rng.choice([4, 8]))
    while True:
        Q = rng.standard_normal((B + N, m, d))
        Tt = rng.standard_normal((B + N, d))
        if _sq_gap(Q, Tt) > min_gap:
            break
    return {"B": B, "N": N, "m": m, "d": d, "Q": Q, "T": Tt,
            "V": rng.standard_normal((B + N, d)),
            "tau_q": float(rng.uniform(0.05, 0.5)), "tau_c": float(rng.uniform(0.05, 0.5)),
            "logits": [rng.standard_normal((4, 6)) for _ in range(3)],
            "targets": [rng.integers(0, 6, size=4) for _ in range(3)],
            "masks": [np.array([True, True, False, True]) for _ in range(3)]}


def _buffers_from(cfg, dtype):
    B, N = cfg["B"], cfg["N"]
    buf = losses.NegativeBuffers(N, cfg["d"], cfg["m"])
    if N:
        buf.push(cfg["T"][B:].astype(dtype), cfg["V"][B:].astype(dtype), cfg["Q"][B:].astype(dtype))
    return buf


def _loss_problem(kind, cfg, dtype):
    """(f, params) for one loss on one configuration, built at ``dtype``."""
    B = cfg["B"]
    with T.default_dtype(dtype):
        leaf = lambda a: T.Tensor(np.asarray(a, dtype=dtype), requires_grad=True)
        Q, V, Tt = leaf(cfg["Q"][:B]), leaf(cfg["V"][:B]), leaf(cfg["T"][:B])
        tq, tc = leaf(cfg["tau_q"]), leaf(cfg["tau_c"])
        logits = [leaf(x) for x in cfg["logits"]]
    buf = _buffers_from(cfg, dtype)
    w = losses.LossWeights.preset("report_gen")

    def lm_terms():
        return [losses.lm_loss(lg, t, mk) for lg, t, mk in zip(logits, cfg["targets"], cfg["masks"])]

    logit_params = {f"logits_{i}": lg for i, lg in enumerate(logits)}
    if kind == "qcl":
        body, params = (lambda: losses.qcl_loss(Q, Tt, buf, tq)), {"Q": Q, "T": Tt, "tau_q": tq}
    elif kind == "cl":
        body, params = (lambda: losses.cl_loss(V, Tt, buf, tc)), {"V": V, "T": Tt, "tau_c": tc}
    elif kind == "lm":
        body, params = (lambda: losses.combine_lm(*lm_terms(), w)), logit_params
    elif kind == "total":
        def body():
            return losses.total_loss(losses.cl_loss(V, Tt, buf, tc), losses.qcl_loss(Q, Tt, buf, tq),
                                     losses.combine_lm(*lm_terms(), w), w.lam)
        params = {"Q": Q, "V": V, "T": Tt, "tau_q": tq, "tau_c": tc, **logit_params}
    else:
        raise ValueError(f"unknown loss kind {kind!r}")

    def f():
        with T.default_dtype(dtype):
            return body()
    return f, params


def _rounded(cfg, dtype):
    """Copy of ``cfg`` with every float input rounded through ``dtype``."""
    out = dict(cfg)
    for key in ("Q", "T", "V"):
        out[key] = cfg[key].astype(dtype).astype(np.float64)
    for key in ("tau_q", "tau_c"):
        out[key] = float(np.float64(dtype(cfg[key])))
    out["logits"] = [x.astype(dtype).astype(np.float64) for x in cfg["logits"]]
    return out


def loss_gradient_check(kind, cfg, dtype=np.float64):
    """Finite-difference check of one loss in one configuration; returns the GradCheckReport.

    At 32-bit the reverse-mode gradients come from the float32 graph while
    the central differences are taken on a float64 copy of the same rounded
    inputs: float32 evaluation noise divided by a usable step already
    exceeds the tolerance once the weighted losses reach ~25.
    """
    f, params = _loss_problem(kind, cfg, dtype)
    if dtype == np.float64:
        return grad_check(f, params)
    reference = _loss_problem(kind, _rounded(cfg, dtype), np.float64)
    return grad_check(f, params, reference=reference)


def loss_gradient_checks(n_configs=20, dtype=np.float64, seed=0):
    rng = np.random.default_rng(seed)
    configs = [loss_config(rng) for _ in range(n_configs)]
    bits = 64 if dtype == np.float64 else 32
    checks = []
    for kind in LOSS_KINDS:
        reports = [loss_gradient_check(kind, c, dtype) for c in configs]
        worst = max(r.max_error for r in reports)
        failed = [i for i, r in enumerate(reports) if not r.passed]
        checks.append(Check("losses", f"grad {kind} {bits}-bit x{n_configs}", not failed,
                            f"max rel err {worst:.2e} (tol {reports[0].tol:g})" + (f", failing configs {failed}" if failed else "")))
    return checks


def identity_checks():
    checks = []
    with T.default_dtype(np.float64):
        rng = np.random.default_rng(1)
        v = losses.qcl_loss(T.Tensor(rng.standard_normal((1, 3, 5))), T.Tensor(rng.standard_normal((1, 5))))
        checks.append(Check("losses", "qcl B=1 N=0 is exactly 0", v.item() == 0.0, f"got {v.item()!r}"))
        # all similarities equal: identical unit vectors everywhere
        same_T = T.Tensor(np.ones((2, 4)))
        same_Q = T.Tensor(np.ones((2, 3, 4)))
        v = losses.qcl_loss(same_Q, same_T).item()
        checks.append(Check("losses", "qcl equal similarities B=2 is ln 2", abs(v - math.log(2)) < 1e-6, f"got {v!r}"))
        v = losses.cl_loss(same_T, same_T).item()
        checks.append(Check("losses", "cl equal similarities B=2 is ln 2", abs(v - math.log(2)) < 1e-6, f"got {v!r}"))
    parts = (0.5, 0.25, 2.0)
    for name, expect in (("report_gen", 9 * 0.5 + 1 * 0.25 + 3 * 2.0), ("visual", 1 * 0.5 + 3 * 0.25 + 9 * 2.0)):
        got = losses.combine_lm(*parts, losses.LossWeights.preset(name))
        checks.append(Check("losses", f"LM combination {name} preset", got == expect, f"{got!r} vs {expect!r}"))
    got = losses.total_loss(0.75, 1.5, 6.25, 1.0)
    checks.append(Check("losses", "total with lambda=1", got == 0.75 + 1.5 + 6.25, f"got {got!r}"))
    return checks


def oracle_checks(n_cases=100, seed=0):
    rng = np.random.default_rng(seed)
    worst = {"qcl": 0.0, "cl": 0.0}
    with T.default_dtype(np.float64):
        for _ in range(n_cases):
            cfg = loss_config(rng, min_gap=0.0)
            B = cfg["B"]
            buf = _buffers_from(cfg, np.float64)
            got = losses.qcl_loss(T.Tensor(cfg["Q"][:B]), T.Tensor(cfg["T"][:B]), buf, cfg["tau_q"]).item()
            ref = oracles.qcl_loss(cfg["Q"][:B].tolist(), cfg["T"][:B].tolist(), cfg["Q"][B:].tolist(),
                                   cfg["T"][B:].tolist(), cfg["tau_q"])
            worst["qcl"] = max(worst["qcl"], abs(got - ref))
            got = losses.cl_loss(T.Tensor(cfg["V"][:B]), T.Tensor(cfg["T"][:B]), buf, cfg["tau_c"]).item()
            ref = oracles.cl_loss(cfg["V"][:B].tolist(), cfg["T"][:B].tolist(), cfg["V"][B:].tolist(),
                                  cfg["T"][B:].tolist(), cfg["tau_c"])
            worst["cl"] = max(worst["cl"], abs(got - ref))
    return [Check("losses", f"{k} matches scalar oracle x{n_cases}", v < 1e-6, f"max abs diff {v:.1e}")
            for k, v in worst.items()]


def losses_suite(n_configs=20, n_oracle=100):
    return (identity_checks() + oracle_checks(n_oracle)
            + loss_gradient_checks(n_configs, np.float64) + loss_gradient_checks(n_configs, np.float32))


# buffers suite ---------------------------------------------------------------


def fifo_check(B, N, k, d=3, m=2, seed=0):
    """Push k batches of size B into capacity N; contents must be the last min(kB, N) rows."""
    rng = np.random.default_rng(seed)
    buf = losses.NegativeBuffers(N, d, m)
    history = []
    for _ in range(k):
        batch = (rng.standard_normal((B, d)), rng.standard_normal((B, d)), rng.standard_normal((B, m, d)))
        history.append(tuple(a.copy() for a in batch))
        buf.push(*batch)
        for a in batch:
            a[...] = 0.0  # mutating the source afterwards must not reach the buffer
    keep = min(k * B, N)
    empty = (np.zeros((0, d)), np.zeros((0, d)), np.zeros((0, m, d)))
    for stored, j in zip((buf.T, buf.V, buf.Q), range(3)):
        expect = np.concatenate([empty[j]] + [h[j] for h in history])[k * B - keep:]
        if stored.shape[0] != keep or not np.array_equal(stored, expect.astype(stored.dtype)):
            return False
    return len(buf) == keep


def buffer_gradient_check(seed=0):
    """Buffered entries must be constants: gradients reach only the in-batch inputs."""
    rng = np.random.default_rng(seed)
    with T.default_dtype(np.float64):
        buf = losses.NegativeBuffers(4, 5, 3)
        buf.push(rng.standard_normal((4, 5)), rng.standard_normal((4, 5)), rng.standard_normal((4, 3, 5)))
        before = (buf.T.copy(), buf.V.copy(), buf.Q.copy())
        Q = T.Tensor(rng.standard_normal((2, 3, 5)), requires_grad=True)
        V = T.Tensor(rng.standard_normal((2, 5)), requires_grad=True)
        Tt = T.Tensor(rng.standard_normal((2, 5)), requires_grad=True)
        loss = losses.qcl_loss(Q, Tt, buf) + losses.cl_loss(V, Tt, buf)
        loss.backward()
        graph_leaves = _graph_constants(loss)
        buffered_grad = [t for t in graph_leaves if t.grad is not None and t not in (Q, V, Tt)]
        unchanged = all(np.array_equal(a, b) for a, b in zip(before, (buf.T, buf.V, buf.Q)))
        batch_grad = all(x.grad is not None and np.abs(x.grad).sum() > 0 for x in (Q, V, Tt))
    return not buffered_grad and unchanged and batch_grad


def _graph_constants(root):
    seen, stack, leaves = set(), [root], []
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if not node._parents:
            leaves.append(node)
        stack.extend(node._parents)
    return leaves


def buffers_suite():
    cases = [(B, N, k) for B in (1, 2, 3, 25) for N in (0, 2, 5, 100) for k in (1, 2, 3, 7)]
    failed = [c for c in cases if not fifo_check(*c)]
    return [
        Check("buffers", f"FIFO keeps last min(kB, N) rows oldest-first x{len(cases)}", not failed,
              f"failing (B, N, k): {failed[:5]}" if failed else ""),
        Check("buffers", "buffered entries receive zero gradient", buffer_gradient_check()),
    ]


# metrics suite ---------------------------------------------------------------


def fixed_corpus(n_pairs=20, seed=20240):
    """Deterministic short (candidate, reference) token pairs with varied overlap."""
    rng = np.random.default_rng(seed)
    sentences = sorted({s for text in template_corpus() if text.endswith('.') for s in split_sentences(text)})
    sentences = [split_words(s) for s in sentences]
    sentences = [s for s in sentences if len(s) <= 12]
    pairs = []
    for i in range(n_pairs):
        ref = list(sentences[int(rng.integers(len(sentences)))])
        cand = list(ref)
        edits = i % 5  # 0 edits gives identical pairs
        for _ in range(edits):
            op = int(rng.integers(3))
            j = int(rng.integers(len(cand)))
            if op == 0 and len(cand) > 1:
                del cand[j]
            elif op == 1:
                cand.insert(j, str(rng.choice(["the", "nodule", "is", "seen", "."])))
            else:
                other = sentences[int(rng.integers(len(sentences)))]
                cand[j] = other[int(rng.integers(len(other)))]
        if i % 7 == 6:
            cand = list(reversed(cand))
        pairs.append((cand, ref))
    return pairs


def metrics_suite():
    corpus = fixed_corpus()
    bleu_diff = max(abs(metrics.bleu(c, r, n) - oracles.bleu(c, r, n)) for c, r in corpus for n in (1, 2, 3, 4))
    rouge_diff = max(abs(metrics.rouge_l(c, r) - oracles.rouge_l(c, r)) for c, r in corpus)
    return [
        Check("metrics", f"BLEU-1..4 match counting oracle x{len(corpus)}", bleu_diff < 1e-9, f"max abs diff {bleu_diff:.1e}"),
        Check("metrics", f"ROUGE-L matches enumeration oracle x{len(corpus)}", rouge_diff < 1e-9, f"max abs diff {rouge_diff:.1e}"),
    ]


def run(only=None, n_configs=20):
    """Run the requested suites (all by default) and return their checks."""
    only = list(only) if only else list(SUITES)
    unknown = [s for s in only if s not in SUITES]
    if unknown:
        raise ValueError(f"unknown suite(s) {unknown}; choose from {list(SUITES)}")
    runners = {
        "tensor": lambda: tensor_suite(n_configs=n_configs),
        "losses": lambda: losses_suite(n_configs=n_configs),
        "buffers": buffers_suite,
        "metrics": metrics_suite,
    }
    checks = []
    for name in only:
        checks.extend(runners[name]())
    return checks
