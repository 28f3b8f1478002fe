"""Command-line interface: correctness checks, benchmarks, sparsity curves, training demo.

Exit codes: 0 success, 1 runtime/check failure, 2 usage error.  All
subcommands emit plain text or CSV on stdout; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace

import numpy as np

from . import instrument, kernels, oracle
from .core import (
    EPSILON_DEFAULT,
    BlockSpec,
    CceOptions,
    ClassifierMatrix,
    EmbeddingMatrix,
    TokenBatch,
    default_upstream,
    gen_synthetic,
    read_matrix,
    read_tokens,
)

BENCH_METHODS = ("naive", "chunked", "cce", "cce-no-filter", "cce-no-sort")
BENCH_PHASES = ("loss", "gradient", "loss+gradient")
BENCH_HEADER = "method,phase,peak_transient_bytes,output_bytes,median_ms"


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _default_threads() -> int:
    env = os.environ.get("CCE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def _add_instance_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d", type=_positive_int, default=16, help="feature dimension")
    p.add_argument("--n", type=_positive_int, default=256, help="token count")
    p.add_argument("--v", type=_positive_int, default=1024, help="vocabulary size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--conc", type=float, default=0.0, help="head concentration of the generator")


def _add_kernel_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n-b", type=_positive_int, default=128, help="tokens per tile")
    p.add_argument("--m-b", type=_positive_int, default=128, help="vocab rows per tile")
    p.add_argument("--d-b", type=_positive_int, default=64, help="feature slice per tile")
    p.add_argument("--epsilon", type=float, default=EPSILON_DEFAULT)
    p.add_argument("--no-filter", action="store_true", help="disable gradient filtering")
    p.add_argument("--no-sort", action="store_true", help="disable vocabulary sorting")
    p.add_argument("--threads", type=_positive_int, default=None)
    p.add_argument("--deterministic", action="store_true")


def _blocks(args) -> BlockSpec:
    return BlockSpec(n_b=args.n_b, m_b=args.m_b, d_b=args.d_b)


def _options(args) -> CceOptions:
    return CceOptions(
        epsilon=args.epsilon,
        filtering=not args.no_filter,
        vocab_sorting=not args.no_sort,
        deterministic=args.deterministic,
        thread_count=args.threads if args.threads is not None else _default_threads(),
    )


def _maxnorm_rel(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a - b))) / scale


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------


def cmd_check(args) -> int:
    blocks = _blocks(args)
    options = _options(args)
    failures = 0

    def report(name: str, ok: bool, detail: str) -> None:
        nonlocal failures
        status = "PASS" if ok else "FAIL"
        print(f"{status} {name} ({detail})")
        if not ok:
            failures += 1

    for offset in range(args.seeds):
        seed = args.seed + offset
        tag = f"seed={seed} d={args.d} n={args.n} v={args.v}"
        e, c, x = gen_synthetic(args.d, args.n, args.v, seed, args.conc)
        ref, logits = oracle.naive_forward(e, c, x, options)

        probs = np.exp(logits.data - ref.lse[:, None])
        worst = int(np.max(np.count_nonzero(probs >= EPSILON_DEFAULT, axis=1)))
        report("softmax-sparsity-bound", worst <= 4096, f"{tag} max_above_eps={worst}")

        loss, back = kernels.cce_loss(e, c, x, blocks, options)
        report("loss-vs-oracle", _maxnorm_rel(loss.per_token_loss, ref.per_token_loss) <= 1e-5, tag)
        report("lse-vs-oracle", _maxnorm_rel(loss.lse, ref.lse) <= 1e-5, tag)

        up64 = default_upstream(x, "mean-over-valid", np.float64)
        g_ref = oracle.naive_backward(e, c, x, up64)
        g = back()
        ok = _maxnorm_rel(g.d_e, g_ref.d_e) <= 2e-4 and _maxnorm_rel(g.d_c, g_ref.d_c) <= 2e-4
        report("grad-vs-oracle", ok, tag)

        plain = replace(options, filtering=False, vocab_sorting=False)
        _, back_plain = kernels.cce_loss(e, c, x, blocks, plain)
        g_plain = back_plain()
        ok = (
            _maxnorm_rel(g_plain.d_e, g_ref.d_e) <= 1e-5
            and _maxnorm_rel(g_plain.d_c, g_ref.d_c) <= 1e-5
        )
        report("grad-unfiltered-vs-oracle", ok, tag)

        nosort = replace(options, vocab_sorting=False)
        loss_ns, back_ns = kernels.cce_loss(e, c, x, blocks, nosort)
        g_ns = back_ns()
        ok = (
            _maxnorm_rel(loss_ns.per_token_loss, loss.per_token_loss) <= 1e-6
            and _maxnorm_rel(g_ns.d_c, g.d_c) <= 1e-6
        )
        report("sorting-invariance", ok, tag)

        alt = BlockSpec(16, 16, 8)
        loss_alt, _ = kernels.cce_loss(e, c, x, alt, options)
        report("block-invariance", _maxnorm_rel(loss_alt.lse, loss.lse) <= 1e-5, tag)

        det = replace(options, deterministic=True)
        l1, b1 = kernels.cce_loss(e, c, x, blocks, det)
        l2, b2 = kernels.cce_loss(e, c, x, blocks, det)
        g1, g2 = b1(), b2()
        ok = (
            np.array_equal(l1.per_token_loss, l2.per_token_loss)
            and np.array_equal(g1.d_e, g2.d_e)
            and np.array_equal(g1.d_c, g2.d_c)
        )
        report("determinism", ok, tag)

        opts8 = replace(options, reduction="mean-over-valid")
        ch_loss, ch_g = oracle.chunked_loss_grad(e, c, x, opts8, chunks=min(8, args.n))
        ok = (
            _maxnorm_rel(ch_loss.per_token_loss, ref.per_token_loss) <= 1e-5
            and _maxnorm_rel(ch_g.d_c, g_ref.d_c) <= 1e-5
        )
        report("chunked-vs-oracle", ok, tag)

    # Gradient check against finite differences on small instances.
    for offset in range(2):
        seed = args.seed + offset
        e, c, x = gen_synthetic(4, 6, 12, seed)
        up = default_upstream(x, "mean-over-valid", np.float64)
        g = oracle.naive_backward(e, c, x, up)
        rng = np.random.default_rng(seed)
        entries = [
            (int(j), int(k))
            for j, k in zip(rng.integers(0, 12, size=8), rng.integers(0, 4, size=8))
        ]
        fd_e, fd_c = oracle.finite_difference_gradients(e, c, x, up, classifier_entries=entries)
        sampled = np.array([g.d_c[j, k] for j, k in entries])
        ok = _maxnorm_rel(g.d_e, fd_e) <= 1e-6 and _maxnorm_rel(sampled, fd_c) <= 1e-6
        report("gradcheck-finite-difference", ok, f"seed={seed} d=4 n=6 v=12")

    if failures:
        print(f"{failures} check(s) failed", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def _load_instance(args, parser):
    files = [args.e_file, args.c_file, args.x_file]
    if any(files):
        if not (args.e_file and args.c_file):
            parser.error("--e-file and --c-file must be given together")
        e = EmbeddingMatrix(read_matrix(args.e_file))
        c = ClassifierMatrix(read_matrix(args.c_file))
        if args.x_file:
            x = read_tokens(args.x_file)
        else:
            rng = np.random.default_rng(args.seed)
            x = TokenBatch(rng.integers(0, c.vocab, size=e.n_tokens))
        if e.dim != c.dim or x.n_tokens != e.n_tokens:
            parser.error("matrix/token files have inconsistent shapes")
        x.check_vocab(c.vocab)
        return e, c, x
    return gen_synthetic(args.d, args.n, args.v, args.seed, args.conc)


def _apply_ignore_frac(x: TokenBatch, frac: float, seed: int) -> TokenBatch:
    if frac <= 0:
        return x
    labels = x.labels.copy()
    rng = np.random.default_rng(seed + 0x5EED)
    k = int(round(frac * labels.size))
    drop = rng.choice(labels.size, size=min(k, labels.size), replace=False)
    labels[drop] = -1
    return TokenBatch(labels)


def _bench_functions(method, e, c, x, blocks, options, chunks):
    """Zero-argument callables for each phase of one method."""
    up32 = default_upstream(x, "mean-over-valid", np.float32)
    up64 = up32.astype(np.float64)

    if method == "naive":

        def loss_fn():
            out, logits = oracle.naive_forward(e, c, x, options)
            del logits
            return out

        def grad_fn():
            return oracle.naive_backward(e, c, x, up64)

        def both_fn():
            out, logits = oracle.naive_forward(e, c, x, options)
            del logits, out
            return oracle.naive_backward(e, c, x, up64)

        return loss_fn, grad_fn, both_fn

    if method == "chunked":
        n_chunks = min(chunks, max(x.valid_mask.sum(), 1))

        def loss_fn():
            out, _ = oracle._chunked(e, c, x, options, n_chunks, with_grad=False)
            return out

        def both_fn():
            return oracle.chunked_loss_grad(e, c, x, options, n_chunks)

        return loss_fn, both_fn, both_fn

    variant = options
    if method == "cce-no-filter":
        variant = replace(options, filtering=False)
    elif method == "cce-no-sort":
        variant = replace(options, vocab_sorting=False)

    def loss_fn():
        out, _back = kernels.cce_loss(e, c, x, blocks, variant)
        return out

    # The gradient phase times/tracks only the backward hook; the forward
    # it depends on runs once, outside any measurement.
    _out, saved_back = kernels.cce_loss(e, c, x, blocks, variant)

    def grad_fn():
        return saved_back(up32)

    def both_fn():
        _loss, back = kernels.cce_loss(e, c, x, blocks, variant)
        return back(up32)

    return loss_fn, grad_fn, both_fn


def cmd_bench(args) -> int:
    parser = args._parser
    blocks = _blocks(args)
    options = _options(args)
    e, c, x = _load_instance(args, parser)
    x = _apply_ignore_frac(x, args.ignore_frac, args.seed)
    # Ignored tokens are dropped before any method runs.
    e, x, _ = kernels.filter_ignored(e, x)

    writer = csv.writer(sys.stdout)
    writer.writerow(BENCH_HEADER.split(","))
    for method in BENCH_METHODS:
        fns = _bench_functions(method, e, c, x, blocks, options, args.chunks)
        for phase, fn in zip(BENCH_PHASES, fns):
            try:
                _, report = instrument.with_alloc_tracking(fn)
                timing = instrument.time_op(fn, warmups=1, iterations=args.iterations)
            except MemoryError:
                writer.writerow([method, phase, "OOM", "OOM", "OOM"])
                continue
            writer.writerow(
                [
                    method,
                    phase,
                    report.peak_transient_bytes,
                    report.output_bytes,
                    repr(timing.median_ms),
                ]
            )
    return 0


# ---------------------------------------------------------------------------
# sparsity
# ---------------------------------------------------------------------------


def cmd_sparsity(args) -> int:
    e, c, _x = gen_synthetic(args.d, args.n, args.v, args.seed, args.conc)
    curve = instrument.sparsity_stats(e, c, args.epsilon)
    print("rank,mean_prob")
    for rank, prob in enumerate(curve.sorted_mean_prob, start=1):
        print(f"{rank},{float(prob)!r}")
    print(f"# frac_above_epsilon={float(curve.frac_above_epsilon)!r}")
    return 0


# ---------------------------------------------------------------------------
# train-demo
# ---------------------------------------------------------------------------


def cmd_train_demo(args) -> int:
    blocks = _blocks(args)
    options = _options(args)
    e, c, x = gen_synthetic(args.d, args.n, args.v, args.seed, args.conc)
    with np.errstate(over="ignore"):
        lr = np.float32(args.lr)
    valid = x.valid_mask
    n_valid = max(int(valid.sum()), 1)
    up64 = default_upstream(x, "mean-over-valid", np.float64)

    c_naive = c.data.copy()
    c_cce = c.data.copy()
    e_naive = e.data.copy()
    e_cce = e.data.copy()

    print("step,loss_cce,loss_naive")
    for step in range(args.steps):
        ref, logits = oracle.naive_forward(
            EmbeddingMatrix(e_naive), ClassifierMatrix(c_naive), x, options
        )
        del logits
        loss_naive = float(ref.per_token_loss[valid].sum() / n_valid)
        g_naive = oracle.naive_backward(
            EmbeddingMatrix(e_naive), ClassifierMatrix(c_naive), x, up64
        )

        out, back = kernels.cce_loss(
            EmbeddingMatrix(e_cce), ClassifierMatrix(c_cce), x, blocks, options
        )
        loss_cce = float(out.per_token_loss[valid].sum()) / n_valid
        g_cce = back()

        if not (np.isfinite(loss_naive) and np.isfinite(loss_cce)):
            print(
                f"training diverged at step {step}: "
                f"loss_cce={loss_cce} loss_naive={loss_naive}",
                file=sys.stderr,
            )
            return 1
        print(f"{step},{loss_cce!r},{loss_naive!r}")

        with np.errstate(over="ignore", invalid="ignore"):
            c_naive -= lr * g_naive.d_c.astype(np.float32)
            c_cce -= lr * g_cce.d_c
            if args.train_embeddings:
                e_naive -= lr * g_naive.d_e.astype(np.float32)
                e_cce -= lr * g_cce.d_e
        updated = [c_naive, c_cce] + ([e_naive, e_cce] if args.train_embeddings else [])
        if not all(np.all(np.isfinite(w)) for w in updated):
            print(
                f"training diverged at step {step}: non-finite weights after update",
                file=sys.stderr,
            )
            return 1
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cce",
        description="Cross-entropy loss and gradients without the logit matrix.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_check = sub.add_parser("check", help="run the oracle-equivalence and invariant suite")
    _add_instance_flags(p_check)
    _add_kernel_flags(p_check)
    p_check.add_argument("--seeds", type=_positive_int, default=5, help="instances to sweep")
    p_check.set_defaults(func=cmd_check)

    p_bench = sub.add_parser("bench", help="memory/timing comparison CSV")
    _add_instance_flags(p_bench)
    _add_kernel_flags(p_bench)
    p_bench.add_argument("--ignore-frac", type=float, default=0.0)
    p_bench.add_argument("--chunks", type=_positive_int, default=8)
    p_bench.add_argument("--iterations", type=_positive_int, default=3)
    p_bench.add_argument("--e-file", help="embedding matrix file")
    p_bench.add_argument("--c-file", help="classifier matrix file")
    p_bench.add_argument("--x-file", help="token batch file")
    p_bench.set_defaults(func=cmd_bench)

    p_sparsity = sub.add_parser("sparsity", help="mean sorted softmax curve CSV")
    _add_instance_flags(p_sparsity)
    p_sparsity.add_argument("--epsilon", type=float, default=EPSILON_DEFAULT)
    p_sparsity.set_defaults(func=cmd_sparsity)

    p_train = sub.add_parser("train-demo", help="gradient-descent parity demo CSV")
    _add_instance_flags(p_train)
    _add_kernel_flags(p_train)
    p_train.add_argument("--steps", type=_nonneg_int, default=200)
    p_train.add_argument("--lr", type=float, default=0.1)
    p_train.add_argument(
        "--train-embeddings", action="store_true", help="also update the embeddings"
    )
    p_train.set_defaults(func=cmd_train_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args._parser = parser
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
