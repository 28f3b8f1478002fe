import csv
import io
from contextlib import redirect_stderr, redirect_stdout

import numpy as np
import pytest

import cce
from cce import cli, oracle


def run_cli(argv):
    """Invoke the CLI in-process; returns (exit_code, stdout, stderr)."""
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        try:
            code = cli.main(argv)
        except SystemExit as exc:  # argparse usage errors
            code = exc.code
    return code, out.getvalue(), err.getvalue()


def parse_csv(text):
    rows = [r for r in csv.reader(io.StringIO(text)) if r and not r[0].startswith("#")]
    return rows[0], rows[1:]


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------


def test_check_passes_on_small_sweep():
    code, out, _ = run_cli(
        ["check", "--d", "8", "--n", "64", "--v", "256", "--seeds", "2", "--deterministic"]
    )
    assert code == 0
    assert "FAIL" not in out
    assert out.count("PASS") >= 10


def test_check_rejects_zero_vocab():
    code, _, err = run_cli(["check", "--v", "0"])
    assert code == 2
    assert "--v" in err


def test_check_deterministic_stdout_stable():
    argv = [
        "check", "--d", "8", "--n", "48", "--v", "96",
        "--seeds", "2", "--deterministic", "--threads", "4",
    ]
    first = run_cli(argv)
    second = run_cli(argv)
    assert first == second
    assert first[0] == 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def test_bench_header_and_schema():
    code, out, _ = run_cli(
        ["bench", "--d", "8", "--n", "128", "--v", "128", "--iterations", "1"]
    )
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0] == "method,phase,peak_transient_bytes,output_bytes,median_ms"
    header, rows = parse_csv(out)
    assert len(rows) == len(cli.BENCH_METHODS) * len(cli.BENCH_PHASES)
    for method, phase, peak, out_bytes, median in rows:
        assert method in cli.BENCH_METHODS
        assert phase in cli.BENCH_PHASES
        assert int(peak) >= 0 and int(out_bytes) >= 0
        assert float(median) >= 0.0


def test_bench_cce_memory_advantage():
    code, out, _ = run_cli(
        ["bench", "--d", "16", "--n", "512", "--v", "1024", "--iterations", "1"]
    )
    assert code == 0
    _, rows = parse_csv(out)
    peaks = {(r[0], r[1]): int(r[2]) for r in rows}
    assert peaks[("cce", "loss+gradient")] * 8 <= peaks[("naive", "loss+gradient")]


def test_bench_oom_rows_marked(monkeypatch):
    def boom(*args, **kwargs):
        raise MemoryError("out of memory")

    monkeypatch.setattr(oracle, "naive_forward", boom)
    monkeypatch.setattr(oracle, "naive_backward", boom)
    code, out, _ = run_cli(
        ["bench", "--d", "8", "--n", "64", "--v", "64", "--iterations", "1"]
    )
    assert code == 0
    _, rows = parse_csv(out)
    naive_rows = [r for r in rows if r[0] == "naive"]
    assert len(naive_rows) == 3
    for row in naive_rows:
        assert row[2] == row[3] == row[4] == "OOM"
    # the other methods still produced numeric rows
    assert all(r[2] != "OOM" for r in rows if r[0] != "naive")


def test_bench_accepts_matrix_files(tmp_path):
    e, c, x = cce.gen_synthetic(8, 32, 64, seed=5)
    cce.write_matrix(tmp_path / "e.ccem", e)
    cce.write_matrix(tmp_path / "c.ccem", c)
    cce.write_tokens(tmp_path / "x.ccex", x)
    code, out, _ = run_cli(
        [
            "bench",
            "--e-file", str(tmp_path / "e.ccem"),
            "--c-file", str(tmp_path / "c.ccem"),
            "--x-file", str(tmp_path / "x.ccex"),
            "--iterations", "1",
        ]
    )
    assert code == 0
    _, rows = parse_csv(out)
    assert len(rows) == 15


def test_bench_rejects_partial_file_flags(tmp_path):
    e, _, _ = cce.gen_synthetic(8, 32, 64, seed=5)
    cce.write_matrix(tmp_path / "e.ccem", e)
    code, _, err = run_cli(["bench", "--e-file", str(tmp_path / "e.ccem")])
    assert code == 2
    assert "--c-file" in err


def test_bench_ignore_frac_speeds_everything_up():
    base = ["bench", "--d", "8", "--n", "1024", "--v", "512", "--iterations", "3"]
    code0, out0, _ = run_cli(base + ["--ignore-frac", "0"])
    code1, out1, _ = run_cli(base + ["--ignore-frac", "0.5"])
    assert code0 == 0 and code1 == 0
    _, rows0 = parse_csv(out0)
    _, rows1 = parse_csv(out1)
    t0 = {(r[0], r[1]): float(r[4]) for r in rows0}
    t1 = {(r[0], r[1]): float(r[4]) for r in rows1}
    for key in t0:
        assert t1[key] < t0[key], key


# ---------------------------------------------------------------------------
# sparsity
# ---------------------------------------------------------------------------


def test_sparsity_output_shape():
    code, out, _ = run_cli(["sparsity", "--d", "8", "--n", "32", "--v", "16", "--seed", "1"])
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0] == "rank,mean_prob"
    assert len(lines) == 1 + 16 + 1
    assert lines[-1].startswith("# frac_above_epsilon=")
    ranks = [int(line.split(",")[0]) for line in lines[1:-1]]
    assert ranks == list(range(1, 17))


def test_sparsity_column_non_increasing_when_concentrated():
    code, out, _ = run_cli(
        ["sparsity", "--d", "8", "--n", "64", "--v", "256", "--seed", "2", "--conc", "4"]
    )
    assert code == 0
    probs = [float(line.split(",")[1]) for line in out.strip().splitlines()[1:-1]]
    assert all(a >= b for a, b in zip(probs, probs[1:]))
    # oracle cross-check of the emitted values
    e, c, _ = cce.gen_synthetic(8, 64, 256, seed=2, concentration=4)
    curve = cce.sparsity_stats(e, c, cce.EPSILON_DEFAULT)
    assert np.allclose(probs, curve.sorted_mean_prob)


def test_sparsity_epsilon_default_value():
    parser = cli.build_parser()
    args = parser.parse_args(["sparsity"])
    assert args.epsilon == 0.000244140625


def test_sparsity_reproducible():
    argv = ["sparsity", "--d", "8", "--n", "32", "--v", "64", "--seed", "9"]
    assert run_cli(argv) == run_cli(argv)


# ---------------------------------------------------------------------------
# train-demo
# ---------------------------------------------------------------------------


def test_train_demo_zero_steps_header_only():
    code, out, _ = run_cli(["train-demo", "--steps", "0"])
    assert code == 0
    assert out.strip() == "step,loss_cce,loss_naive"


def test_train_demo_step_zero_parity_and_descent():
    code, out, _ = run_cli(
        ["train-demo", "--d", "8", "--n", "128", "--v", "256", "--steps", "12",
         "--lr", "0.1", "--deterministic"]
    )
    assert code == 0
    _, rows = parse_csv(out)
    assert len(rows) == 12
    first_cce, first_naive = float(rows[0][1]), float(rows[0][2])
    assert abs(first_cce - first_naive) <= 1e-6 * max(abs(first_naive), 1.0)
    cce_curve = [float(r[1]) for r in rows]
    naive_curve = [float(r[2]) for r in rows]
    assert all(a > b for a, b in zip(cce_curve, cce_curve[1:]))
    assert all(a > b for a, b in zip(naive_curve, naive_curve[1:]))


def test_train_demo_divergence_exits_one():
    code, _, err = run_cli(
        ["train-demo", "--d", "4", "--n", "32", "--v", "64", "--steps", "50",
         "--lr", "1e40"]
    )
    assert code == 1
    assert "diverged" in err


def test_train_demo_reproducible_deterministic():
    argv = ["train-demo", "--d", "8", "--n", "64", "--v", "128", "--steps", "5",
            "--deterministic"]
    assert run_cli(argv) == run_cli(argv)


def test_train_demo_can_update_embeddings():
    code, out, _ = run_cli(
        ["train-demo", "--d", "8", "--n", "64", "--v", "128", "--steps", "6",
         "--lr", "0.1", "--train-embeddings", "--deterministic"]
    )
    assert code == 0
    _, rows = parse_csv(out)
    curve = [float(r[1]) for r in rows]
    assert curve[-1] < curve[0]
