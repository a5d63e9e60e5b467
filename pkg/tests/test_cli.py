import csv
import io

import numpy as np
import pytest

from ccoll import cli, codec, datasets


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def bench(capsys, *extra):
    code, out, err = run(capsys, "bench", "--warmup", 0, "--repetitions", 2, *extra)
    assert code == 0, err
    return rows(out)


def test_baseline_allreduce_bytes(capsys):
    table = bench(capsys, "--collective", "allreduce", "--variant", "baseline",
                  "--ranks", 4, "--elements", 4096)
    per_rank = [r for r in table if r["run_id"] != "summary"]
    assert len(per_rank) == 2 * 4
    assert {int(r["bytes_sent"]) for r in per_rank} == {2 * 3 * 4096 * 4 // 4}
    summary = table[-1]
    assert summary["run_id"] == "summary"
    assert float(summary["max_abs_error"]) == 0.0


def test_ccoll_allgather_counts(capsys):
    table = bench(capsys, "--collective", "allgather", "--variant", "ccoll",
                  "--ranks", 5, "--elements", 1000, "--eb", 1e-3)
    assert {r["compress_calls"] for r in table if r["run_id"] != "summary"} == {"1"}
    assert float(table[-1]["max_abs_error"]) <= 1e-3
    assert list(table[0]) == cli.BENCH_COLUMNS


def test_bench_deterministic(capsys):
    args = ("--collective", "reduce_scatter", "--variant", "ccoll", "--ranks", 3,
            "--elements", 3 * 1024, "--eb", 1e-3, "--dataset", "gaussian-blobs", "--seed", 9)
    _, a, _ = run(capsys, "bench", "--warmup", 1, "--repetitions", 2, *args)
    _, b, _ = run(capsys, "bench", "--warmup", 1, "--repetitions", 2, *args)
    assert a == b


def test_bench_sweep_and_config(capsys, tmp_path):
    cfg = tmp_path / "sim.cfg"
    cfg.write_text("latency_us=2\nbandwidth_gbps=10\n")
    table = bench(capsys, "--collective", "bcast", "--variant", "ccoll", "--ranks", 2,
                  "--eb", 1e-2, "--sweep", "--scale", 100000, "--sim-config", cfg)
    sizes = sorted({int(r["elements"]) for r in table})
    assert len(sizes) == len(cli.SWEEP_MB) == 14
    assert sizes[0] == 70 and sizes[-1] == 1694


def test_bench_errors(capsys):
    code, _, err = run(capsys, "bench", "--collective", "scatter", "--variant", "baseline",
                       "--ranks", 3, "--elements", 10)
    assert code == 2 and "divisible" in err
    code, _, err = run(capsys, "bench", "--collective", "allgather", "--variant", "ccoll",
                       "--ranks", 2, "--elements", 10)
    assert code == 2 and "--eb" in err


def test_compress_roundtrip(capsys, tmp_path):
    src = tmp_path / "f.raw"
    assert run(capsys, "gen", src, "--kind", "sinusoid-mix", "--elements", 20000)[0] == 0
    mono, pipe = tmp_path / "f.cz", tmp_path / "f.cp"
    code, out, _ = run(capsys, "compress", src, mono, "--eb", 1e-3)
    assert code == 0
    stats = dict(item.split("=") for item in out.split())
    assert float(stats["ratio"]) > 4
    assert float(stats["max_abs_error"]) <= 1e-3
    run(capsys, "compress", src, pipe, "--eb", 1e-3, "--pipelined")
    original = datasets.read_raw(src)
    a = codec.decode(mono.read_bytes())
    b = codec.decode(pipe.read_bytes())
    assert np.array_equal(a, b)
    assert np.abs(a.astype(np.float64) - original).max() <= 1e-3
    out_raw = tmp_path / "g.raw"
    assert run(capsys, "decompress", pipe, out_raw)[0] == 0
    assert np.array_equal(datasets.read_raw(out_raw), b)


def test_compress_errors(capsys, tmp_path):
    empty = tmp_path / "e.raw"
    empty.write_bytes(b"")
    assert run(capsys, "compress", empty, tmp_path / "o", "--eb", 1e-3)[0] == 2
    src = tmp_path / "f.raw"
    datasets.write_raw(src, np.ones(10, np.float32))
    assert run(capsys, "compress", src, tmp_path / "o", "--eb", -1)[0] == 2
    assert run(capsys, "compress", tmp_path / "missing", tmp_path / "o", "--eb", 1)[0] == 2


def test_analyze_maxmin_n1(capsys):
    code, out, _ = run(capsys, "analyze", "theorem-maxmin", "--n", 1, "--sigma", 2.0, "--trials", 1000)
    assert code == 0
    table = {r["quantity"]: r for r in rows(out)}
    assert float(table["variance"]["closed_form"]) == 0.5 * 4.0


def test_analyze_sum_interval(capsys):
    code, out, _ = run(capsys, "analyze", "theorem-sum", "--n", 100, "--eb", 1e-3, "--trials", 1000)
    table = {r["quantity"]: r for r in rows(out)}
    assert float(table["interval_half_width_in_eb"]["closed_form"]) == pytest.approx(20 / 3, abs=1e-12)
    assert table["mean"]["rel_deviation"] == ""


def test_analyze_errors(capsys):
    assert run(capsys, "analyze", "theorem-sum", "--n", 0, "--eb", 1e-3)[0] == 2
    assert run(capsys, "analyze", "theorem-avg", "--n", 4, "--eb", 1e-3, "--trials", 0)[0] == 2
    assert run(capsys, "analyze", "theorem-avg", "--n", 4)[0] == 2


def test_analyze_fit_and_determinism(capsys, tmp_path):
    out1 = tmp_path / "a.csv"
    out2 = tmp_path / "b.csv"
    for path in (out1, out2):
        assert run(capsys, "analyze", "fit", "--eb", 1e-3, "--elements", 4096, "--bins", 8, "-o", path)[0] == 0
    assert out1.read_bytes() == out2.read_bytes()
    lines = out1.read_text().splitlines()
    assert lines[0] == "bin_lo,bin_hi,count" and lines[-1].startswith("mle,")
    assert sum(int(l.split(",")[2]) for l in lines[1:-1]) == 4096


def test_analyze_fit_from_files(capsys, tmp_path):
    a, b = tmp_path / "a.raw", tmp_path / "b.raw"
    datasets.write_raw(a, np.zeros(10, np.float32))
    datasets.write_raw(b, np.full(10, 0.5, np.float32))
    code, out, _ = run(capsys, "analyze", "fit", "--original", a, "--decoded", b, "--bins", 2)
    assert code == 0 and out.splitlines()[-1] == "mle,0.5,0.0"
