import json

from mcaslite.bench import (
    WorkloadSpec,
    build_histogram,
    run_bench,
    scaling_sweep,
    write_csv,
)


def test_histogram_invariants():
    samples = list(range(1000, 2000)) + [100000, 2**21]
    hist = build_histogram(samples, bins=40)
    assert len(hist["bins"]) == 40
    assert sum(b["count"] for b in hist["bins"]) == len(samples)
    assert hist["bins"][-1]["count"] >= 1  # overflow bin caught the spikes
    assert build_histogram([], bins=40) == {"bins": [], "samples": 0}
    single = build_histogram([7, 7, 7], bins=40)
    assert sum(b["count"] for b in single["bins"]) == 3


def test_run_bench_report_shape(server_factory):
    _, addrs = server_factory([{"default_backend": "mapstore"},
                               {"default_backend": "mapstore"}])
    spec = WorkloadSpec(mix="write", clients=4, shards=2, ops=500,
                        seed=5, addrs=addrs, target="keyset:50")
    report = run_bench(spec)
    assert report["aggregate"]["ops"] == 2000
    assert len(report["clients"]) == 4
    assert not report["partial_failure"]
    hist = report["latency"]["histogram"]
    assert len(hist["bins"]) == 40
    assert sum(b["count"] for b in hist["bins"]) == hist["samples"] == 2000
    agg = report["aggregate"]
    assert abs(agg["sum_client_rates"] - 4 * agg["ops_per_sec"] / 4) \
        <= 0.25 * agg["sum_client_rates"]
    f = report["fairness"]
    assert f["min_share"] > 0 and f["max_share"] < 1


def test_same_seed_same_keys():
    from mcaslite.bench import _client_keys
    spec = WorkloadSpec(seed=9, target="keyset:100")
    assert _client_keys(spec, 3) == _client_keys(spec, 3)
    assert _client_keys(spec, 3) != _client_keys(spec, 4)


def test_zero_op_run(server_factory):
    _, addrs = server_factory([{"default_backend": "mapstore"}])
    spec = WorkloadSpec(mix="read", clients=2, shards=1, ops=0,
                        addrs=addrs, target="keyset:5")
    report = run_bench(spec)
    assert report["aggregate"]["ops"] == 0
    assert report["latency"]["histogram"] == {"bins": [], "samples": 0}


def test_sweep_table_and_degradation(server_factory, tmp_path):
    _, addrs = server_factory([{"default_backend": "mapstore"},
                               {"default_backend": "mapstore"}])
    spec = WorkloadSpec(mix="read", clients=2, shards=2, ops=400,
                        addrs=addrs, target="keyset:20", seed=3)
    report = scaling_sweep(spec, 2)
    rows = report["sweep"]
    assert [r["shards"] for r in rows] == [1, 2]
    assert rows[0]["degradation_pct"] == 0.0
    assert rows[1]["projected_linear"] == 2 * rows[0]["aggregate_ops_per_sec"]
    csv_path = tmp_path / "sweep.csv"
    write_csv(report, str(csv_path))
    assert csv_path.read_text().startswith("shards,")


def test_cli_end_to_end(server_factory, tmp_path):
    from mcaslite.bench import main
    _, addrs = server_factory([{"default_backend": "mapstore"}])
    out = tmp_path / "cli-report.json"
    csv = tmp_path / "cli-hist.csv"
    rc = main(["--mix", "write", "--key", "8", "--value", "16",
               "--clients", "2", "--shards", "1", "--ops", "200",
               "--seed", "42", "--addr", addrs[0],
               "--out", str(out), "--csv", str(csv)])
    assert rc == 0
    report = json.loads(out.read_text())
    assert report["aggregate"]["ops"] == 400
    assert csv.read_text().startswith("bin_lo_ns,")


def test_report_json_serializable(server_factory, tmp_path):
    _, addrs = server_factory([{"default_backend": "mapstore"}])
    spec = WorkloadSpec(mix="ado", clients=1, shards=1, ops=0, addrs=addrs)
    report = run_bench(spec)
    path = tmp_path / "report.json"
    path.write_text(json.dumps(report))
    assert json.loads(path.read_text())["spec"]["mix"] == "ado"
