import csv
import socket
import threading

import pytest

from convshard.checkpoint import load_checkpoint
from convshard.cli import check_shape_chain, main
from convshard.errors import ConfigurationError
from convshard.metrics import read_metrics
from convshard.network import PRESETS, custom_net, preset

TRAIN = ["--preset", "50:500", "--batch", "64", "--synthetic", "--synthetic-size", "64", "--seed", "2"]


def free_port():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_pass_the_startup_shape_check(name):
    check_shape_chain(preset(name))


def test_shape_check_rejects_other_chains():
    with pytest.raises(ConfigurationError):
        check_shape_chain(custom_net(4, 6, (3, 16, 16), 5, 3))


@pytest.mark.parametrize(
    "argv",
    [
        ["train-local", "--preset", "9:9"],
        ["train-local", "--batch", "100", "--synthetic"],
        ["train-local"],  # no data source
        ["frobnicate"],
    ],
)
def test_configuration_errors_exit_1(argv):
    assert main(argv) == 1


def test_missing_data_file_exits_3(tmp_path):
    assert main(["train-local", "--data", str(tmp_path / "none.bin"), "--no-checkpoint"]) == 3


def test_unreachable_worker_exits_2_naming_it(capsys):
    port = free_port()
    code = main(["master", *TRAIN, "--workers", f"127.0.0.1:{port}", "--timeout", "0.5", "--no-checkpoint"])
    assert code == 2
    assert f"127.0.0.1:{port}" in capsys.readouterr().err


def test_train_local_equals_master_without_workers(tmp_path):
    a, b = tmp_path / "local.csv", tmp_path / "master.csv"
    assert main(["train-local", *TRAIN, "--out", str(a)]) == 0
    assert main(["master", *TRAIN, "--out", str(b)]) == 0
    ra, rb = read_metrics(a), read_metrics(b)
    assert len(ra) == len(rb) == 1
    assert [r.loss for r in ra] == [r.loss for r in rb]
    same_training_state(tmp_path / "local.csck", tmp_path / "master.csck")


def same_training_state(a, b):
    ca, cb = load_checkpoint(a), load_checkpoint(b)
    assert (ca.spec, ca.epoch, ca.batch, ca.rng_state) == (cb.spec, cb.epoch, cb.batch, cb.rng_state)
    assert ca.params.keys() == cb.params.keys()
    for k in ca.params:
        assert ca.params[k].tobytes() == cb.params[k].tobytes(), k


def test_master_and_worker_over_tcp_match_local(tmp_path):
    port = free_port()
    codes = {}
    t = threading.Thread(target=lambda: codes.setdefault("w", main(["worker", "--port", str(port), "--timeout", "60"])))
    t.start()
    dist = tmp_path / "dist.csv"
    code = main(["master", *TRAIN, "--workers", f"127.0.0.1:{port}", "--timeout", "60", "--out", str(dist)])
    t.join(60)
    assert code == 0 and codes["w"] == 0
    assert main(["train-local", *TRAIN, "--out", str(tmp_path / "local.csv")]) == 0
    same_training_state(tmp_path / "dist.csck", tmp_path / "local.csck")
    rows = read_metrics(dist)
    assert rows[0].devices == 2


def test_metrics_rows_match_epochs_times_batches(tmp_path):
    out = tmp_path / "m.csv"
    argv = ["train-local", "--preset", "50:500", "--batch", "64", "--synthetic", "--synthetic-size", "130",
            "--epochs", "2", "--out", str(out), "--no-checkpoint"]
    assert main(argv) == 0
    rows = read_metrics(out)
    assert len(rows) == 2 * 3
    for r in rows:
        assert abs(r.commS + r.convS + r.compS - r.totalS) <= 0.01 * r.totalS
    assert not (tmp_path / "m.csck").exists()


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text('preset = "50:500"\nbatch = 128\nsynthetic = true\nsynthetic_size = 64\n')
    out = tmp_path / "m.csv"
    assert main(["train-local", "--config", str(cfg), "--batch", "64", "--out", str(out), "--no-checkpoint"]) == 0
    assert read_metrics(out)[0].batch == 64


def test_bench_prints_a_device_benchmark(tmp_path, capsys):
    out = tmp_path / "b.csv"
    assert main(["bench", "--preset", "50:500", "--batch", "64", "--repetitions", "1", "--out", str(out)]) == 0
    assert "DeviceBenchmark" in capsys.readouterr().out
    with open(out) as fh:
        rec = list(csv.DictReader(fh))[0]
    assert float(rec["elapsedS"]) > 0


def test_simulate_with_supplied_baselines_writes_csv(tmp_path):
    out = tmp_path / "s.csv"
    argv = ["simulate", "--preset", "50:500", "--batch", "64", "--nodes", "5", "--baseline-conv", "2.0",
            "--baseline-comp", "0.5", "--bandwidth", "1e8", "--bandwidth", "inf", "--out", str(out)]
    assert main(argv) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 10 and rows[0]["speedup"] == "1.0"
    assert float(rows[-1]["speedup"]) <= 1 / 0.2


def test_simulate_baselines_must_come_together():
    assert main(["simulate", "--baseline-conv", "1.0"]) == 1


def test_simulate_calibrated_four_equal_cpus_largest_net(tmp_path):
    # free communication isolates the calibrated conv/comp split of this machine
    out = tmp_path / "s.csv"
    argv = ["simulate", "--preset", "500:1500", "--batch", "1024", "--equal", "--nodes", "4",
            "--device-class", "cpu-low-mid", "--bandwidth", "inf", "--out", str(out)]
    assert main(argv) == 0
    with open(out) as fh:
        speedup = float(list(csv.DictReader(fh))[-1]["speedup"])
    assert 2.9 <= speedup <= 3.6
