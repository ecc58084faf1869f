import hashlib
import json

import numpy as np
import pytest

from sapt.cli import main
from sapt.catalog import load_catalog
from sapt.datasets import toy_encoder_config
from sapt.encoder import build_toy_encoder, init_prompt_parameters
from sapt.protocols import harmonic_mean
from sapt.trainer import _leaves, load_checkpoint


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--preset", "toy", "--set", "train.epochs=4", "--out", str(out)])
    assert code == 0
    return out


def run_eval(trained_run, tmp_path, protocol, *extra):
    out = tmp_path / f"{protocol}.json"
    args = [
        "eval", "--preset", "toy", "--set", "train.epochs=4",
        "--checkpoint", str(trained_run / "checkpoint.json"),
        "--protocol", protocol, "--out", str(out), *extra,
    ]
    return main(args), out


def test_help_lists_flags(capsys):
    with pytest.raises(SystemExit) as exit_info:
        main(["eval", "--help"])
    assert exit_info.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--manifest", "--catalog", "--config", "--set", "--out", "--checkpoint",
                 "--protocol", "--seed", "--variant", "--preset", "--workers"):
        assert flag in text


def test_unknown_flag_is_error():
    with pytest.raises(SystemExit) as exit_info:
        main(["train", "--bogus-flag"])
    assert exit_info.value.code == 2


def test_train_writes_artifacts(trained_run, capsys):
    assert (trained_run / "checkpoint.json").exists()
    history = (trained_run / "history.jsonl").read_text().splitlines()
    first = json.loads(history[0])
    assert set(first) == {"step", "epoch", "lr", "l_ce", "l_steer_v", "l_steer_t", "total"}


def test_train_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--preset", "toy", "--set", "train.epochs=2", "--out", str(a)]) == 0
    assert main(["train", "--preset", "toy", "--set", "train.epochs=2", "--out", str(b)]) == 0
    assert (a / "history.jsonl").read_bytes() == (b / "history.jsonl").read_bytes()
    assert (a / "checkpoint.json").read_bytes() == (b / "checkpoint.json").read_bytes()


def test_train_zero_epochs_equals_init(tmp_path):
    out = tmp_path / "zero"
    assert main(["train", "--preset", "toy", "--set", "train.epochs=0", "--out", str(out)]) == 0
    loaded = load_checkpoint(out / "checkpoint.json")
    cfg = toy_encoder_config(seed=0)
    init = init_prompt_parameters(cfg, build_toy_encoder(cfg))
    for a, b in zip(_leaves(loaded.params), _leaves(init)):
        np.testing.assert_array_equal(a, b)
    assert (out / "history.jsonl").read_text() == ""


def test_train_bad_config_exit_2(tmp_path, capsys):
    assert main(["train", "--preset", "toy", "--set", "bogus.key=1", "--out", str(tmp_path)]) == 2


def test_eval_stdout_matches_report(trained_run, tmp_path, capsys):
    code, out = run_eval(trained_run, tmp_path, "b2n")
    assert code == 0
    report = json.loads(out.read_text())
    printed = dict(
        line.split("=", 1) for line in capsys.readouterr().out.splitlines() if "=" in line and not line.startswith("report")
    )
    for name, value in report["metrics"].items():
        assert float(printed[name]) == value
    assert report["metadata"]["checkpoint_hash"] == hashlib.sha256(
        (trained_run / "checkpoint.json").read_bytes()
    ).hexdigest()


def test_eval_gzs_hm_consistency(trained_run, tmp_path, capsys):
    code, out = run_eval(trained_run, tmp_path, "gzs")
    assert code == 0
    lines = dict(l.split("=", 1) for l in capsys.readouterr().out.splitlines() if "=" in l and not l.startswith("report"))
    assert abs(harmonic_mean(float(lines["gBase"]), float(lines["gNovel"])) - float(lines["gHM"])) < 1e-9


@pytest.mark.parametrize("protocol", ["b2n", "gzs", "ovc", "xdataset", "fewshot"])
def test_eval_all_protocols_produce_reports(trained_run, tmp_path, protocol):
    code, out = run_eval(trained_run, tmp_path, protocol)
    assert code == 0
    report = json.loads(out.read_text())
    assert report["protocol"] == protocol
    assert all(0.0 <= v <= 100.0 for v in report["metrics"].values())


def test_eval_unknown_protocol_exit_2(trained_run, tmp_path, capsys):
    code, _ = run_eval(trained_run, tmp_path, "nope")
    assert code == 2
    assert "gzs" in capsys.readouterr().err


def test_eval_checkpoint_config_mismatch_exit_2(trained_run, tmp_path):
    out = tmp_path / "r.json"
    code = main([
        "eval", "--preset", "toy", "--set", "train.epochs=4", "--seed", "123",
        "--checkpoint", str(trained_run / "checkpoint.json"),
        "--protocol", "b2n", "--out", str(out),
    ])
    assert code == 2


def test_eval_variant_round_trip(trained_run, tmp_path):
    code, out = run_eval(trained_run, tmp_path, "b2n", "--variant", "global_only")
    assert code == 0
    assert json.loads(out.read_text())["metadata"]["variant"] == "global_only"


def test_eval_workers_match_serial(trained_run, tmp_path):
    _, serial = run_eval(trained_run, tmp_path, "gzs")
    serial_report = json.loads(serial.read_text())
    (tmp_path / "p").mkdir()
    code, parallel = run_eval(trained_run, tmp_path / "p", "gzs", "--workers", "3")
    assert code == 0
    parallel_report = json.loads(parallel.read_text())
    assert serial_report["metrics"] == parallel_report["metrics"]


def test_describe_with_cache(tmp_path, monkeypatch, capsys):
    manifest = tmp_path / "m.json"
    manifest.write_text(json.dumps({"dataset": "mini", "classes": ["cat"], "samples": []}))
    cache = tmp_path / "cache" / "mini"
    cache.mkdir(parents=True)
    digest = hashlib.sha256(b"cat").hexdigest()
    (cache / f"{digest}.json").write_text(json.dumps({"descriptions": ["has whiskers"]}))
    monkeypatch.setenv("SAP_CACHE_DIR", str(tmp_path / "cache"))

    out = tmp_path / "catalog.json"
    assert main(["describe", "--manifest", str(manifest), "--out", str(out), "--cached-only"]) == 0
    catalog = load_catalog(out)
    assert catalog.descriptions_for("cat") == ("has whiskers",)
    first = out.read_bytes()
    assert main(["describe", "--manifest", str(manifest), "--out", str(out), "--cached-only"]) == 0
    assert out.read_bytes() == first


def test_describe_cold_cache_exit_1(tmp_path, monkeypatch, capsys):
    manifest = tmp_path / "m.json"
    manifest.write_text(json.dumps({"dataset": "mini", "classes": ["dog"], "samples": []}))
    monkeypatch.setenv("SAP_CACHE_DIR", str(tmp_path / "empty-cache"))
    monkeypatch.delenv("SAP_LLM_API_KEY", raising=False)
    code = main(["describe", "--manifest", str(manifest), "--out", str(tmp_path / "c.json"), "--cached-only"])
    assert code == 1
    assert "SAP_LLM_API_KEY" in capsys.readouterr().err


def test_describe_malformed_manifest_exit_2(tmp_path, capsys):
    manifest = tmp_path / "m.json"
    manifest.write_text("{broken")
    assert main(["describe", "--manifest", str(manifest), "--out", str(tmp_path / "c.json")]) == 2


def test_report_aggregation(tmp_path, capsys):
    r1 = {"protocol": "fewshot", "metrics": {"accuracy": 10.0}, "counts": {}, "metadata": {}}
    r2 = {"protocol": "fewshot", "metrics": {"accuracy": 20.0}, "counts": {}, "metadata": {}}
    p1, p2 = tmp_path / "r1.json", tmp_path / "r2.json"
    p1.write_text(json.dumps(r1))
    p2.write_text(json.dumps(r2))
    out = tmp_path / "agg.json"
    assert main(["report", str(p1), str(p2), "--out", str(out)]) == 0
    aggregate = json.loads(out.read_text())
    assert aggregate["metrics"]["accuracy"] == 15.0
    assert out.with_suffix(".txt").exists()

    # single report passes through, identical reports collapse to themselves
    assert main(["report", str(p1), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["metrics"]["accuracy"] == 10.0
    assert main(["report", str(p1), str(p1), str(p1), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["metrics"]["accuracy"] == 10.0


def test_report_mixed_protocols_exit_2(tmp_path, capsys):
    pa = tmp_path / "a.json"
    pb = tmp_path / "b.json"
    pa.write_text(json.dumps({"protocol": "b2n", "metrics": {"HM": 1.0}}))
    pb.write_text(json.dumps({"protocol": "gzs", "metrics": {"gHM": 1.0}}))
    assert main(["report", str(pa), str(pb)]) == 2
