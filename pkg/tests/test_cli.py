import json
import os
import shutil
from importlib import resources

import pytest

from ndrflow.cli import main
from ndrflow.config import load_deployment
from ndrflow.errors import ConfigError, SecurityViolation
from ndrflow.forest import AttackClass


@pytest.fixture
def deploy(tmp_path):
    root = os.path.realpath(tmp_path) + "/deploy/"
    os.makedirs(root + "models")
    src = resources.files("ndrflow") / "models"
    for name in os.listdir(src):
        shutil.copy(src / name, root + "models/" + name)
    for name in ("seed.key", "log.key"):
        with open(root + name, "w") as fh:
            fh.write(os.urandom(32).hex())
        os.chmod(root + name, 0o400)
    doc = {
        "heuristics": {"port_scan_threshold": 10},
        "thresholds": {"ransomware": 0.85, "ddos": 0.9, "traffic": 0.8, "internal": 0.85},
        "models": {c.value.lower(): f"models/{c.value.lower()}.json" for c in AttackClass},
        "log": {"path": "events.csv"},
        "keys": {"seed_path": "seed.key", "log_key_path": "log.key", "model_pubkey_path": "models/reference.pub"},
        "firewall": {"chain": "NDRFLOW"},
    }
    with open(root + "config.json", "w") as fh:
        json.dump(doc, fh)
    return root, doc


def rewrite(root, doc):
    with open(root + "config.json", "w") as fh:
        json.dump(doc, fh)


def test_load_deployment(deploy):
    root, _ = deploy
    d = load_deployment(root + "config.json", root)
    assert set(d.pipeline.models) == set(AttackClass)
    assert d.log_path == root + "events.csv"
    assert len(d.pipeline.seed) == 32 and len(d.pipeline.log_key) == 32


def test_unknown_field(deploy):
    root, doc = deploy
    rewrite(root, {**doc, "extra": 1})
    with pytest.raises(ConfigError, match="extra"):
        load_deployment(root + "config.json", root)


def test_config_outside_root(deploy, tmp_path):
    root, _ = deploy
    with pytest.raises(SecurityViolation):
        load_deployment(root + "../config.json", root)


def test_symlinked_seed_rejected(deploy):
    root, doc = deploy
    os.symlink(root + "seed.key", root + "seed-link.key")
    rewrite(root, {**doc, "keys": {**doc["keys"], "seed_path": "seed-link.key"}})
    with pytest.raises(SecurityViolation):
        load_deployment(root + "config.json", root)


def test_model_class_mismatch(deploy):
    root, doc = deploy
    rewrite(root, {**doc, "models": {"ddos": "models/traffic.json"}})
    with pytest.raises(ConfigError, match="declares class"):
        load_deployment(root + "config.json", root)


def test_log_key_derived_from_seed(deploy):
    root, doc = deploy
    keys = {k: v for k, v in doc["keys"].items() if k != "log_key_path"}
    rewrite(root, {**doc, "keys": keys})
    d = load_deployment(root + "config.json", root)
    from ndrflow.transport import derive_log_key

    assert d.pipeline.log_key == derive_log_key(d.pipeline.seed)


def test_cli_replay_evaluate_roundtrip(deploy, capsys):
    root, _ = deploy
    trace = root + "t.pcap"
    assert main(["synth", trace, "--duration", "10"]) == 0
    rep = root + "report"
    assert main(["--root", root, "replay", trace, "--config", root + "config.json", "--as-fast-as-possible",
                 "--header", "--report-dir", rep]) == 0
    out = capsys.readouterr().out
    assert "errors=(deser:0, feat:0, inf:0)" in out
    assert os.path.getsize(rep + "/queues.png") > 0
    assert os.path.exists(rep + "/latency.png") and os.path.exists(rep + "/alerts.csv")
    with open(root + "truth.txt", "w") as fh:
        fh.write("10.1.0.66\n10.1.0.77\n")
    assert main(["--root", root, "evaluate", root + "events.csv", "--truth", root + "truth.txt",
                 "--config", root + "config.json"]) == 0
    out = capsys.readouterr().out
    assert "precision\t1.0000" in out


def test_cli_tampered_log_exit_4(deploy, capsys):
    root, _ = deploy
    trace = root + "t.txt"
    main(["synth", trace, "--duration", "10"])
    main(["--root", root, "replay", trace, "--config", root + "config.json", "--as-fast-as-possible"])
    data = open(root + "events.csv").read().replace("10.1.0.77", "10.1.0.78", 1)
    with open(root + "events.csv", "w") as fh:
        fh.write(data)
    with open(root + "truth.txt", "w") as fh:
        fh.write("10.1.0.66\n")
    capsys.readouterr()
    assert main(["--root", root, "evaluate", root + "events.csv", "--truth", root + "truth.txt",
                 "--config", root + "config.json"]) == 4
    assert "row 1" in capsys.readouterr().err


def test_cli_bad_config_exit_2(deploy):
    root, doc = deploy
    rewrite(root, {**doc, "heuristics": {"rst_ratio_threshold": 1.5}})
    assert main(["--root", root, "replay", root + "x", "--config", root + "config.json"]) == 2


def test_cli_security_exit_3(deploy):
    root, doc = deploy
    rewrite(root, {**doc, "firewall": {"chain": "X; rm -rf /"}})
    assert main(["--root", root, "replay", root + "x", "--config", root + "config.json"]) == 2
    os.chmod(root + "seed.key", 0o644)
    rewrite(root, doc)
    assert main(["--root", root, "replay", root + "x", "--config", root + "config.json"]) == 3


def test_cli_forged_model_exit_4(deploy):
    root, _ = deploy
    path = root + "models/ddos.json"
    data = bytearray(open(path, "rb").read())
    data[10] ^= 1
    open(path, "wb").write(bytes(data))
    assert main(["--root", root, "replay", root + "x", "--config", root + "config.json"]) == 4


def test_cli_sweep_and_schema(tmp_path, capsys):
    p = tmp_path / "s.csv"
    p.write_text("score,label\n" + "".join(f"{i / 100},{int(i >= 50)}\n" for i in range(100)))
    fig = tmp_path / "sweep.png"
    assert main(["sweep", str(p), "--thresholds", "0.1,0.5,0.9", "--hours", "2", "--figure", str(fig)]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[2].startswith("0.5,1.0000,1.0000,0.0000")
    assert "satisfied" in out and fig.stat().st_size > 0
    assert main(["schema"]) == 0
    assert json.loads(capsys.readouterr().out)["feature_count"] == 40
    assert main(["sweep", str(p)]) == 2  # no duration known


def test_cli_latency(tmp_path, capsys):
    assert main(["latency", "--calls", "1000", "--figure", str(tmp_path / "lat.png")]) == 0
    rows = capsys.readouterr().out.splitlines()[1:]
    assert len(rows) == 4 and all(int(r.split("\t")[1]) == 1000 and float(r.split("\t")[2]) > 0 for r in rows)


def test_cli_unreadable_trace(tmp_path):
    assert main(["replay", str(tmp_path / "missing.pcap"), "--as-fast-as-possible"]) == 1


def test_keygen_mode(tmp_path):
    p = tmp_path / "k"
    assert main(["keygen", str(p)]) == 0
    assert (p.stat().st_mode & 0o777) == 0o400
    assert main(["keygen", str(p)]) == 1
