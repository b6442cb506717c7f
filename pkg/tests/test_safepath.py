import os

import pytest

from ndrflow.errors import PathResolutionError, SecurityViolation
from ndrflow.safepath import PathClass, lexical_normal, resolve, resolve_as, resolve_config, resolve_seed
from fuzzing import fuzz


@pytest.fixture
def root(tmp_path):
    base = os.path.realpath(tmp_path) + "/ml-defender/"
    os.makedirs(base + "fast")
    os.makedirs(base + "a")
    with open(base + "fast/config.json", "w") as fh:
        fh.write("{}")
    return base


def seed_file(path, mode=0o400):
    with open(path, "wb") as fh:
        fh.write(os.urandom(32))
    os.chmod(path, mode)
    return path


def test_resolve_in_prefix(root):
    assert resolve(root + "fast/config.json", root) == root + "fast/config.json"


def test_resolve_traversal(root):
    with pytest.raises(SecurityViolation):
        resolve(root + "../passwd", root)


def test_resolve_normalizes(root):
    assert resolve(root + "./a//b.json", root) == root + "a/b.json"


def test_resolve_missing_parent(root):
    with pytest.raises(PathResolutionError):
        resolve(root + "nope/x.json", root)


def test_prefix_itself_and_empty(root):
    with pytest.raises(SecurityViolation):
        resolve(root, root)
    with pytest.raises(SecurityViolation):
        resolve_config(root.rstrip("/"), root)
    for fn in (resolve, resolve_seed, resolve_config):
        with pytest.raises(PathResolutionError):
            fn("", root)


def test_prefix_must_be_canonical_dir(root):
    with pytest.raises(ValueError):
        resolve(root + "x", root.rstrip("/"))


def test_sibling_prefix_rejected(root):
    sibling = root.rstrip("/") + "-evil/"
    os.makedirs(sibling)
    with pytest.raises(SecurityViolation):
        resolve(sibling + "x", root)


def test_seed_0400_accepted(root):
    p = seed_file(root + "seed.bin")
    assert resolve_seed(p, root) == p


def test_seed_0600_warns(root, caplog):
    p = seed_file(root + "seed.bin", 0o600)
    import logging

    with caplog.at_level(logging.WARNING, logger="ndrflow.safepath"):
        assert resolve_seed(p, root) == p
    assert "0600" in caplog.text


@pytest.mark.parametrize("mode", [0o644, 0o640, 0o444, 0o700, 0o200])
def test_seed_bad_modes(root, mode):
    p = seed_file(root + "seed.bin", mode)
    with pytest.raises(SecurityViolation):
        resolve_seed(p, root)


def test_seed_symlink_in_prefix_rejected(root):
    target = seed_file(root + "real.bin")
    os.symlink(target, root + "link.bin")
    with pytest.raises(SecurityViolation, match="symlink"):
        resolve_seed(root + "link.bin", root)


def test_seed_missing(root):
    with pytest.raises(PathResolutionError):
        resolve_seed(root + "absent.bin", root)


def test_seed_directory_rejected(root):
    with pytest.raises(SecurityViolation):
        resolve_seed(root + "fast", root)


def test_seed_outside_prefix(tmp_path, root):
    p = seed_file(os.path.realpath(tmp_path) + "/outside.bin")
    with pytest.raises(SecurityViolation):
        resolve_seed(p, root)


def test_config_symlink_followed(root, tmp_path):
    elsewhere = os.path.realpath(tmp_path) + "/elsewhere.json"
    with open(elsewhere, "w") as fh:
        fh.write("{}")
    os.makedirs(root + "fd")
    os.symlink(elsewhere, root + "fd/config.json")
    assert resolve_config(root + "fd/config.json", root) == elsewhere


def test_config_lexical_escape_without_fs(monkeypatch):
    touched = []

    def spy(real):
        return lambda *a, **k: touched.append(a) or real(*a, **k)

    monkeypatch.setattr(os.path, "realpath", spy(os.path.realpath))
    monkeypatch.setattr(os.path, "isdir", spy(os.path.isdir))
    monkeypatch.setattr(os, "lstat", spy(os.lstat))
    with pytest.raises(SecurityViolation):
        resolve_config("/nonexistent-prefix/../etc/shadow", "/nonexistent-prefix/")
    with pytest.raises(SecurityViolation):
        resolve_config("conf/x.json", "/nonexistent-prefix/")
    assert touched == []


def test_lexical_normal():
    assert lexical_normal("/etc/ml-defender/./a//b.json") == "/etc/ml-defender/a/b.json"
    assert lexical_normal("//etc/x") == "/etc/x"


def test_bytes_and_nul(root):
    assert resolve((root + "fast/config.json").encode(), root) == root + "fast/config.json"
    with pytest.raises(PathResolutionError):
        resolve(root + "fast\0/x", root)


def test_resolve_as_dispatch(root):
    assert resolve_as(PathClass.CONFIG, root + "fast/config.json", root).endswith("config.json")


@pytest.mark.parametrize("name", ["resolve", "resolve_seed", "resolve_config"])
def test_short_fuzz(name):
    _, counts, crashes = fuzz(name, 2.0, seed=hash(name) & 0xFFFF)
    assert crashes == [] and counts.get("crash", 0) == 0
    assert counts["outside"] == 0
    assert counts["violation"] > 0 and counts["accepted"] + counts["resolution"] > 0
