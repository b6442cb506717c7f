"""Path validation primitives for three path classes.

``resolve``
    General files. Canonical resolution (symlinks followed), then prefix check.
``resolve_seed``
    Cryptographic material. ``lstat`` on the original, unresolved path
    rejects symlinks before any resolution; the file must be regular and
    owner-read-only (0400, 0600 tolerated with a warning); then prefix check.
``resolve_config``
    Configuration. Purely lexical normalization must place the *name* inside
    the prefix before the filesystem is touched; symlinks are then followed.

The allowed prefix is a deployment constant: absolute, ending in ``/``, and
never derived from the path being checked. It is compared verbatim, so it
must itself be canonical.

Callers should open the returned path immediately; the window between the
check and the open is not closed here.
"""

from __future__ import annotations

import logging
import os
import posixpath
import stat
from enum import Enum

from .errors import PathResolutionError, SecurityViolation

log = logging.getLogger(__name__)

SEED_MODE = 0o400
SEED_MODE_TOLERATED = 0o600


class PathClass(Enum):
    GENERAL = "general"
    SEED = "seed"
    CONFIG = "config"


def _as_str(path) -> str:
    if isinstance(path, (bytes, bytearray)):
        return os.fsdecode(bytes(path))
    if isinstance(path, os.PathLike):
        return os.fspath(path)
    if not isinstance(path, str):
        raise PathResolutionError(f"path must be str, bytes or PathLike, got {type(path).__name__}")
    return path


def _check_prefix_constant(allowed_prefix: str) -> str:
    allowed_prefix = _as_str(allowed_prefix)
    if not allowed_prefix.startswith("/") or not allowed_prefix.endswith("/"):
        raise ValueError("allowed_prefix must be absolute and end with '/'")
    return allowed_prefix


def _require_inside(candidate: str, allowed_prefix: str) -> None:
    if candidate == allowed_prefix.rstrip("/") or candidate + "/" == allowed_prefix:
        raise SecurityViolation(f"path is the prefix itself, not a file: {candidate!r}")
    if not candidate.startswith(allowed_prefix):
        raise SecurityViolation(f"path outside allowed prefix: {candidate!r}")


def _canonical(path: str) -> str:
    if not path:
        raise PathResolutionError("empty path")
    if "\0" in path:
        raise PathResolutionError("embedded NUL byte in path")
    try:
        resolved = os.path.realpath(path)
        parent = os.path.dirname(resolved)
        if not os.path.isdir(parent):
            raise PathResolutionError(f"parent directory does not exist: {parent!r}")
    except (OSError, ValueError, UnicodeError) as exc:
        raise PathResolutionError(f"cannot resolve {path!r}: {exc}") from None
    return resolved


def resolve(path, allowed_prefix: str) -> str:
    prefix = _check_prefix_constant(allowed_prefix)
    resolved = _canonical(_as_str(path))
    _require_inside(resolved, prefix)
    return resolved


def resolve_seed(path, allowed_prefix: str) -> str:
    prefix = _check_prefix_constant(allowed_prefix)
    original = _as_str(path)
    if not original:
        raise PathResolutionError("empty path")
    if "\0" in original:
        raise PathResolutionError("embedded NUL byte in path")
    # the symlink check must see the original path; realpath would erase the evidence
    try:
        st = os.lstat(original)
    except (OSError, ValueError, UnicodeError) as exc:
        raise PathResolutionError(f"lstat failed for {original!r}: {exc}") from None
    if stat.S_ISLNK(st.st_mode):
        raise SecurityViolation(f"symlink rejected: {original!r}")
    if not stat.S_ISREG(st.st_mode):
        raise SecurityViolation(f"not a regular file: {original!r}")
    mode = stat.S_IMODE(st.st_mode)
    if mode == SEED_MODE_TOLERATED:
        log.warning("seed file %s has mode 0600; 0400 expected", original)
    elif mode != SEED_MODE:
        raise SecurityViolation(f"permissions {mode:04o} too open for {original!r}; 0400 required")
    resolved = _canonical(original)
    _require_inside(resolved, prefix)
    return resolved


def lexical_normal(path: str) -> str:
    """Textual normalization only: collapses ``.``, ``..`` and repeated separators."""
    normal = posixpath.normpath(path)
    # POSIX keeps a leading "//"; collapse it so the prefix comparison is plain
    if normal.startswith("//"):
        normal = "/" + normal.lstrip("/")
    return normal


def resolve_config(path, allowed_prefix: str) -> str:
    prefix = _check_prefix_constant(allowed_prefix)
    original = _as_str(path)
    if not original:
        raise PathResolutionError("empty path")
    lexical = lexical_normal(original)
    _require_inside(lexical, prefix)
    return _canonical(original)


RESOLVERS = {
    PathClass.GENERAL: resolve,
    PathClass.SEED: resolve_seed,
    PathClass.CONFIG: resolve_config,
}


def resolve_as(path_class: PathClass, path, allowed_prefix: str) -> str:
    return RESOLVERS[path_class](path, allowed_prefix)
