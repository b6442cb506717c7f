"""Bundled reference forests, trained on synthetic flows by
``tools/train_reference_models.py``.

They exist for demos, latency measurement and tests. The bundled public key
is only as trustworthy as the installed package; deployments should point
``keys.model_pubkey_path`` at their own key.
"""

from __future__ import annotations

from importlib import resources

from .forest import AttackClass, load_model, load_public_key
from .pipeline import models_by_class


def _dir():
    return resources.files("ndrflow") / "models"


def reference_public_key():
    with resources.as_file(_dir() / "reference.pub") as path:
        return load_public_key(path)


def reference_models() -> dict:
    key = reference_public_key()
    loaded = []
    for label in AttackClass:
        with resources.as_file(_dir() / f"{label.value.lower()}.json") as path:
            loaded.append(load_model(path, key))
    return models_by_class(loaded)
