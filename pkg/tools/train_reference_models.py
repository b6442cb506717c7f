#!/usr/bin/env python3
"""Train the bundled reference forests on synthetic flows and sign them.

The signing key is generated per run and discarded; only the public half is
written next to the models. Re-running produces different signatures, so the
models and the key must be committed together.

    python3 tools/train_reference_models.py [--out src/ndrflow/models] [--seed 7]
"""

import argparse
import logging
import os
import random

import numpy as np
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat
from sklearn.ensemble import RandomForestClassifier

from ndrflow import synth
from ndrflow.features import COMPUTED_SLOTS, FEATURE_COUNT, HALF_OPEN_SLOT, extract
from ndrflow.forest import THRESHOLD_MAX, THRESHOLD_MIN, AttackClass, write_signed_model
from ndrflow.pipeline import replay

TRAINED_SLOTS = tuple(sorted(set(COMPUTED_SLOTS) | {HALF_OPEN_SLOT}))


def scenario(rng, t0):
    """One minute of office traffic with one source per attack class."""
    third = rng.randrange(2, 250)
    ransom = f"10.2.0.{third}"
    ddos_srcs = [f"198.51.100.{rng.randrange(1, 250)}" for _ in range(rng.randint(2, 5))]
    scanner = f"203.0.113.{rng.randrange(1, 250)}"
    lateral = f"10.3.0.{rng.randrange(2, 250)}"
    streams = [synth.benign_office(rng, t0, 60, clients=rng.randint(6, 14), sessions_per_client=rng.randint(4, 9))]
    streams.append(
        synth.smb_burst(ransom, [f"10.1.1.{i}" for i in range(rng.randint(4, 12))], t0 + rng.randrange(0, 30_000_000),
                        spacing_us=rng.randint(50_000, 400_000))
    )
    streams.append(synth.syn_flood(ddos_srcs, "10.1.0.5", 80, t0 + rng.randrange(0, 30_000_000), rng.randint(200, 600)))
    streams.append(
        synth.port_scan(scanner, "10.1.0.9", rng.sample(range(1, 10000), rng.randint(12, 40)),
                        t0 + rng.randrange(0, 30_000_000), spacing_us=rng.randint(20_000, 200_000), answered=rng.random() < 0.5)
    )
    lat = []
    for i in range(rng.randint(6, 12)):
        lat.extend(synth.tcp_session(lateral, 45000 + i, f"10.1.2.{i + 1}", rng.choice((22, 3389, 5985)),
                                     t0 + rng.randrange(0, 50_000_000), exchanges=1, gap_us=3_000))
    streams.append(lat)
    labels = {ransom: AttackClass.RANSOMWARE, scanner: AttackClass.TRAFFIC, lateral: AttackClass.INTERNAL}
    labels.update({s: AttackClass.DDOS for s in ddos_srcs})
    return synth.merge(*streams), labels


def dataset(seed, rounds):
    rng = random.Random(seed)
    X, y = [], []
    for r in range(rounds):
        packets, labels = scenario(rng, 1_600_000_000_000_000 + r * 120_000_000)
        result = replay(packets, keep_flows=True)
        for flow in result.flows:
            v = extract(flow, flow.window).values
            X.append([v[i] for i in TRAINED_SLOTS])
            y.append(labels.get(flow.src_ip))
    return np.array(X), y


def to_document(forest, label, version):
    trees = []
    for est in forest.estimators_:
        t = est.tree_
        nodes = []
        for i in range(t.node_count):
            if t.children_left[i] == -1:
                counts = t.value[i][0]
                nodes.append({"leaf": round(float(counts[1] / counts.sum()), 6)})
            else:
                th = min(max(float(t.threshold[i]), THRESHOLD_MIN), THRESHOLD_MAX)
                nodes.append({
                    "feature": TRAINED_SLOTS[t.feature[i]],
                    "threshold": round(th, 6),
                    "left": int(t.children_left[i]),
                    "right": int(t.children_right[i]),
                })
        trees.append({"root": 0, "nodes": nodes})
    return {"class": label.value, "feature_count": FEATURE_COUNT, "version": version, "trees": trees}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=os.path.join("src", "ndrflow", "models"))
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--rounds", type=int, default=12)
    ap.add_argument("--trees", type=int, default=10)
    ap.add_argument("--depth", type=int, default=6)
    args = ap.parse_args()
    logging.getLogger("ndrflow").setLevel(logging.ERROR)

    X, y = dataset(args.seed, args.rounds)
    os.makedirs(args.out, exist_ok=True)
    key = Ed25519PrivateKey.generate()
    pub = key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    with open(os.path.join(args.out, "reference.pub"), "w") as fh:
        fh.write(pub.hex() + "\n")
    for label in AttackClass:
        target = np.array([1 if lab is label else 0 for lab in y])
        forest = RandomForestClassifier(
            n_estimators=args.trees, max_depth=args.depth, random_state=args.seed, class_weight="balanced"
        ).fit(X, target)
        doc = to_document(forest, label, f"reference-{args.seed}")
        path = os.path.join(args.out, f"{label.value.lower()}.json")
        write_signed_model(path, doc, key)
        print(f"{label.value:<11} positives={int(target.sum()):>5} of {len(target)}  train_acc={forest.score(X, target):.4f}  -> {path}")


if __name__ == "__main__":
    main()
