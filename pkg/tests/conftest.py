"""Shared datasets and trained models.

Training is deterministic, so trained checkpoints are cached under the pytest
cache directory keyed by their recipe; a cold run trains them once.
"""

import hashlib
import json

import numpy as np
import pytest

from edgestorm import edgenet, synth, transfer

EDGE_RECIPE = {"n": 200, "extents": 64, "data_seed": 7, "init_seed": 1, "epochs": 30, "lr": 1.0, "seed": 0}
CLS_RECIPE = {"n": 500, "extents": 64, "data_seed": 11, "init_seed": 5, "seed": 1, "arch": "pool-after-first"}


def _cache_path(request, kind, recipe):
    key = hashlib.sha256(json.dumps({"kind": kind, **recipe}, sort_keys=True).encode()).hexdigest()[:16]
    return request.config.cache.mkdir("edgestorm-models") / f"{kind}-{key}.ckpt"


@pytest.fixture(scope="session")
def edge_train_set():
    r = EDGE_RECIPE
    return synth.generate_dataset(r["n"], r["extents"], r["data_seed"])


@pytest.fixture(scope="session")
def edge_training(request, edge_train_set):
    """(model, loss_trace); the trace is stored next to the cached checkpoint."""
    path = _cache_path(request, "edge", EDGE_RECIPE)
    trace_path = path.with_suffix(".json")
    if path.exists() and trace_path.exists():
        return edgenet.EdgeModel.load(path), json.loads(trace_path.read_text())
    r = EDGE_RECIPE
    res = edgenet.train(
        edgenet.EdgeModel.init(r["init_seed"]), edge_train_set.images, edge_train_set.edges, r["epochs"], r["lr"], r["seed"]
    )
    res.model.save(path)
    trace_path.write_text(json.dumps(res.loss_trace))
    return res.model, res.loss_trace


@pytest.fixture(scope="session")
def edge_model(edge_training):
    return edge_training[0]


@pytest.fixture(scope="session")
def classifier(request):
    path = _cache_path(request, "cls", CLS_RECIPE)
    if path.exists():
        return transfer.Classifier.load(path)
    r = CLS_RECIPE
    data = synth.generate_dataset(r["n"], r["extents"], r["data_seed"])
    model = transfer.train_classifier(transfer.Classifier.init(r["init_seed"]), data.images, data.labels, seed=r["seed"]).model
    model.save(path)
    return model


@pytest.fixture(scope="session")
def test_set():
    """50 held-out scenes (seed disjoint from every training set)."""
    return synth.generate_dataset(50, 64, 12345)


@pytest.fixture(scope="session")
def transfer_set():
    return synth.generate_dataset(200, 64, 99)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
