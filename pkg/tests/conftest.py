import hashlib
import json
import os
import time
from dataclasses import asdict

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from flowinv import bench, io
from flowinv.training import IMAGE_SHAPE, N_CLASSES, NeuralField

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def _cache_key():
    arch = NeuralField(IMAGE_SHAPE, N_CLASSES).param_shapes()
    cfg = {"train": asdict(bench.SHAPES_TRAIN), "n": bench.SHAPES_N_DATA, "seed": bench.SHAPES_DATA_SEED,
           "arch": arch}
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


@pytest.fixture(scope="session")
def shapes_model(request):
    """The reference shapes field with its wall-clock training time.

    Trained once and cached in pytest's cache directory; delete
    ``.pytest_cache`` (or pass ``--cache-clear``) to retrain from scratch.
    """
    cache_dir = request.config.cache.mkdir("flowinv")
    path = os.path.join(cache_dir, f"shapes_{_cache_key()}.ckpt")
    if os.path.exists(path):
        field, header = io.load_checkpoint(path)
        return field, header["extra"]["train_seconds"]
    t0 = time.perf_counter()
    field = bench.train_shapes()
    seconds = time.perf_counter() - t0
    io.save_checkpoint(path, field, asdict(bench.SHAPES_TRAIN), bench.SHAPES_TRAIN.seed,
                       extra={"train_seconds": seconds})
    field, _ = io.load_checkpoint(path)
    return field, seconds


@pytest.fixture(scope="session")
def shapes_field(shapes_model):
    return shapes_model[0]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, title, detail, seconds = VERDICTS[n]
        extra = " ".join(f"{k}={v}" for k, v in detail.items())
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}  [{extra}]")
