import sys
from pathlib import Path

import numpy as np
import pytest

_SCRIPTS = Path(__file__).resolve().parent.parent / "scripts"
if str(_SCRIPTS) not in sys.path:
    sys.path.insert(0, str(_SCRIPTS))

from harness import StreamConfig, generate_stream  # noqa: E402
from soyo_core import FeatureMatrix, RngStream  # noqa: E402

SMALL_CONFIG = """\
[stream]
n_domains = 3
dim = 8
train_per_domain = 80
test_per_domain = 40

[train]
epochs = 5
"""


@pytest.fixture
def rng():
    return RngStream(1234)


@pytest.fixture
def gen():
    return RngStream(99).child("test-data").generator()


@pytest.fixture
def small_stream():
    cfg = StreamConfig(n_domains=3, dim=8, train_per_domain=80, test_per_domain=40, seed=5)
    return generate_stream(cfg)


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text(SMALL_CONFIG, encoding="utf-8")
    return path


def blobs(gen, centers, n_per, scale=1.0):
    """Rows drawn around each center, grouped by center."""
    centers = np.asarray(centers, dtype=np.float64)
    parts = [c + scale * gen.normal(size=(n_per, centers.shape[1])) for c in centers]
    return FeatureMatrix(np.vstack(parts))
