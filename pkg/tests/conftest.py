import os
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# the synthetic benchmark: seed 7, 16 videos, T=256, D=64, C=4, two events per video
SYNTH = dict(seed=7, n_videos=16, T=256, D=64, C=4, events_per_video=2)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    from unimd.datamodel import gen_synthetic

    out = tmp_path_factory.mktemp("synth")
    truth = gen_synthetic(out, **SYNTH)
    return out, truth


@pytest.fixture(scope="session")
def synth_data(synth_dir):
    from unimd.datamodel import load_dataset

    out, truth = synth_dir
    manifest, catalog = load_dataset(out / "manifest.json", out / "embeddings.umde")
    return manifest, catalog, truth


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """A quick dataset for loop and CLI tests."""
    from unimd.datamodel import gen_synthetic, load_dataset

    out = tmp_path_factory.mktemp("small")
    truth = gen_synthetic(out, seed=3, n_videos=6, T=64, D=16, C=3, events_per_video=1, min_len=4, max_len=8,
                          val_videos=2)
    manifest, catalog = load_dataset(out / "manifest.json", out / "embeddings.umde")
    return out, manifest, catalog, truth


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
