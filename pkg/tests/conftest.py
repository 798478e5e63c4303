import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "engine",
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("engine")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_world(tmp_path):
    """A small generated dataset shared by matcher/evaluator/cli tests."""
    from insdet import store, synthgen

    config = synthgen.SynthConfig(
        n_instances=6,
        refs_per_instance=10,
        synth_views_per_instance=4,
        dim=16,
        scenes=4,
        proposals_per_scene=10,
        distractor_count=24,
        ref_noise=0.05,
        proposal_noise=0.05,
        shift_rotation=0.3,
        shift_scale_spread=0.3,
        clutter_fraction=0.2,
        seed=42,
    )
    world = synthgen.generate(config, tmp_path / "tiny")
    return config, world, store.load_manifest(world.manifest_path)
