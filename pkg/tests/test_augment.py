import numpy as np
import pytest

from insdet import store
from insdet.augment import AugmentationConfig, distractor_correlation, select_references, write_distractor_stats
from insdet.errors import EngineError
from insdet.store import DistractorPool

from oracles import brute_distractor_correlation


class TestSelectReferences:
    def test_disabled_returns_exactly_real(self, tiny_world):
        _, _, manifest = tiny_world
        selected = select_references(manifest, AugmentationConfig(), "test")
        assert selected == [r for r in manifest.references if r.origin == "real"]

    def test_exhaustive_selection(self, tiny_world):
        config, _, manifest = tiny_world
        aug = AugmentationConfig(
            use_synthetic_in_test=True,
            synth_per_instance_test=config.synth_views_per_instance,
        )
        selected = select_references(manifest, aug, "test")
        synth = [r for r in selected if r.origin == "synthetic"]
        assert len(synth) == config.n_instances * config.synth_views_per_instance

    def test_same_seed_identical(self, tiny_world):
        _, _, manifest = tiny_world
        aug = AugmentationConfig(use_synthetic_in_test=True, synth_per_instance_test=2, seed=9)
        assert select_references(manifest, aug, "test") == select_references(manifest, aug, "test")

    def test_real_always_subset(self, tiny_world):
        _, _, manifest = tiny_world
        aug = AugmentationConfig(use_synthetic_in_train=True, synth_per_instance_train=1, seed=3)
        selected = select_references(manifest, aug, "train")
        real = [r for r in manifest.references if r.origin == "real"]
        assert selected[: len(real)] == real

    def test_per_instance_counts(self, tiny_world):
        config, _, manifest = tiny_world
        aug = AugmentationConfig(use_synthetic_in_test=True, synth_per_instance_test=2, seed=5)
        selected = select_references(manifest, aug, "test")
        for inst in range(config.n_instances):
            views = [r for r in selected if r.instance == inst and r.origin == "synthetic"]
            assert len(views) == 2
            assert len({v.view_index for v in views}) == 2  # without replacement

    def test_too_many_views_requested(self, tiny_world):
        config, _, manifest = tiny_world
        aug = AugmentationConfig(
            use_synthetic_in_test=True,
            synth_per_instance_test=config.synth_views_per_instance + 1,
        )
        with pytest.raises(EngineError) as err:
            select_references(manifest, aug, "test")
        assert err.value.code == "InsufficientViews"

    def test_bad_phase(self, tiny_world):
        _, _, manifest = tiny_world
        with pytest.raises(EngineError):
            select_references(manifest, AugmentationConfig(), "validation")


class TestDistractorCorrelation:
    def test_identical_distractor_hits_max_one(self, rng):
        refs = rng.standard_normal((4, 6))
        pool = DistractorPool(np.vstack([refs[2], rng.standard_normal(6)]))
        _, peak = distractor_correlation(pool, refs)
        assert peak[0] == pytest.approx(1.0, abs=1e-9)

    def test_orthogonal_distractor(self):
        refs = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
        pool = DistractorPool(np.array([[0, 0, 1.0, 0]]))
        avg, peak = distractor_correlation(pool, refs)
        assert avg[0] == pytest.approx(0.0, abs=1e-12)
        assert peak[0] == pytest.approx(0.0, abs=1e-12)

    def test_matches_double_loop(self, rng):
        pool = DistractorPool(rng.standard_normal((3, 5)))
        refs = rng.standard_normal((5, 5))
        avg, peak = distractor_correlation(pool, refs)
        expected = brute_distractor_correlation(pool.embeddings, refs)
        for i, (ea, em) in enumerate(expected):
            assert avg[i] == pytest.approx(ea, abs=1e-9)
            assert peak[i] == pytest.approx(em, abs=1e-9)

    def test_max_at_least_avg_and_bounded(self, rng):
        pool = DistractorPool(rng.standard_normal((20, 8)))
        refs = rng.standard_normal((15, 8))
        avg, peak = distractor_correlation(pool, refs)
        assert np.all(peak >= avg - 1e-12)
        assert np.all(avg >= -1.0) and np.all(peak <= 1.0)

    def test_empty_inputs_rejected(self, rng):
        with pytest.raises(EngineError) as err:
            distractor_correlation(DistractorPool(np.zeros((0, 4))), rng.standard_normal((2, 4)))
        assert err.value.code == "EmptyInput"
        with pytest.raises(EngineError):
            distractor_correlation(DistractorPool(rng.standard_normal((2, 4))), np.zeros((0, 4)))

    def test_csv_export(self, tmp_path, rng):
        pool = DistractorPool(rng.standard_normal((3, 4)))
        refs = rng.standard_normal((2, 4))
        avg, peak = distractor_correlation(pool, refs)
        out = tmp_path / "stats.csv"
        write_distractor_stats(avg, peak, out)
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "distractor_index,avg_sim,max_sim"
        assert len(lines) == 4
        assert lines[1].startswith("0,")
