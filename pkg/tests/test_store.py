import json
import struct

import numpy as np
import pytest

from insdet import store
from insdet.errors import EngineError


def write_raw(path, magic=b"IDOW", version=1, reserved=0, n=0, q=0, payload=b""):
    path.write_bytes(struct.pack("<4sHHII", magic, version, reserved, n, q) + payload)


class TestEmbeddingFormat:
    def test_round_trip_exact_bytes(self, tmp_path, rng):
        matrix = rng.standard_normal((3, 4)).astype(np.float32)
        path = tmp_path / "m.idow"
        store.write_embeddings(matrix, path)
        loaded = store.read_embeddings(path)
        assert loaded.dtype == np.float32
        assert np.array_equal(loaded, matrix)
        store.write_embeddings(loaded, tmp_path / "again.idow")
        assert path.read_bytes() == (tmp_path / "again.idow").read_bytes()

    def test_many_random_round_trips(self, tmp_path, rng):
        path = tmp_path / "loop.idow"
        for _ in range(300):
            n, q = int(rng.integers(0, 7)), int(rng.integers(1, 7))
            matrix = rng.standard_normal((n, q)).astype(np.float32)
            store.write_embeddings(matrix, path)
            assert np.array_equal(store.read_embeddings(path), matrix)

    def test_single_zero_value_layout(self, tmp_path):
        path = tmp_path / "one.idow"
        store.write_embeddings(np.zeros((1, 1), dtype=np.float32), path)
        blob = path.read_bytes()
        assert len(blob) == 20
        assert blob[-4:] == b"\x00\x00\x00\x00"

    def test_empty_matrix_is_header_only(self, tmp_path):
        path = tmp_path / "empty.idow"
        store.write_embeddings(np.zeros((0, 5), dtype=np.float32), path)
        assert len(path.read_bytes()) == 16

    def test_two_by_two_length(self, tmp_path):
        path = tmp_path / "four.idow"
        store.write_embeddings(np.ones((2, 2), dtype=np.float32), path)
        assert len(path.read_bytes()) == 32

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.idow"
        write_raw(path, magic=b"XXXX", n=1, q=1, payload=b"\x00" * 4)
        with pytest.raises(EngineError) as err:
            store.read_embeddings(path)
        assert err.value.code == "BadMagic"

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "v2.idow"
        write_raw(path, version=2, n=1, q=1, payload=b"\x00" * 4)
        with pytest.raises(EngineError) as err:
            store.read_embeddings(path)
        assert err.value.code == "VersionMismatch"

    def test_reserved_must_be_zero(self, tmp_path):
        path = tmp_path / "r.idow"
        write_raw(path, reserved=7, n=1, q=1, payload=b"\x00" * 4)
        with pytest.raises(EngineError) as err:
            store.read_embeddings(path)
        assert err.value.code == "VersionMismatch"

    def test_truncated_payload(self, tmp_path):
        # n=2, q=3 declares 24 payload bytes; provide 20
        path = tmp_path / "t.idow"
        write_raw(path, n=2, q=3, payload=b"\x00" * 20)
        with pytest.raises(EngineError) as err:
            store.read_embeddings(path)
        assert err.value.code == "Truncated"

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "h.idow"
        path.write_bytes(b"IDOW\x01")
        with pytest.raises(EngineError) as err:
            store.read_embeddings(path)
        assert err.value.code == "Truncated"

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "x.idow"
        write_raw(path, n=1, q=1, payload=b"\x00" * 8)
        with pytest.raises(EngineError) as err:
            store.read_embeddings(path)
        assert err.value.code == "TrailingBytes"

    def test_non_finite_payload(self, tmp_path):
        path = tmp_path / "nan.idow"
        write_raw(path, n=1, q=1, payload=struct.pack("<f", float("nan")))
        with pytest.raises(EngineError) as err:
            store.read_embeddings(path)
        assert err.value.code == "NonFinite"

    def test_write_rejects_non_finite(self, tmp_path):
        with pytest.raises(EngineError) as err:
            store.write_embeddings(np.array([[np.inf]]), tmp_path / "inf.idow")
        assert err.value.code == "NonFinite"


class TestCheckpointAndTruth:
    def test_adapter_round_trip(self, tmp_path, rng):
        weight = rng.standard_normal((3, 5)).astype(np.float32).astype(np.float64)
        bias = rng.standard_normal(3).astype(np.float32).astype(np.float64)
        path = tmp_path / "a.idoa"
        store.write_adapter_checkpoint(weight, bias, path)
        w2, b2 = store.read_adapter_checkpoint(path)
        assert np.array_equal(w2, weight)
        assert np.array_equal(b2, bias)
        assert len(path.read_bytes()) == 16 + 4 * (3 * 5 + 3)

    def test_adapter_magic_guard(self, tmp_path, rng):
        store.write_embeddings(rng.standard_normal((2, 2)).astype(np.float32), tmp_path / "e.idow")
        with pytest.raises(EngineError) as err:
            store.read_adapter_checkpoint(tmp_path / "e.idow")
        assert err.value.code == "BadMagic"

    def test_truth_round_trip(self, tmp_path, rng):
        protos = rng.standard_normal((4, 6)).astype(np.float32).astype(np.float64)
        shift = rng.standard_normal((6, 6)).astype(np.float32).astype(np.float64)
        path = tmp_path / "t.idot"
        store.write_truth(protos, shift, path)
        p2, s2 = store.read_truth(path)
        assert np.array_equal(p2, protos)
        assert np.array_equal(s2, shift)
        assert len(path.read_bytes()) == 16 + 4 * (4 * 6 + 36)


def minimal_manifest(tmp_path, rng, *, dim=4, ref_rows=3, proposal_rows=2, mutate=None):
    store.write_embeddings(rng.standard_normal((ref_rows, dim)).astype(np.float32), tmp_path / "refs.idow")
    store.write_embeddings(rng.standard_normal((proposal_rows, dim)).astype(np.float32), tmp_path / "props.idow")
    doc = {
        "format_version": 1,
        "dim": dim,
        "size_thresholds": [1024.0, 9216.0],
        "reference_groups": [
            {
                "path": "refs.idow",
                "origin": "real",
                "items": [{"instance": i % 2, "row": i, "view_index": i} for i in range(ref_rows)],
            }
        ],
        "proposals_file": "props.idow",
        "scenes": [
            {
                "id": "s0",
                "width": 100,
                "height": 100,
                "difficulty": "easy",
                "proposals": [{"row": 0, "box": [0, 0, 10, 10], "detector_score": 0.5}],
                "ground_truth": [{"instance": 0, "box": [0, 0, 10, 10]}],
            },
            {
                "id": "s1",
                "width": 100,
                "height": 100,
                "difficulty": "hard",
                "proposals": [{"row": 1, "box": [20, 20, 10, 10]}],
                "ground_truth": [{"instance": 1, "box": [20, 20, 10, 10]}],
            },
        ],
    }
    if mutate:
        mutate(doc)
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc))
    return path


class TestManifest:
    def test_valid_manifest_loads(self, tmp_path, rng):
        manifest = store.load_manifest(minimal_manifest(tmp_path, rng))
        assert manifest.dim == 4
        assert len(manifest.references) == 3
        assert manifest.reference_matrix.shape == (3, 4)
        assert [s.scene_id for s in manifest.scenes] == ["s0", "s1"]
        assert manifest.scenes[0].proposals[0].detector_score == 0.5
        assert manifest.scenes[1].proposals[0].detector_score is None

    def test_dangling_reference_row(self, tmp_path, rng):
        def mutate(doc):
            doc["reference_groups"][0]["items"][0]["row"] = 3  # file has rows 0..2

        with pytest.raises(EngineError) as err:
            store.load_manifest(minimal_manifest(tmp_path, rng, mutate=mutate))
        assert err.value.code == "DanglingIndex"

    def test_dangling_proposal_row(self, tmp_path, rng):
        def mutate(doc):
            doc["scenes"][0]["proposals"][0]["row"] = 99

        with pytest.raises(EngineError) as err:
            store.load_manifest(minimal_manifest(tmp_path, rng, mutate=mutate))
        assert err.value.code == "DanglingIndex"

    def test_dim_mismatch(self, tmp_path, rng):
        def mutate(doc):
            doc["dim"] = 8

        with pytest.raises(EngineError) as err:
            store.load_manifest(minimal_manifest(tmp_path, rng, mutate=mutate))
        assert err.value.code == "DimMismatch"

    def test_duplicate_scene(self, tmp_path, rng):
        def mutate(doc):
            doc["scenes"][1]["id"] = "s0"

        with pytest.raises(EngineError) as err:
            store.load_manifest(minimal_manifest(tmp_path, rng, mutate=mutate))
        assert err.value.code == "DuplicateScene"

    def test_ground_truth_without_references(self, tmp_path, rng):
        def mutate(doc):
            doc["scenes"][0]["ground_truth"][0]["instance"] = 7

        with pytest.raises(EngineError) as err:
            store.load_manifest(minimal_manifest(tmp_path, rng, mutate=mutate))
        assert err.value.code == "UnknownInstance"

    def test_novel_instance_allowed(self, tmp_path, rng):
        def mutate(doc):
            doc["scenes"][0]["ground_truth"][0] = {"instance": 7, "box": [0, 0, 10, 10], "novel": True}

        manifest = store.load_manifest(minimal_manifest(tmp_path, rng, mutate=mutate))
        assert manifest.scenes[0].ground_truth[0].novel

    def test_detector_score_range(self, tmp_path, rng):
        def mutate(doc):
            doc["scenes"][0]["proposals"][0]["detector_score"] = 1.5

        with pytest.raises(EngineError) as err:
            store.load_manifest(minimal_manifest(tmp_path, rng, mutate=mutate))
        assert err.value.code == "SchemaViolation"

    def test_threshold_order(self, tmp_path, rng):
        def mutate(doc):
            doc["size_thresholds"] = [9216.0, 1024.0]

        with pytest.raises(EngineError) as err:
            store.load_manifest(minimal_manifest(tmp_path, rng, mutate=mutate))
        assert err.value.code == "SchemaViolation"

    def test_format_version_required(self, tmp_path, rng):
        def mutate(doc):
            doc["format_version"] = 2

        with pytest.raises(EngineError) as err:
            store.load_manifest(minimal_manifest(tmp_path, rng, mutate=mutate))
        assert err.value.code == "SchemaViolation"

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(EngineError) as err:
            store.load_manifest(tmp_path / "nope.json")
        assert err.value.code == "MissingFile"

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(EngineError) as err:
            store.load_manifest(path)
        assert err.value.code == "SchemaViolation"

    def test_distractor_count_check(self, tmp_path, rng):
        store.write_embeddings(rng.standard_normal((5, 4)).astype(np.float32), tmp_path / "d.idow")

        def mutate(doc):
            doc["distractors"] = {"path": "d.idow", "count": 6}

        with pytest.raises(EngineError) as err:
            store.load_manifest(minimal_manifest(tmp_path, rng, mutate=mutate))
        assert err.value.code == "SchemaViolation"

    def test_generator_output_loads_with_expected_counts(self, tiny_world):
        config, world, manifest = tiny_world
        assert manifest.dim == config.dim
        real = [r for r in manifest.references if r.origin == "real"]
        synth = [r for r in manifest.references if r.origin == "synthetic"]
        assert len(real) == config.n_instances * config.refs_per_instance
        assert len(synth) == config.n_instances * config.synth_views_per_instance
        assert len(manifest.scenes) == config.scenes
        assert manifest.proposal_matrix.shape == (config.scenes * config.proposals_per_scene, config.dim)
        assert len(manifest.distractors) == config.distractor_count
