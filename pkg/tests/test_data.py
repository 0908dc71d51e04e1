"""Pool construction, manifest round trips, and generator contracts."""

import json

import numpy as np
import pytest

from fewsar.data import (
    Chip,
    DatasetPool,
    SyntheticSpec,
    chip_identity,
    generate_synthetic_pool,
    generate_task_pool,
    load_manifest,
    make_fake_data,
    merge_pools,
    save_manifest,
)
from fewsar.errors import (
    EmptyPoolError,
    ManifestLoadError,
    ParameterError,
    SchemaError,
)


class TestChip:
    def test_rejects_out_of_range_pixels(self):
        with pytest.raises(ParameterError):
            Chip(np.full((16, 16), 1.5))
        with pytest.raises(ParameterError):
            Chip(np.full((16, 16), -0.1))

    def test_rejects_tiny_and_non_2d(self):
        with pytest.raises(ParameterError):
            Chip(np.zeros((4, 4)))
        with pytest.raises(ParameterError):
            Chip(np.zeros((16, 16, 3)))

    def test_pixels_are_frozen(self):
        chip = Chip(np.zeros((16, 16)))
        with pytest.raises(ValueError):
            chip.pixels[0, 0] = 1.0


class TestManifest:
    def _write(self, tmp_path, rows, arrays):
        for name, arr in arrays.items():
            np.save(tmp_path / name, arr)
        manifest = tmp_path / "manifest.jsonl"
        manifest.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        return manifest

    def test_three_row_round_trip(self, tmp_path):
        arrays = {f"c{i}.npy": np.random.default_rng(i).random((16, 16)) for i in range(3)}
        rows = [
            {"path": f"c{i}.npy", "label": l, "tag.condition": "SOC-train"}
            for i, l in enumerate([0, 1, 1])
        ]
        pool = load_manifest(self._write(tmp_path, rows, arrays))
        assert len(pool) == 3
        assert pool.labels == (0, 1, 1)
        assert all(t["condition"] == "SOC-train" for t in pool.tags)

    def test_normalization_by_observed_max(self, tmp_path):
        raw = np.zeros((16, 16))
        raw[3, 3] = 512.0
        pool = load_manifest(self._write(tmp_path, [{"path": "c.npy"}], {"c.npy": raw}))
        assert pool.chips[0].pixels.max() == pytest.approx(1.0)

    def test_declared_max_wins(self, tmp_path):
        raw = np.full((16, 16), 128.0)
        pool = load_manifest(
            self._write(tmp_path, [{"path": "c.npy", "max": 256.0}], {"c.npy": raw})
        )
        assert pool.chips[0].pixels.max() == pytest.approx(0.5)

    def test_string_label_is_schema_error(self, tmp_path):
        arrays = {"c.npy": np.zeros((16, 16))}
        with pytest.raises(SchemaError):
            load_manifest(self._write(tmp_path, [{"path": "c.npy", "label": "tank"}], arrays))

    def test_unknown_field_is_schema_error(self, tmp_path):
        arrays = {"c.npy": np.zeros((16, 16))}
        with pytest.raises(SchemaError):
            load_manifest(self._write(tmp_path, [{"path": "c.npy", "nope": 1}], arrays))

    def test_partial_labels_are_schema_error(self, tmp_path):
        arrays = {f"c{i}.npy": np.zeros((16, 16)) for i in range(2)}
        rows = [{"path": "c0.npy", "label": 0}, {"path": "c1.npy"}]
        with pytest.raises(SchemaError):
            load_manifest(self._write(tmp_path, rows, arrays))

    def test_empty_manifest(self, tmp_path):
        manifest = tmp_path / "manifest.jsonl"
        manifest.write_text("")
        with pytest.raises(EmptyPoolError):
            load_manifest(manifest)

    def test_missing_manifest_and_missing_image(self, tmp_path):
        with pytest.raises(ManifestLoadError, match="does not exist"):
            load_manifest(tmp_path / "nope.jsonl")
        manifest = tmp_path / "manifest.jsonl"
        manifest.write_text(json.dumps({"path": "ghost.npy"}) + "\n")
        with pytest.raises(ManifestLoadError, match="ghost.npy"):
            load_manifest(manifest)

    @pytest.mark.parametrize("fmt,tol", [("npy", 0.0), ("png16", 1.0 / 65535), ("png8", 1.0 / 255)])
    def test_save_load_round_trip(self, tmp_path, fmt, tol):
        spec = SyntheticSpec(num_classes=2, chips_per_class=3, chip_size=16)
        pool = generate_synthetic_pool(spec, seed=5)
        manifest = save_manifest(pool, tmp_path / fmt, image_format=fmt)
        back = load_manifest(manifest)
        assert back.labels == pool.labels
        for i in range(len(pool)):
            np.testing.assert_allclose(
                back.chips[i].pixels, pool.chips[i].pixels, atol=tol + 1e-7
            )
            for key, val in pool.tags[i].items():
                assert back.tags[i][key] == val


class TestSyntheticPool:
    def test_counts_and_balance(self):
        spec = SyntheticSpec(num_classes=4, chips_per_class=10, chip_size=16)
        pool = generate_synthetic_pool(spec, seed=7)
        assert len(pool) == 40
        counts = np.bincount(pool.labels)
        assert list(counts) == [10, 10, 10, 10]

    def test_determinism_bit_identical(self):
        spec = SyntheticSpec(num_classes=3, chips_per_class=4, chip_size=16)
        a = generate_synthetic_pool(spec, seed=11)
        b = generate_synthetic_pool(spec, seed=11)
        for ca, cb in zip(a.chips, b.chips):
            np.testing.assert_array_equal(ca.pixels, cb.pixels)

    def test_condition_shift_moves_class_means(self):
        base = SyntheticSpec(num_classes=3, chips_per_class=8, chip_size=16)
        shifted = SyntheticSpec(num_classes=3, chips_per_class=8, chip_size=16, condition_shift=0.5)
        a = generate_synthetic_pool(base, seed=3, condition="SOC-test")
        b = generate_synthetic_pool(shifted, seed=3, condition="EOC-test")
        for cls in range(3):
            idx = [i for i, l in enumerate(a.labels) if l == cls]
            mean_a = np.mean([a.chips[i].pixels for i in idx], axis=0)
            mean_b = np.mean([b.chips[i].pixels for i in idx], axis=0)
            assert np.linalg.norm(mean_a - mean_b) > 0

    def test_shift_zero_task_pool_eoc_equals_soc_test(self):
        spec = SyntheticSpec(num_classes=2, chips_per_class=4, chip_size=16, condition_shift=0.0)
        pool = generate_task_pool(spec, seed=9, train_per_class=3, test_per_class=4, include_eoc=True)
        soc = pool.indices_with_tag("condition", "SOC-test")
        eoc = pool.indices_with_tag("condition", "EOC-test")
        assert len(soc) == len(eoc) == 8
        for i, j in zip(soc, eoc):
            np.testing.assert_array_equal(pool.chips[i].pixels, pool.chips[j].pixels)

    def test_eoc_tag_applied_when_shifted(self):
        spec = SyntheticSpec(num_classes=2, chips_per_class=2, chip_size=16, condition_shift=0.4)
        pool = generate_synthetic_pool(spec, seed=1)
        assert all(t["condition"] == "EOC-test" for t in pool.tags)

    def test_chip_invariants_on_samples(self):
        spec = SyntheticSpec(num_classes=3, chips_per_class=5, chip_size=24)
        pool = generate_synthetic_pool(spec, seed=2)
        for chip in pool.chips:
            assert chip.pixels.shape == (24, 24)
            assert chip.pixels.min() >= 0.0 and chip.pixels.max() <= 1.0

    def test_same_class_correlation_beats_cross_class(self):
        spec = SyntheticSpec(num_classes=4, chips_per_class=16, chip_size=24, speckle_level=0.4)
        pool = generate_synthetic_pool(spec, seed=13)
        stack = pool.pixel_stack()
        labels = np.asarray(pool.labels)

        def corr(x, y):
            x = x.ravel() - x.mean()
            y = y.ravel() - y.mean()
            return float(x @ y / (np.linalg.norm(x) * np.linalg.norm(y) + 1e-12))

        rng = np.random.default_rng(0)
        same = []
        for _ in range(40):
            cls = rng.integers(0, 4)
            i, j = rng.choice(np.flatnonzero(labels == cls), size=2, replace=False)
            same.append(corr(stack[i], stack[j]))
        means = [stack[labels == c].mean(axis=0) for c in range(4)]
        cross = [corr(means[a], means[b]) for a in range(4) for b in range(a + 1, 4)]
        assert np.mean(same) > np.mean(cross)

    def test_invalid_specs_raise(self):
        with pytest.raises(ParameterError):
            SyntheticSpec(num_classes=1)
        with pytest.raises(ParameterError):
            SyntheticSpec(scatterer_count_range=(5, 2))
        with pytest.raises(ParameterError):
            SyntheticSpec(condition_shift=-0.2)


class TestFakeData:
    def test_shapes_and_range(self):
        pool = make_fake_data(100, 64, seed=0)
        assert len(pool) == 100
        assert pool.labels is None
        stack = pool.pixel_stack()
        assert stack.shape == (100, 64, 64)
        assert stack.min() >= 0.0 and stack.max() <= 1.0

    def test_law_of_large_numbers_mean(self):
        stack = make_fake_data(100, 64, seed=1).pixel_stack()
        assert abs(stack.mean() - 0.5) < 0.01

    def test_n_zero_rejected(self):
        with pytest.raises(ParameterError):
            make_fake_data(0, 32, seed=0)

    def test_deterministic(self):
        a = make_fake_data(5, 16, seed=4).pixel_stack()
        b = make_fake_data(5, 16, seed=4).pixel_stack()
        np.testing.assert_array_equal(a, b)


class TestPoolHelpers:
    def test_merge_and_subset(self):
        spec = SyntheticSpec(num_classes=2, chips_per_class=3, chip_size=16)
        a = generate_synthetic_pool(spec, seed=0)
        b = generate_synthetic_pool(spec, seed=1)
        merged = merge_pools(a, b)
        assert len(merged) == 12
        sub = merged.subset([0, 5, 7])
        assert len(sub) == 3
        assert sub.labels == (merged.labels[0], merged.labels[5], merged.labels[7])

    def test_uid_identity_distinct(self):
        spec = SyntheticSpec(num_classes=2, chips_per_class=3, chip_size=16)
        pool = generate_synthetic_pool(spec, seed=0)
        ids = {chip_identity(pool, i) for i in range(len(pool))}
        assert len(ids) == len(pool)

    def test_label_length_mismatch_rejected(self):
        chip = Chip(np.zeros((16, 16)))
        with pytest.raises(ParameterError):
            DatasetPool(chips=(chip,), labels=(0, 1))
