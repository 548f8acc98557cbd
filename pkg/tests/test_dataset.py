import numpy as np
import pytest

from tailens.dataset import (
    EmbeddingDataset,
    EmptyFoldError,
    Fold,
    FoldAssignment,
    SamplerMode,
    SubsetSpec,
    SyntheticConfig,
    assign_folds,
    draw_batch,
    generate_longtailed,
    load_embeddings,
    partition_subsets,
    powerlaw_frequencies,
    read_embeddings_csv,
    relabel_for_expert,
    save_bundle,
    load_bundle,
    write_embeddings_csv,
)

from conftest import imagenet_lt_like_frequencies, places_lt_like_frequencies


def small_config(**overrides) -> SyntheticConfig:
    base = dict(
        class_count=3,
        feature_dim=2,
        n_max=100,
        alpha=1.7,
        n_val_per_class=4,
        n_test_per_class=4,
        noise_scale=0.5,
    )
    base.update(overrides)
    return SyntheticConfig(**base)


class TestPowerlawFrequencies:
    def test_head_and_tail_counts(self):
        freq = powerlaw_frequencies(60, 500, 1.2)
        assert freq[0] == 500
        assert freq[59] == 4  # max(round(500 * 60**-1.2), 1)

    def test_floor_of_one(self):
        freq = powerlaw_frequencies(50, 10, 3.0)
        assert freq.min() == 1


class TestGenerateLongtailed:
    def test_three_class_profile_fills_all_folds(self):
        # alpha=1.7 gives counts (100, 31, 15): one class per fold under
        # thresholds (100, 20)
        bundle = generate_longtailed(small_config(), seed=0)
        assert bundle.train.class_frequency.tolist() == [100, 31, 15]
        counts = assign_folds(bundle.train).class_counts()
        assert counts[Fold.MANYSHOT] >= 1
        assert counts[Fold.MEDIUMSHOT] >= 1

    def test_same_seed_is_bit_identical(self):
        a = generate_longtailed(small_config(), seed=42)
        b = generate_longtailed(small_config(), seed=42)
        for split in ("train", "val", "test"):
            assert np.array_equal(
                getattr(a, split).features, getattr(b, split).features
            )
            assert np.array_equal(getattr(a, split).labels, getattr(b, split).labels)

    def test_different_seeds_differ(self):
        a = generate_longtailed(small_config(), seed=1)
        b = generate_longtailed(small_config(), seed=2)
        assert not np.array_equal(a.train.features, b.train.features)

    def test_rejects_empty_fold_profiles(self):
        # alpha=1.465 gives counts (100, 36, 20): no class below 20, so the
        # fewshot fold would be empty
        with pytest.raises(EmptyFoldError, match="fewshot"):
            generate_longtailed(small_config(alpha=1.465), seed=0)

    def test_balanced_val_and_test(self):
        bundle = generate_longtailed(small_config(), seed=3)
        assert set(bundle.val.class_frequency.tolist()) == {4}
        assert set(bundle.test.class_frequency.tolist()) == {4}


class TestFoldAssignment:
    def test_threshold_boundaries(self):
        freq = [150, 100, 60, 20, 19, 5]
        folds = FoldAssignment.from_frequencies(freq)
        expected = [
            Fold.MANYSHOT,
            Fold.MANYSHOT,
            Fold.MEDIUMSHOT,
            Fold.MEDIUMSHOT,
            Fold.FEWSHOT,
            Fold.FEWSHOT,
        ]
        assert folds.fold_of_class.tolist() == [int(f) for f in expected]

    def test_all_at_many_threshold(self):
        folds = FoldAssignment.from_frequencies([100, 100, 100])
        assert all(f == int(Fold.MANYSHOT) for f in folds.fold_of_class)

    def test_imagenet_lt_shaped_counts(self):
        counts = FoldAssignment.from_frequencies(
            imagenet_lt_like_frequencies()
        ).class_counts()
        assert counts[Fold.MANYSHOT] == 391
        assert counts[Fold.MEDIUMSHOT] == 473
        assert counts[Fold.FEWSHOT] == 136

    def test_places_lt_shaped_counts(self):
        counts = FoldAssignment.from_frequencies(
            places_lt_like_frequencies()
        ).class_counts()
        assert counts[Fold.MANYSHOT] == 132
        assert counts[Fold.MEDIUMSHOT] == 162
        assert counts[Fold.FEWSHOT] == 71

    def test_invalid_thresholds(self):
        with pytest.raises(ValueError):
            FoldAssignment.from_frequencies([10, 5], thresholds=(20, 20))


def _dataset_from_frequencies(freq, dim=2, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(freq)), freq)
    return EmbeddingDataset(
        features=rng.normal(size=(len(labels), dim)),
        labels=labels,
        class_count=len(freq),
    )


class TestPartitionSubsets:
    def test_six_class_example(self):
        train = _dataset_from_frequencies([150, 100, 60, 20, 19, 5])
        subsets = partition_subsets(assign_folds(train), train)
        assert subsets[0].classes.tolist() == [0, 1]
        assert subsets[1].classes.tolist() == [2, 3]
        assert subsets[2].classes.tolist() == [4, 5]

    def test_frequency_ties_break_by_class_index(self):
        train = _dataset_from_frequencies([150, 60, 100, 60, 19, 5])
        subsets = partition_subsets(assign_folds(train), train)
        # classes 1 and 3 are tied at 60; the smaller index comes first
        assert subsets[1].classes.tolist() == [1, 3]

    def test_imagenet_lt_shaped_sizes(self):
        train = _dataset_from_frequencies(imagenet_lt_like_frequencies(), dim=1)
        subsets = partition_subsets(assign_folds(train), train)
        assert [s.size for s in subsets] == [391, 473, 136]

    def test_empty_fold_is_an_error(self):
        train = _dataset_from_frequencies([150, 100, 60])
        with pytest.raises(EmptyFoldError, match="fewshot"):
            partition_subsets(assign_folds(train), train)

    def test_local_index_follows_sorted_order(self):
        train = _dataset_from_frequencies([150, 100, 60, 20, 19, 5])
        subsets = partition_subsets(assign_folds(train), train)
        lookup = subsets[0].local_map(6)
        assert lookup[0] == 0 and lookup[1] == 1
        assert lookup[2] == -1


class TestRelabelForExpert:
    def test_in_subset_and_reject_labels(self):
        train = _dataset_from_frequencies([150, 100, 60, 20, 19, 5])
        subsets = partition_subsets(assign_folds(train), train)
        relabeled = relabel_for_expert(train, subsets[0])
        assert relabeled.class_count == 3
        expected = np.where(train.labels == 0, 0, np.where(train.labels == 1, 1, 2))
        assert np.array_equal(relabeled.labels, expected)

    def test_full_coverage_still_has_reject_slot(self):
        train = _dataset_from_frequencies([30, 20, 10])
        subset = SubsetSpec(Fold.MANYSHOT, np.array([0, 1, 2]))
        relabeled = relabel_for_expert(train, subset)
        assert relabeled.class_count == 4
        assert relabeled.class_frequency[3] == 0

    def test_features_are_shared_bit_exactly(self):
        train = _dataset_from_frequencies([150, 100, 60, 20, 19, 5])
        subsets = partition_subsets(assign_folds(train), train)
        relabeled = relabel_for_expert(train, subsets[1])
        assert relabeled.features is train.features
        assert relabeled.n == train.n

    def test_imagenet_lt_shaped_reject_count(self):
        train = _dataset_from_frequencies(imagenet_lt_like_frequencies(), dim=1)
        subsets = partition_subsets(assign_folds(train), train)
        relabeled = relabel_for_expert(train, subsets[2])
        reject_count = int(relabeled.class_frequency[relabeled.class_count - 1])
        assert reject_count == 89293 + 24910 == 114203


class TestDrawBatch:
    def test_rho_one_matches_instance_balanced_distribution(self):
        ds = _dataset_from_frequencies([900, 100])
        modes = [SamplerMode.instance_balanced(), SamplerMode.reject_undersampled(1.0)]
        shares = []
        for mode in modes:
            rng = np.random.default_rng(0)
            _, labels = draw_batch(ds, mode, 20_000, rng)
            shares.append(np.mean(labels == 1))
        # acceptance probability 1 leaves the instance distribution untouched
        assert abs(shares[0] - shares[1]) < 0.02
        assert abs(shares[0] - 0.1) < 0.02

    def test_uniform_class_equalizes_rare_class(self):
        ds = _dataset_from_frequencies([1000, 1])
        rng = np.random.default_rng(7)
        _, labels = draw_batch(ds, SamplerMode.uniform_class(), 10_000, rng)
        share = np.mean(labels == 1)
        assert 0.47 <= share <= 0.53

    def test_uniform_class_rejects_empty_class(self):
        ds = EmbeddingDataset(
            features=np.zeros((4, 2)), labels=np.array([0, 0, 2, 2]), class_count=3
        )
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="class 1"):
            draw_batch(ds, SamplerMode.uniform_class(), 8, rng)

    def test_reject_undersampling_share(self):
        # 90% reject at rho=10: expected share 0.09 / 0.19
        ds = _dataset_from_frequencies([100, 900])
        rng = np.random.default_rng(3)
        _, labels = draw_batch(ds, SamplerMode.reject_undersampled(10.0), 10_000, rng)
        share = np.mean(labels == 1)
        assert abs(share - 0.09 / 0.19) < 0.03

    def test_deterministic_given_generator_state(self):
        ds = _dataset_from_frequencies([50, 30, 20])
        a = draw_batch(ds, SamplerMode.uniform_class(), 64, np.random.default_rng(5))
        b = draw_batch(ds, SamplerMode.uniform_class(), 64, np.random.default_rng(5))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_rho_below_one_rejected(self):
        with pytest.raises(ValueError):
            SamplerMode.reject_undersampled(0.5)


class TestCsvRoundTrip:
    def test_bundle_round_trip_is_exact(self, tmp_path):
        bundle = generate_longtailed(small_config(), seed=9)
        manifest = save_bundle(bundle, tmp_path / "data")
        loaded = load_bundle(manifest)
        assert np.array_equal(loaded.train.features, bundle.train.features)
        assert np.array_equal(loaded.train.labels, bundle.train.labels)
        assert loaded.class_count == bundle.class_count

    def test_frequencies_recomputed_from_rows(self, tmp_path):
        path = tmp_path / "train.csv"
        path.write_text("label,f0,f1\n0,0.5,1.5\n0,0.0,2.0\n1,1.0,1.0\n2,2.0,0.5\n")
        features, labels = read_embeddings_csv(path)
        ds = EmbeddingDataset(features, labels, class_count=3)
        assert ds.class_frequency.tolist() == [2, 1, 1]

    def test_dimension_mismatch_names_the_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("label,f0,f1\n0,0.5,1.5\n1,1.0,2.0,3.0\n")
        with pytest.raises(ValueError, match="line 3"):
            read_embeddings_csv(path)

    def test_label_out_of_declared_range(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("label,f0\n0,0.5\n7,1.0\n")
        with pytest.raises(ValueError, match="out of range"):
            read_embeddings_csv(path, class_count=3)

    def test_unbalanced_val_warns_with_counts(self, tmp_path):
        for name, rows in {
            "train.csv": ["0,0.0", "1,1.0"],
            "val.csv": ["0,0.1", "0,0.2", "1,0.9"],
            "test.csv": ["0,0.3", "1,0.7"],
        }.items():
            (tmp_path / name).write_text("label,f0\n" + "\n".join(rows) + "\n")
        with pytest.warns(UserWarning, match=r"val split is not class-balanced"):
            load_embeddings(
                tmp_path / "train.csv", tmp_path / "val.csv", tmp_path / "test.csv"
            )

    def test_imagenet_lt_shaped_load(self, tmp_path):
        # one feature per sample keeps the 115,846-row file small
        freq = imagenet_lt_like_frequencies()
        labels = np.repeat(np.arange(1000), freq)
        assert len(labels) == 115_846
        train = EmbeddingDataset(
            features=np.zeros((len(labels), 1)), labels=labels, class_count=1000
        )
        write_embeddings_csv(tmp_path / "train.csv", train)
        balanced = EmbeddingDataset(
            features=np.zeros((1000, 1)), labels=np.arange(1000), class_count=1000
        )
        write_embeddings_csv(tmp_path / "val.csv", balanced)
        write_embeddings_csv(tmp_path / "test.csv", balanced)
        bundle = load_embeddings(
            tmp_path / "train.csv", tmp_path / "val.csv", tmp_path / "test.csv"
        )
        counts = assign_folds(bundle.train).class_counts()
        assert counts[Fold.MANYSHOT] == 391
        assert counts[Fold.MEDIUMSHOT] == 473
        assert counts[Fold.FEWSHOT] == 136
