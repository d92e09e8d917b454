import gzip
import json
import struct

import numpy as np
import pytest

from spade_ad import dataset as D
from spade_ad.imageops import bilinear_resize

from conftest import TINY_NOISE, make_synthetic_source


def clean_digit(seed=0):
    rng = np.random.default_rng(seed)
    return (rng.random((28, 28)) * 255).astype(np.uint8)


class TestGenerateNoisySample:
    def test_shape_range_dtype(self):
        out = D.generate_noisy_sample(clean_digit(), D.NoiseConfig(), np.random.default_rng(3))
        assert out.pixels.shape == (84, 84)
        assert out.pixels.dtype == np.uint8
        assert out.pixels.min() >= 0 and out.pixels.max() <= 255

    def test_same_seed_bitwise_identical(self):
        a = D.generate_noisy_sample(clean_digit(), D.NoiseConfig(), np.random.default_rng(11))
        b = D.generate_noisy_sample(clean_digit(), D.NoiseConfig(), np.random.default_rng(11))
        assert np.array_equal(a.pixels, b.pixels)

    def test_zero_noise_full_scale_is_pure_upscale(self):
        clean = clean_digit(1)
        config = D.NoiseConfig(sigma_mean=0, sigma_std=0, scale_min=84, scale_max=84, output_size=84)
        out = D.generate_noisy_sample(clean, config, np.random.default_rng(0))
        expected = np.clip(np.rint(bilinear_resize(clean.astype(np.float64), 84, 84)), 0, 255).astype(np.uint8)
        assert np.array_equal(out.pixels, expected)

    def test_wrong_shape_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            D.generate_noisy_sample(np.zeros((10, 12)), D.NoiseConfig(), rng)
        with pytest.raises(ValueError):
            D.generate_noisy_sample(np.zeros((28, 28, 3)), D.NoiseConfig(), rng)

    def test_digit_box_fully_inside_frame(self):
        # bright border ring makes the placed box detectable once noise is off
        clean = np.zeros((28, 28), dtype=np.uint8)
        clean[0, :] = clean[-1, :] = clean[:, 0] = clean[:, -1] = 255
        config = D.NoiseConfig(sigma_mean=0, sigma_std=0, scale_min=12, scale_max=40, output_size=40)
        for seed in range(50):
            out = D.generate_noisy_sample(clean, config, np.random.default_rng(seed))
            rows = np.flatnonzero(out.pixels.any(axis=1))
            cols = np.flatnonzero(out.pixels.any(axis=0))
            assert 0 <= rows[0] and rows[-1] < 40 and 0 <= cols[0] and cols[-1] < 40
            side_r = rows[-1] - rows[0] + 1
            side_c = cols[-1] - cols[0] + 1
            assert side_r == side_c
            assert config.scale_min <= side_r <= config.scale_max

    def test_noise_std_tracks_sigma_before_quantization(self):
        # clipping to [0,255] truncates negatives, so the 5% property is
        # checked on the float frame; blank digit -> the whole frame is noise
        config = D.NoiseConfig(sigma_mean=40, sigma_std=0, scale_min=28, scale_max=28, output_size=112)
        frame = D._compose_float_frame(np.zeros((28, 28)), config, np.random.default_rng(5))
        assert frame.size >= 10_000
        assert abs(frame.std() - 40.0) / 40.0 < 0.05

    def test_sigma_mean_zero_gives_noiseless_background(self):
        config = D.NoiseConfig(sigma_mean=0, sigma_std=0, scale_min=28, scale_max=28, output_size=84)
        frame = D._compose_float_frame(np.zeros((28, 28)), config, np.random.default_rng(2))
        assert np.all(frame == 0)


class TestNoiseConfigValidation:
    def test_bad_scale_range(self):
        with pytest.raises(ValueError):
            D.NoiseConfig(scale_min=0)
        with pytest.raises(ValueError):
            D.NoiseConfig(scale_min=50, scale_max=40)
        with pytest.raises(ValueError):
            D.NoiseConfig(scale_max=100, output_size=84)


@pytest.fixture(scope="module")
def source():
    return make_synthetic_source(n_per_digit=12, seed=3)


@pytest.fixture(scope="module")
def split(source):
    spec = D.SplitSpec(normal_digit=0, known_anomaly_digit=3, train_fraction=0.75, seed=2)
    return D.build_splits(source, spec, TINY_NOISE)


class TestBuildSplits:
    def test_role_membership(self, split):
        assert all(s.digit_label == 0 for s in split.train_normal)
        assert all(s.digit_label == 3 for s in split.train_known_anomaly)
        assert {s.digit_label for s in split.eval_all} == set(range(10))

    def test_eval_roles_assigned(self, split):
        roles = {0: D.ClassRole.NORMAL, 3: D.ClassRole.KNOWN_ANOMALY}
        for s in split.eval_all:
            assert split.role_of(s) == roles.get(s.digit_label, D.ClassRole.UNKNOWN_ANOMALY)

    def test_same_digit_rejected(self):
        with pytest.raises(ValueError):
            D.SplitSpec(normal_digit=0, known_anomaly_digit=0)

    def test_counts_match_partition(self, source, split):
        part = D.partition_source(source, 0.75, 2)
        assert len(split.eval_all) == int((part.partition == 0).sum())
        n_zero_train = int(((part.labels == 0) & (part.partition == 1)).sum())
        assert len(split.train_normal) == n_zero_train

    def test_missing_digit_rejected(self, source):
        mask = source.labels != 3
        smaller = source.subset(mask)
        spec = D.SplitSpec(normal_digit=0, known_anomaly_digit=3, seed=2)
        with pytest.raises(D.CorpusError):
            D.build_splits(smaller, spec, TINY_NOISE)

    def test_eval_disjoint_from_training_by_id(self, split):
        train_ids = {s.sample_id for s in split.train_normal + split.train_known_anomaly}
        eval_ids = {s.sample_id for s in split.eval_all}
        assert not (train_ids & eval_ids)
        assert len(eval_ids) == len(split.eval_all)

    def test_fully_deterministic(self, source):
        spec = D.SplitSpec(normal_digit=0, known_anomaly_digit=3, train_fraction=0.75, seed=2)
        a = D.build_splits(source, spec, TINY_NOISE)
        b = D.build_splits(source, spec, TINY_NOISE)
        for field in ("train_normal", "train_known_anomaly", "eval_all"):
            sa, sb = getattr(a, field), getattr(b, field)
            assert len(sa) == len(sb)
            assert all(x == y for x, y in zip(sa, sb))

    def test_normal_and_eval_shared_across_known_digits(self, source):
        # X and U must be bitwise identical whichever anomaly digit is known,
        # so the VAE can be trained once and reused.
        a = D.build_splits(source, D.SplitSpec(0, 3, 0.75, 2), TINY_NOISE)
        b = D.build_splits(source, D.SplitSpec(0, 7, 0.75, 2), TINY_NOISE)
        assert all(x == y for x, y in zip(a.train_normal, b.train_normal))
        assert all(x == y for x, y in zip(a.eval_all, b.eval_all))


class TestPartitionAndCap:
    def test_partition_stratified_and_deterministic(self):
        source = make_synthetic_source(n_per_digit=10, seed=5)
        a = D.partition_source(source, 0.8, 9)
        b = D.partition_source(source, 0.8, 9)
        assert np.array_equal(a.partition, b.partition)
        for digit in range(10):
            parts = a.partition[a.labels == digit]
            assert parts.sum() == 8 and len(parts) == 10

    def test_partitioned_source_passthrough(self):
        source = make_synthetic_source(n_per_digit=6, seed=5)
        part = D.partition_source(source, 0.5, 1)
        again = D.partition_source(part, 0.9, 99)
        assert np.array_equal(part.partition, again.partition)

    def test_cap_preserves_noise_streams(self):
        source = make_synthetic_source(n_per_digit=10, seed=5)
        part = D.partition_source(source, 0.8, 4)
        capped = D.cap_source(part, max_train_per_digit=3, max_eval_per_digit=1)
        spec = D.SplitSpec(normal_digit=0, known_anomaly_digit=3, seed=4)
        full_split = D.build_splits(part, spec, TINY_NOISE)
        cap_split = D.build_splits(capped, spec, TINY_NOISE)
        assert len(cap_split.train_normal) == 3
        assert len(cap_split.eval_all) == 10
        by_id = {s.sample_id: s for s in full_split.train_normal}
        for s in cap_split.train_normal:
            assert s == by_id[s.sample_id]


class TestPersistence:
    @pytest.fixture()
    def split(self):
        source = make_synthetic_source(n_per_digit=6, seed=8)
        spec = D.SplitSpec(normal_digit=0, known_anomaly_digit=3, train_fraction=0.7, seed=0)
        return D.build_splits(source, spec, TINY_NOISE)

    def test_round_trip(self, split, tmp_path):
        D.save_corpus(split, tmp_path / "corpus")
        loaded = D.load_corpus(tmp_path / "corpus")
        assert loaded.spec == split.spec
        assert loaded.noise == split.noise
        for field in ("train_normal", "train_known_anomaly", "eval_all"):
            sa, sb = getattr(split, field), getattr(loaded, field)
            assert len(sa) == len(sb)
            for x, y in zip(sa, sb):
                assert x == y
                assert split.role_of(x) == loaded.role_of(y)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(D.CorpusError, match="manifest"):
            D.load_corpus(tmp_path / "nowhere")

    def test_corrupt_image_detected(self, split, tmp_path):
        root = D.save_corpus(split, tmp_path / "corpus")
        victim = next((root / "images").iterdir())
        data = bytearray(victim.read_bytes())
        data[-1] ^= 0xFF
        victim.write_bytes(bytes(data))
        with pytest.raises(D.CorpusError, match="checksum"):
            D.load_corpus(root)

    def test_schema_version_mismatch(self, split, tmp_path):
        root = D.save_corpus(split, tmp_path / "corpus")
        manifest = json.loads((root / "manifest.json").read_text())
        manifest["schema_version"] = 99
        (root / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(D.CorpusError, match="schema_version"):
            D.load_corpus(root)

    def test_invalid_manifest_json(self, split, tmp_path):
        root = D.save_corpus(split, tmp_path / "corpus")
        (root / "manifest.json").write_text("{not json")
        with pytest.raises(D.CorpusError, match="JSON"):
            D.load_corpus(root)

    def test_training_only_load_skips_eval(self, split, tmp_path):
        root = D.save_corpus(split, tmp_path / "corpus")
        loaded = D.load_corpus(root, include_eval=False)
        assert loaded.eval_all == []
        assert len(loaded.train_normal) == len(split.train_normal)


class TestSourceLoaders:
    def test_csv_label_last_and_first(self, tmp_path):
        rng = np.random.default_rng(0)
        pixels = (rng.random((20, 784)) * 255).astype(np.uint8)
        labels = np.tile(np.arange(10), 2)
        last = np.column_stack([pixels, labels])
        np.savetxt(tmp_path / "last.csv", last, fmt="%d", delimiter=",")
        corpus = D.load_csv_corpus(tmp_path / "last.csv")
        assert corpus.images.shape == (20, 28, 28)
        assert np.array_equal(corpus.labels, labels)

        first = np.column_stack([labels, pixels])
        np.savetxt(tmp_path / "first.csv", first, fmt="%d", delimiter=",")
        corpus = D.load_csv_corpus(tmp_path / "first.csv")
        assert np.array_equal(corpus.labels, labels)

    def test_csv_gzip_and_header(self, tmp_path):
        rng = np.random.default_rng(1)
        pixels = (rng.random((10, 784)) * 255).astype(np.uint8)
        labels = np.arange(10)
        rows = "\n".join(",".join(map(str, [l] + list(p))) for l, p in zip(labels, pixels))
        text = "label," + ",".join(f"p{i}" for i in range(784)) + "\n" + rows + "\n"
        path = tmp_path / "data.csv.gz"
        path.write_bytes(gzip.compress(text.encode()))
        corpus = D.load_csv_corpus(path)
        assert np.array_equal(corpus.labels, labels)
        assert np.array_equal(corpus.images[3].ravel(), pixels[3])

    def test_npz_keras_layout(self, tmp_path):
        rng = np.random.default_rng(2)
        path = tmp_path / "digits.npz"
        np.savez(
            path,
            x_train=(rng.random((12, 28, 28)) * 255).astype(np.uint8),
            y_train=np.tile(np.arange(10), 2)[:12],
            x_test=(rng.random((5, 28, 28)) * 255).astype(np.uint8),
            y_test=np.arange(5),
        )
        corpus = D.load_npz_corpus(path)
        assert len(corpus.labels) == 17
        assert corpus.partition.sum() == 12

    def test_idx_directory(self, tmp_path):
        rng = np.random.default_rng(3)

        def idx_bytes(arr):
            arr = np.asarray(arr, dtype=np.uint8)
            magic = (3 if arr.ndim == 3 else 1) | 0x0800
            header = struct.pack(f">i{arr.ndim}i", magic, *arr.shape)
            return header + arr.tobytes()

        x_train = (rng.random((6, 28, 28)) * 255).astype(np.uint8)
        x_test = (rng.random((4, 28, 28)) * 255).astype(np.uint8)
        (tmp_path / "train-images-idx3-ubyte").write_bytes(idx_bytes(x_train))
        (tmp_path / "train-labels-idx1-ubyte").write_bytes(idx_bytes(np.arange(6)))
        (tmp_path / "t10k-images-idx3-ubyte.gz").write_bytes(gzip.compress(idx_bytes(x_test)))
        (tmp_path / "t10k-labels-idx1-ubyte.gz").write_bytes(gzip.compress(idx_bytes(np.arange(4))))
        corpus = D.load_idx_corpus(tmp_path)
        assert np.array_equal(corpus.images[:6], x_train)
        assert np.array_equal(corpus.partition, [1] * 6 + [0] * 4)

    def test_dispatch_missing_path(self, tmp_path):
        with pytest.raises(D.CorpusError, match="not found"):
            D.load_source_corpus(tmp_path / "missing.csv")

    def test_vendored_subset_loads(self):
        from pathlib import Path

        path = Path(__file__).resolve().parent.parent / "data" / "mnist_5k.csv.gz"
        corpus = D.load_source_corpus(path)
        assert corpus.images.shape == (5000, 28, 28)
        assert np.array_equal(np.unique(corpus.labels), np.arange(10))
