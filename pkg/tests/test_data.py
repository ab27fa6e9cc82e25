import struct

import numpy as np
import pytest

from stgrad.config import RunConfig
from stgrad.data import (
    CKPT_MAGIC,
    Dataset,
    MetricsWriter,
    batches,
    format_cell,
    load_checkpoint,
    load_idx,
    load_idx_labels,
    parse_idx,
    read_metrics,
    save_checkpoint,
    synth_dataset,
)
from stgrad.errors import (
    CheckpointError,
    CheckpointVersionError,
    ConfigError,
    DataError,
    IdxDimensionError,
    IdxFormatError,
    IdxTruncatedError,
    MetricsWriterError,
)
from stgrad.nn import init_optimizer
from stgrad.rng import stream
from stgrad.training import run_training
from stgrad.vae import build_vae


def write_idx_images(path, count=2, rows=28, cols=28, payload=None):
    if payload is None:
        payload = bytes((i * 7 + 3) % 256 for i in range(count * rows * cols))
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, count, rows, cols))
        f.write(payload)
    return payload


class TestIdxParser:
    def test_crafted_fixture_exact_pixels(self, tmp_path):
        path = tmp_path / "imgs.idx"
        payload = write_idx_images(path)
        ds = load_idx(path)
        assert ds.images.shape == (2, 784)
        expected = np.frombuffer(payload, dtype=np.uint8).reshape(2, 784) / 255.0
        np.testing.assert_array_equal(ds.images, expected)

    def test_labels_roundtrip(self, tmp_path):
        path = tmp_path / "labels.idx"
        with open(path, "wb") as f:
            f.write(struct.pack(">II", 0x00000801, 4))
            f.write(bytes([3, 1, 4, 1]))
        np.testing.assert_array_equal(load_idx_labels(path), [3, 1, 4, 1])

    def test_corruption_corpus(self, tmp_path):
        # 1. wrong magic
        p = tmp_path / "a"
        with open(p, "wb") as f:
            f.write(struct.pack(">IIII", 0xDEADBEEF, 1, 2, 2) + bytes(4))
        with pytest.raises(IdxFormatError):
            parse_idx(p)
        # 2. truncated header
        p = tmp_path / "b"
        with open(p, "wb") as f:
            f.write(struct.pack(">I", 0x00000803) + struct.pack(">I", 1))
        with pytest.raises(IdxTruncatedError):
            parse_idx(p)
        # 3. truncated payload
        p = tmp_path / "c"
        with open(p, "wb") as f:
            f.write(struct.pack(">IIII", 0x00000803, 2, 28, 28) + bytes(100))
        with pytest.raises(IdxTruncatedError):
            parse_idx(p)
        # 4. trailing garbage
        p = tmp_path / "d"
        write_idx_images(p, payload=bytes(2 * 28 * 28 + 9))
        with pytest.raises(IdxTruncatedError):
            parse_idx(p)
        # 5. dimension overflow
        p = tmp_path / "e"
        with open(p, "wb") as f:
            f.write(struct.pack(">IIII", 0x00000803, 0xFFFFFFFF, 0xFFFF, 0xFFFF))
        with pytest.raises(IdxDimensionError):
            parse_idx(p)
        # 6. zero-sized dimension
        p = tmp_path / "f"
        with open(p, "wb") as f:
            f.write(struct.pack(">IIII", 0x00000803, 0, 28, 28))
        with pytest.raises(IdxDimensionError):
            parse_idx(p)
        # 7. label file where images expected
        p = tmp_path / "g"
        with open(p, "wb") as f:
            f.write(struct.pack(">II", 0x00000801, 2) + bytes(2))
        with pytest.raises(IdxFormatError):
            load_idx(p)


class TestSynth:
    def test_same_seed_identical(self):
        a = synth_dataset(5, 40, "bars")
        b = synth_dataset(5, 40, "bars")
        np.testing.assert_array_equal(a.images, b.images)

    def test_value_range(self):
        for pattern in ("bars", "blobs"):
            ds = synth_dataset(1, 30, pattern)
            assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
            assert ds.images.shape == (30, 784)

    def test_splits_differ(self):
        a = synth_dataset(5, 40, "bars", split="train")
        b = synth_dataset(5, 40, "bars", split="test")
        assert not np.array_equal(a.images, b.images)

    def test_unknown_pattern(self):
        with pytest.raises(ConfigError):
            synth_dataset(0, 10, "stripes")

    def test_patterns_distinguishable_by_trained_model(self):
        # smoke training: a model fit on bars reconstructs bars better than blobs
        from stgrad.vae import evaluate

        bars = synth_dataset(2, 256, "bars")
        blobs = synth_dataset(2, 256, "blobs")
        cfg = RunConfig(
            estimator="st", tau=1.0, lr=0.003, epochs=4, batch=64, n=8, l=4,
            enc_hidden="48", dec_hidden="48", seed=0, synth=True,
        ).validate()
        result = run_training(cfg, bars)
        on_bars = evaluate(result.model, bars.images, seed=9).recon_nll
        on_blobs = evaluate(result.model, blobs.images, seed=9).recon_nll
        assert on_bars < on_blobs


class TestBatches:
    def test_partition_covers_every_index_once(self):
        ds = synth_dataset(3, 25, "bars")
        seen = np.concatenate([b for b in batches(ds, 7, seed=1, epoch=0)])
        assert seen.shape == (25, 784)
        # rows are unique because every synth image differs
        assert len(np.unique(seen, axis=0)) == 25

    def test_seeded_order(self):
        ds = synth_dataset(3, 25, "bars")
        a = list(batches(ds, 7, seed=1, epoch=2))
        b = list(batches(ds, 7, seed=1, epoch=2))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
        c = list(batches(ds, 7, seed=1, epoch=3))
        assert not np.array_equal(a[0], c[0])

    def test_oversized_batch(self):
        ds = synth_dataset(3, 5, "bars")
        out = list(batches(ds, 100, seed=0))
        assert len(out) == 1 and out[0].shape == (5, 784)


class TestDatasetInvariants:
    def test_empty_rejected(self):
        with pytest.raises(DataError):
            Dataset(images=np.zeros((0, 784)), split="train")

    def test_range_enforced(self):
        with pytest.raises(DataError):
            Dataset(images=np.full((2, 4), 1.5), split="train")


class TestCheckpoint:
    def _model_opt(self, seed=0):
        model = build_vae(seed, 3, 2, image_dim=16, enc_hidden=(8,), dec_hidden=(8,))
        opt = init_optimizer("radam", 0.002, model.param_arrays())
        # dirty the optimizer state so the round trip is non-trivial
        for m, v in zip(opt.m, opt.v):
            m += stream(seed, 50).standard_normal(m.shape)
            v += np.abs(stream(seed, 51).standard_normal(v.shape))
        opt.t = 17
        return model, opt

    def test_round_trip_bit_identical(self, tmp_path):
        model, opt = self._model_opt()
        path = tmp_path / "ck.bin"
        save_checkpoint(path, model, opt, seed=123, epoch=9)
        m2, o2, seed, epoch = load_checkpoint(path)
        assert (seed, epoch) == (123, 9)
        assert (o2.kind, o2.t, o2.lr) == ("radam", 17, 0.002)
        for a, b in zip(model.param_arrays(), m2.param_arrays()):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(opt.m + opt.v, o2.m + o2.v):
            np.testing.assert_array_equal(a, b)
        # a second save of the loaded state is byte-identical
        path2 = tmp_path / "ck2.bin"
        save_checkpoint(path2, m2, o2, seed=123, epoch=9)
        assert path.read_bytes() == path2.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"NOTACKPT" + bytes(64))
        with pytest.raises(CheckpointError):
            load_checkpoint(p)

    def test_version_mismatch(self, tmp_path):
        p = tmp_path / "v9.bin"
        p.write_bytes(CKPT_MAGIC + struct.pack("<I", 9) + bytes(64))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(p)

    def test_truncation(self, tmp_path):
        model, opt = self._model_opt()
        path = tmp_path / "ck.bin"
        save_checkpoint(path, model, opt, seed=1, epoch=1)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_trailing_garbage(self, tmp_path):
        model, opt = self._model_opt()
        path = tmp_path / "ck.bin"
        save_checkpoint(path, model, opt, seed=1, epoch=1)
        with open(path, "ab") as f:
            f.write(b"xx")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "nope.bin")


class TestResumeEquivalence:
    def test_split_run_matches_uninterrupted(self, tmp_path):
        cfg = RunConfig(
            estimator="reinmax", tau=1.0, lr=0.001, epochs=4, batch=32, n=4, l=2,
            enc_hidden="16", dec_hidden="16", seed=11, synth=True, synth_n=96,
        ).validate()
        data = synth_dataset(cfg.seed, cfg.synth_n, "bars")

        full_dir = tmp_path / "full"
        full_dir.mkdir()
        full = run_training(cfg, data, out_dir=str(full_dir), checkpoint_epochs=[2, 4])

        part_dir = tmp_path / "part"
        part_dir.mkdir()
        import dataclasses

        cfg2 = dataclasses.replace(cfg, epochs=2)
        run_training(cfg2, data, out_dir=str(part_dir), checkpoint_epochs=[2])
        model, opt, seed, epoch = load_checkpoint(part_dir / "ckpt-epoch-0002.bin")
        assert (seed, epoch) == (11, 2)
        resumed = run_training(cfg, data, out_dir=str(part_dir), checkpoint_epochs=[4],
                               start=(model, opt, epoch))
        # bit-exact equivalence of the final checkpoints
        a = (full_dir / "ckpt-epoch-0004.bin").read_bytes()
        b = (part_dir / "ckpt-epoch-0004.bin").read_bytes()
        assert a == b
        assert full.history[-1] == resumed.history[-1]


class TestMetrics:
    def test_header_once_and_roundtrip(self, tmp_path):
        path = tmp_path / "m.csv"
        with MetricsWriter(path) as w:
            w.write_row({"run_id": "r", "epoch": 1, "train_neg_elbo": 1 / 3, "seed": 5})
        with MetricsWriter(path) as w:
            w.write_row({"run_id": "r", "epoch": 2, "train_neg_elbo": 0.1 + 0.2, "seed": 5})
        text = path.read_text().splitlines()
        assert len([l for l in text if l.startswith("run_id")]) == 1
        rows = read_metrics(path)
        assert len(rows) == 2
        assert float(rows[0]["train_neg_elbo"]) == 1 / 3  # repr round-trips
        assert float(rows[1]["train_neg_elbo"]) == 0.1 + 0.2

    def test_single_writer_enforced(self, tmp_path):
        path = tmp_path / "m.csv"
        with MetricsWriter(path):
            with pytest.raises(MetricsWriterError):
                MetricsWriter(path)
        # released after close
        with MetricsWriter(path):
            pass

    def test_unknown_field_rejected(self, tmp_path):
        with MetricsWriter(tmp_path / "m.csv") as w:
            with pytest.raises(MetricsWriterError):
                w.write_row({"nope": 1})

    def test_foreign_header_rejected(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(MetricsWriterError):
            MetricsWriter(path)

    def test_cell_formatting(self):
        assert format_cell(None) == ""
        assert format_cell(3) == "3"
        assert format_cell(0.5) == "0.5"
        assert format_cell(np.float64(2.0)) == "2.0"
        assert format_cell("x") == "x"
