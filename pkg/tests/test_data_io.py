import copy
import io
import struct

import numpy as np
import pytest
from PIL import Image

from hidden_ambient import persist
from hidden_ambient.data import FormatError, load_idx, make_measured_dataset, synth_rectangles_dataset, write_idx
from hidden_ambient.imaging import encode_pgm, read_pgm, tile_grid, to_bytes, write_image_grid
from hidden_ambient.measurements import MeasurementSpec
from hidden_ambient.numeric import make_rng
from hidden_ambient.training import TrainConfig, sample_grid, train_run

# 2 images of 2x2, written out byte by byte
IDX_FIXTURE = (b"\x00\x00\x08\x03" b"\x00\x00\x00\x02" b"\x00\x00\x00\x02" b"\x00\x00\x00\x02"
               b"\x00\xff\x80\x40" b"\x01\x02\xfe\x7f")
IDX_EXPECTED = np.array([[[0, 255], [128, 64]], [[1, 2], [254, 127]]], dtype=np.float32) / np.float32(255)


class TestRectangles:
    def setup_method(self):
        self.data = synth_rectangles_dataset(2000, 16, 16, make_rng(0))

    def test_binary(self):
        assert set(np.unique(self.data)) == {0.0, 1.0}

    def test_area_bounds(self):
        area = self.data.sum(axis=(1, 2))
        assert area.min() >= 16 and area.max() <= 64

    def test_single_axis_aligned_rectangle(self):
        for img in self.data[:50]:
            rows, cols = np.nonzero(img)
            box = img[rows.min():rows.max() + 1, cols.min():cols.max() + 1]
            assert box.all()

    def test_centre_brighter_than_corners(self):
        mean = synth_rectangles_dataset(10000, 16, 16, make_rng(1)).mean(axis=0)
        centre = mean[6:10, 6:10].mean()
        corners = np.mean([mean[0, 0], mean[0, -1], mean[-1, 0], mean[-1, -1]])
        assert centre > corners

    def test_too_small(self):
        with pytest.raises(ValueError):
            synth_rectangles_dataset(10, 7, 16, make_rng(0))


class TestIdx:
    def test_fixture(self, tmp_path):
        path = tmp_path / "f.idx"
        path.write_bytes(IDX_FIXTURE)
        out = load_idx(path)
        assert out.dtype == np.float32
        np.testing.assert_array_equal(out, IDX_EXPECTED)

    def test_writer_matches_fixture(self, tmp_path):
        write_idx(np.array([[[0, 255], [128, 64]], [[1, 2], [254, 127]]]), tmp_path / "w.idx")
        assert (tmp_path / "w.idx").read_bytes() == IDX_FIXTURE

    def test_label_magic(self, tmp_path):
        path = tmp_path / "labels.idx"
        path.write_bytes(struct.pack(">II", 0x801, 3) + b"\x01\x02\x03")
        with pytest.raises(FormatError) as exc:
            load_idx(path)
        assert exc.value.offset == 0

    def test_empty(self, tmp_path):
        (tmp_path / "e.idx").write_bytes(b"")
        with pytest.raises(FormatError):
            load_idx(tmp_path / "e.idx")

    def test_truncated_pixels(self, tmp_path):
        (tmp_path / "t.idx").write_bytes(IDX_FIXTURE[:-1])
        with pytest.raises(FormatError) as exc:
            load_idx(tmp_path / "t.idx")
        assert exc.value.offset == len(IDX_FIXTURE) - 1


class TestMeasuredDataset:
    def setup_method(self):
        self.clean = synth_rectangles_dataset(50, 8, 8, make_rng(0))

    def test_identity(self):
        ds = make_measured_dataset(self.clean, MeasurementSpec("identity"), 3)
        np.testing.assert_array_equal(ds.measured, self.clean[:40])
        np.testing.assert_array_equal(ds.holdout, self.clean[40:])

    def test_full_blocking(self):
        ds = make_measured_dataset(self.clean, MeasurementSpec("block_pixel", p=1.0), 3)
        assert not ds.measured.any()

    def test_deterministic(self):
        spec = MeasurementSpec("block_pixel", p=0.5)
        a = make_measured_dataset(self.clean, spec, 9)
        b = make_measured_dataset(self.clean, spec, 9)
        assert a.measured.tobytes() == b.measured.tobytes()

    def test_records_thetas(self):
        from hidden_ambient.measurements import apply_measurement
        ds = make_measured_dataset(self.clean, MeasurementSpec("keep_patch", k=3), 1)
        for i in range(0, 40, 7):
            np.testing.assert_array_equal(ds.measured[i], apply_measurement(ds.thetas[i], self.clean[i]))


def tiny_config(**kw):
    base = dict(noise_dim=6, image_shape=(8, 8), hidden_shape=(2, 4, 4), g1_hidden=(12,),
                d_hidden=(10, 6), mode="ambient_hidden", spec_hidden=MeasurementSpec("block_pixel", p=0.5),
                batch_size=8, steps=3, eval_every=3, eval_samples=100)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    clean = synth_rectangles_dataset(200, 8, 8, make_rng(0))
    ds = make_measured_dataset(clean, MeasurementSpec("block_pixel", p=0.5), 0)
    trainer, _ = train_run(tiny_config(), ds, tmp_path_factory.mktemp("run") / "m.csv")
    return trainer


class TestCheckpoint:
    def test_round_trip_bit_exact(self, trained, tmp_path):
        ckpt = persist.checkpoint_from_trainer(trained)
        persist.save_checkpoint(ckpt, tmp_path / "a.hagn")
        back = persist.load_checkpoint(tmp_path / "a.hagn")
        assert back.tensors.keys() == ckpt.tensors.keys()
        for name, arr in ckpt.tensors.items():
            assert back.tensors[name].tobytes() == np.asarray(arr, "<f4").tobytes()
        assert back.meta["rng"] == ckpt.meta["rng"] and back.config == ckpt.config

    def test_save_load_save_identical(self, trained, tmp_path):
        persist.save_checkpoint(persist.checkpoint_from_trainer(trained), tmp_path / "a.hagn")
        reloaded = persist.trainer_from_checkpoint(persist.load_checkpoint(tmp_path / "a.hagn"))
        persist.save_checkpoint(persist.checkpoint_from_trainer(reloaded), tmp_path / "b.hagn")
        assert (tmp_path / "a.hagn").read_bytes() == (tmp_path / "b.hagn").read_bytes()

    def test_layout(self, trained):
        raw = persist.encode_checkpoint(persist.checkpoint_from_trainer(trained))
        assert raw[:4] == b"HAGN"
        version, hlen = struct.unpack("<II", raw[4:12])
        assert version == 1
        import json
        header = json.loads(raw[12:12 + hlen])
        n_floats = sum(int(np.prod(e["shape"])) for e in header["tensors"])
        assert len(raw) == 12 + hlen + 4 * n_floats

    def test_truncated(self, trained):
        raw = persist.encode_checkpoint(persist.checkpoint_from_trainer(trained))
        with pytest.raises(FormatError):
            persist.decode_checkpoint(raw[:-4])

    def test_bad_magic_and_version(self, trained):
        raw = persist.encode_checkpoint(persist.checkpoint_from_trainer(trained))
        with pytest.raises(FormatError):
            persist.decode_checkpoint(b"XXXX" + raw[4:])
        with pytest.raises(FormatError):
            persist.decode_checkpoint(raw[:4] + struct.pack("<I", 2) + raw[8:])
        with pytest.raises(FormatError):
            persist.decode_checkpoint(raw[:8] + struct.pack("<I", len(raw)) + raw[12:])

    def test_shape_mismatch_vs_architecture(self, trained):
        ckpt = persist.checkpoint_from_trainer(trained)
        ckpt.tensors["g1.0.weight"] = np.zeros((3, 3), np.float32)
        with pytest.raises(FormatError):
            persist.trainer_from_checkpoint(persist.decode_checkpoint(persist.encode_checkpoint(ckpt)))

    def test_resume_reproduces_grid(self, trained, tmp_path):
        persist.save_checkpoint(persist.checkpoint_from_trainer(trained), tmp_path / "c.hagn")
        gen, rng = persist.generator_from_checkpoint(persist.load_checkpoint(tmp_path / "c.hagn"))
        state = trained.eval_rng.bit_generator.state
        before = sample_grid(trained.gen, 9, trained.eval_rng)
        trained.eval_rng.bit_generator.state = state
        assert sample_grid(gen, 9, rng).tobytes() == before.tobytes()

    def test_resumed_training_matches_uninterrupted(self, trained):
        clean = synth_rectangles_dataset(200, 8, 8, make_rng(0))
        ds = make_measured_dataset(clean, MeasurementSpec("block_pixel", p=0.5), 0)
        resumed = persist.trainer_from_checkpoint(persist.checkpoint_from_trainer(trained))
        twin = copy.deepcopy(trained)
        batch = ds.measured[:8]
        resumed.train_step(batch)
        twin.train_step(batch)
        pairs = zip(resumed.gen.params() + resumed.disc.params(), twin.gen.params() + twin.disc.params())
        assert all(a.tobytes() == b.tobytes() for a, b in pairs)
        assert resumed.rng.bit_generator.state == twin.rng.bit_generator.state


class TestPgm:
    def test_golden_zero(self):
        assert encode_pgm(tile_grid(np.zeros((1, 2, 2)), 1)) == b"P5\n2 2\n255\n\x00\x00\x00\x00"

    def test_scaling(self):
        np.testing.assert_array_equal(to_bytes([1.0, 0.5, 0.0, -3.0, 7.0]), [255, 128, 0, 0, 255])

    def test_tiling_dimensions(self):
        grid = tile_grid(np.ones((4, 3, 5)), 2)
        assert grid.shape == (7, 11)
        assert np.all(grid[3, :] == 128) and np.all(grid[:, 5] == 128)

    def test_partial_row_filled_with_separator(self):
        grid = tile_grid(np.zeros((3, 2, 2)), 2)
        assert grid.shape == (5, 5)
        assert np.all(grid[3:, 3:] == 128) and not grid[3:, :2].any()

    def test_golden_two_by_two_grid(self):
        samples = np.array([[[0.0]], [[1.0]], [[0.5]]])
        expected = b"P5\n3 3\n255\n" + bytes([0, 128, 255, 128, 128, 128, 128, 128, 128])
        assert encode_pgm(tile_grid(samples, 2)) == expected

    def test_pillow_reads_exact_values(self, tmp_path):
        rng = make_rng(0)
        samples = rng.integers(0, 256, (6, 4, 5)) / 255.0
        write_image_grid(samples, 3, tmp_path / "g.pgm")
        img = np.asarray(Image.open(tmp_path / "g.pgm"))
        assert img.shape == (9, 17)
        np.testing.assert_array_equal(img[:4, :5], np.round(samples[0] * 255))
        np.testing.assert_array_equal(img, read_pgm(tmp_path / "g.pgm"))

    def test_own_reader_accepts_pillow_output(self, tmp_path):
        arr = make_rng(1).integers(0, 256, (3, 7)).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr).save(buf, format="PPM")
        (tmp_path / "p.pgm").write_bytes(buf.getvalue())
        np.testing.assert_array_equal(read_pgm(tmp_path / "p.pgm"), arr)

    def test_bad_args(self):
        with pytest.raises(ValueError):
            tile_grid(np.zeros((0, 2, 2)), 1)
        with pytest.raises(ValueError):
            tile_grid(np.zeros((1, 2, 2)), 0)
