import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stabn.errors import ConfigurationError, FormatError, InputError
from stabn.synth import (
    DIRECTIONS,
    SynthConfig,
    batch_iter,
    decode_dataset,
    encode_dataset,
    file_checksum,
    generate,
    load_dataset,
    render_sample,
    save_dataset,
    shuffled_order,
)

SMALL = dict(samples_train=24, samples_val=8, size=16, frames=6, window_len=3, shape_size=3)


@pytest.fixture(scope="module")
def small():
    return generate(SynthConfig(**SMALL))


@pytest.fixture(scope="module")
def clean():
    return generate(SynthConfig(**{**SMALL, "noise_std": 0.0, "samples_train": 40}))[0]


def detect_direction(video):
    """Hand-written detector: centroid displacement of the bright square."""
    frames = video[0]
    ys, xs = [], []
    for f in frames:
        r, c = np.nonzero(f > 0.5)
        ys.append(r.mean())
        xs.append(c.mean())
    dy, dx = ys[-1] - ys[0], xs[-1] - xs[0]
    if abs(dy) > abs(dx):
        return 0 if dy < 0 else 1
    return 2 if dx < 0 else 3


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [dict(num_classes=3), dict(shape_size=32), dict(window_len=0), dict(window_len=9), dict(noise_std=-1.0)],
    )
    def test_invalid_configs(self, kwargs):
        with pytest.raises(ConfigurationError):
            SynthConfig(**kwargs).validate()

    def test_dict_round_trip(self):
        cfg = SynthConfig(noise_std=0.25, seed=7)
        assert SynthConfig.from_dict(cfg.to_dict()) == cfg


class TestGeneration:
    def test_deterministic(self, small):
        again = generate(SynthConfig(**SMALL))
        for a, b in zip(small, again):
            np.testing.assert_array_equal(a.videos, b.videos)
            np.testing.assert_array_equal(a.labels, b.labels)
            np.testing.assert_array_equal(a.windows, b.windows)
            np.testing.assert_array_equal(a.bboxes, b.bboxes)

    def test_samples_independent_of_count(self):
        few = generate(SynthConfig(**{**SMALL, "samples_train": 5}))[0]
        many = generate(SynthConfig(**{**SMALL, "samples_train": 9}))[0]
        np.testing.assert_array_equal(few.videos, many.videos[:5])

    def test_splits_differ(self, small):
        train, val = small
        assert not np.array_equal(train.videos[: len(val)], val.videos)

    def test_class_balance(self):
        train = generate(SynthConfig(**{**SMALL, "samples_train": 27, "samples_val": 0}))[0]
        hist = train.class_histogram()
        assert hist.sum() == 27
        assert hist.max() - hist.min() <= 1
        assert np.all(np.abs(hist - 27 / 4) <= 1)

    def test_value_range_and_dtype(self, small):
        v = small[0].videos
        assert v.dtype == np.float32
        assert v.min() >= 0.0 and v.max() <= 1.0

    def test_shift_by_one_pixel_right(self):
        cfg = SynthConfig(**{**SMALL, "noise_std": 0.0, "window_len": 6, "samples_train": 4})
        s = render_sample(cfg, "train", 3)  # label 3 moves right
        assert s.label == 3
        for t in range(cfg.frames - 1):
            np.testing.assert_array_equal(s.video[0, t + 1, :, 1:], s.video[0, t, :, :-1])

    def test_motion_only_inside_window(self, clean):
        for i in range(len(clean)):
            t0, length = clean.windows[i]
            diffs = np.diff(clean.videos[i, 0], axis=0)
            energy = (diffs**2).sum(axis=(1, 2))
            for t, e in enumerate(energy):
                if t0 <= t < t0 + length:
                    assert e > 0
                else:
                    assert e == 0

    def test_labels_recoverable_by_hand_detector(self, clean):
        predicted = [detect_direction(v) for v in clean.videos]
        np.testing.assert_array_equal(predicted, clean.labels)

    def test_bboxes_cover_the_square(self, clean):
        side = clean.config.shape_size
        for i in range(5):
            for t, (x0, y0, x1, y1) in enumerate(clean.bboxes[i]):
                assert (x1 - x0, y1 - y0) == (side, side)
                frame = clean.videos[i, 0, t]
                assert frame[y0:y1, x0:x1].min() == 1.0
                assert frame.sum() == side * side

    def test_directions_table(self):
        assert DIRECTIONS[0] == (-1, 0) and DIRECTIONS[3] == (0, 1)

    def test_index_out_of_range(self, small):
        with pytest.raises(InputError):
            small[1][len(small[1])]

    def test_sample_view(self, small):
        s = small[0][2]
        assert s.video.shape == (1, 6, 16, 16)
        assert s.window[1] - s.window[0] == 3

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([2, 4]), st.integers(1, 5))
    def test_square_stays_inside_frame(self, seed, classes, window):
        cfg = SynthConfig(num_classes=classes, frames=5, size=10, shape_size=4, window_len=window, seed=seed,
                          samples_train=6, samples_val=0)
        train, _ = generate(cfg)
        assert train.bboxes.min() >= 0
        assert train.bboxes[..., 2:].max() <= 10


class TestFormat:
    def test_round_trip(self, small, tmp_path):
        crc = save_dataset(tmp_path / "a.stvid", small[0])
        back = load_dataset(tmp_path / "a.stvid")
        assert back.config == small[0].config
        assert back.split == "train"
        np.testing.assert_array_equal(back.videos, small[0].videos)
        np.testing.assert_array_equal(back.labels, small[0].labels)
        np.testing.assert_array_equal(back.windows, small[0].windows)
        np.testing.assert_array_equal(back.bboxes, small[0].bboxes)
        assert file_checksum(tmp_path / "a.stvid") == crc

    def test_resave_is_byte_identical(self, small, tmp_path):
        save_dataset(tmp_path / "a.stvid", small[1])
        save_dataset(tmp_path / "b.stvid", load_dataset(tmp_path / "a.stvid"))
        assert (tmp_path / "a.stvid").read_bytes() == (tmp_path / "b.stvid").read_bytes()

    def test_checksum_recomputes(self, small):
        data = encode_dataset(small[1])
        assert zlib.crc32(data[:-4]) == struct.unpack("<I", data[-4:])[0]

    def test_header_layout(self, small):
        data = encode_dataset(small[1])
        assert data[:5] == b"STVID" and data[5] == 1

    @pytest.mark.parametrize("cut", [1, 10, 200])
    def test_truncated_rejected(self, small, cut):
        data = encode_dataset(small[1])
        with pytest.raises(FormatError):
            decode_dataset(data[:-cut])

    def test_flipped_payload_byte_rejected(self, small):
        data = bytearray(encode_dataset(small[1]))
        data[len(data) // 2] ^= 0xFF
        with pytest.raises(FormatError, match="CRC"):
            decode_dataset(bytes(data))

    def test_bad_magic_and_version(self, small):
        data = encode_dataset(small[1])
        with pytest.raises(FormatError, match="magic"):
            decode_dataset(b"XXXXX" + data[5:])
        with pytest.raises(FormatError, match="version"):
            decode_dataset(data[:5] + b"\x02" + data[6:])

    def test_missing_file_is_input_error(self, tmp_path):
        with pytest.raises(InputError):
            load_dataset(tmp_path / "nope.stvid")


class TestBatching:
    def test_sizes_with_short_tail(self, small):
        ds = small[0]
        sub = type(ds)(ds.config, ds.split, ds.videos[:10], ds.labels[:10])
        assert [len(b.labels) for b in batch_iter(sub, 4)] == [4, 4, 2]

    def test_same_seed_same_order(self, small):
        a = np.concatenate([b.indices for b in batch_iter(small[0], 5, 3)])
        b = np.concatenate([b.indices for b in batch_iter(small[0], 5, 3)])
        c = np.concatenate([b.indices for b in batch_iter(small[0], 5, 4)])
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_every_index_exactly_once(self, small):
        idx = np.concatenate([b.indices for b in batch_iter(small[0], 7, 11)])
        assert sorted(idx.tolist()) == list(range(len(small[0])))

    def test_batches_are_float64_views_of_samples(self, small):
        batch = next(iter(batch_iter(small[0], 3, 0)))
        assert batch.videos.dtype == np.float64
        np.testing.assert_array_equal(batch.videos[1], small[0].videos[batch.indices[1]])
        np.testing.assert_array_equal(batch.labels, small[0].labels[batch.indices])

    def test_fisher_yates_is_permutation(self):
        order = shuffled_order(50, np.random.default_rng(0))
        assert sorted(order.tolist()) == list(range(50))

    def test_bad_batch_size(self, small):
        with pytest.raises(InputError):
            list(batch_iter(small[0], 0))
