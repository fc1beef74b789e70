import numpy as np
import pytest

from stabn.errors import InputError, StabnError
from stabn.explain import (
    colormap_jet,
    contact_sheet,
    encode_ppm,
    grayscale_frames,
    render_spatial,
    render_temporal,
    upsample_bilinear,
    write_ppm,
)


def read_ppm(data: bytes) -> np.ndarray:
    """Minimal independent P6 reader (whitespace-separated header tokens)."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    pos += 1  # single whitespace byte after maxval
    assert tokens[0] == "P6" and tokens[3] == "255"
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data[pos:], dtype=np.uint8).reshape(h, w, 3)


@pytest.fixture
def video():
    return np.random.default_rng(0).random((1, 3, 8, 8)).astype(np.float32)


class TestColormap:
    def test_endpoints(self):
        assert colormap_jet(0.0) == (0, 0, 255)
        assert colormap_jet(1.0) == (255, 0, 0)

    def test_midpoint_by_hand(self):
        # v = 0.5 sits halfway between cyan (0,1,1) and yellow (1,1,0)
        assert colormap_jet(0.5) == (128, 255, 128)

    def test_anchor_points(self):
        assert colormap_jet(1 / 3) == (0, 255, 255)
        assert colormap_jet(2 / 3) == (255, 255, 0)

    def test_clamps_outside_range(self):
        assert colormap_jet(-1.0) == colormap_jet(0.0)
        assert colormap_jet(2.0) == colormap_jet(1.0)


class TestUpsample:
    def test_constant_stays_constant(self):
        up = upsample_bilinear(np.full((3, 2, 2), 0.3), (8, 8))
        np.testing.assert_allclose(up, 0.3, rtol=0, atol=1e-15)

    def test_range_preserved(self):
        m = np.random.default_rng(1).random((4, 3, 5))
        up = upsample_bilinear(m, (12, 20))
        assert up.min() >= m.min() - 1e-15 and up.max() <= m.max() + 1e-15

    def test_identity_at_same_size(self):
        m = np.random.default_rng(2).random((2, 4, 4))
        np.testing.assert_allclose(upsample_bilinear(m, (4, 4)), m, rtol=0, atol=1e-15)


class TestRenderSpatial:
    def test_alpha_zero_is_grayscale(self, video):
        frames = render_spatial(video, np.random.default_rng(3).random((3, 2, 2)), alpha=0.0)
        gray = grayscale_frames(video)
        assert len(frames) == 3
        for f, g in zip(frames, gray):
            np.testing.assert_array_equal(f, g)

    def test_alpha_one_constant_map_is_red(self, video):
        frames = render_spatial(video, np.ones((1, 3, 4, 4)), alpha=1.0)
        for f in frames:
            assert f.shape == (8, 8, 3) and f.dtype == np.uint8
            assert np.all(f == np.array([255, 0, 0], dtype=np.uint8))

    @pytest.mark.parametrize("alpha", [-0.1, 1.1])
    def test_bad_alpha(self, video, alpha):
        with pytest.raises(InputError):
            render_spatial(video, np.ones((3, 2, 2)), alpha)

    def test_frame_count_mismatch(self, video):
        with pytest.raises(InputError):
            render_spatial(video, np.ones((2, 2, 2)))

    def test_pure(self, video):
        m = np.random.default_rng(4).random((3, 4, 4))
        a = render_spatial(video, m, 0.5)
        b = render_spatial(video, m, 0.5)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))


class TestRenderTemporal:
    def test_zero_weights_blue(self):
        swatches, csv = render_temporal(np.zeros(5))
        assert swatches == [(0, 0, 255)] * 5
        assert len(csv.splitlines()) == 6

    def test_csv_format_and_swatch_colors(self):
        weights = [0.1, 0.5, 0.123456789]
        swatches, csv = render_temporal(weights)
        lines = csv.splitlines()
        assert lines[0] == "frame,weight"
        assert lines[3] == "2,0.123457"
        assert swatches == [colormap_jet(v) for v in weights]


class TestContactSheet:
    def test_layout(self, video):
        overlays = render_spatial(video, np.full((3, 2, 2), 0.5))
        swatches, _ = render_temporal([0.0, 0.5, 1.0])
        sheet = contact_sheet(video, overlays, swatches)
        assert sheet.shape == (8 + 6 + 8, 24, 3)
        np.testing.assert_array_equal(sheet[:8, 8:16], grayscale_frames(video)[1])
        assert tuple(sheet[10, 20]) == (255, 0, 0)
        np.testing.assert_array_equal(sheet[14:, :8], overlays[0])


class TestPpm:
    def test_golden_red_pixel(self, tmp_path):
        write_ppm(tmp_path / "red.ppm", np.array([[[255, 0, 0]]], dtype=np.uint8))
        data = (tmp_path / "red.ppm").read_bytes()
        # 11 header bytes plus one RGB triple
        assert data == b"P6\n1 1\n255\n\xff\x00\x00"
        assert len(data) == 14

    def test_round_trip_with_reference_reader(self):
        raster = np.random.default_rng(5).integers(0, 256, size=(7, 5, 3), dtype=np.uint8)
        np.testing.assert_array_equal(read_ppm(encode_ppm(raster)), raster)

    def test_zero_dimension(self):
        with pytest.raises(InputError):
            encode_ppm(np.zeros((0, 4, 3), dtype=np.uint8))

    def test_bad_channels(self):
        with pytest.raises(InputError):
            encode_ppm(np.zeros((2, 2, 4), dtype=np.uint8))

    def test_io_failure_names_path(self, tmp_path):
        target = tmp_path / "missing" / "x.ppm"
        with pytest.raises(StabnError, match="missing"):
            write_ppm(target, np.zeros((1, 1, 3), dtype=np.uint8))
