import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays
from PIL import Image

from rblb.imageio import ImageFormatError, list_pngs, load_image, save_image, to_bytes


def write_png(path, arr, mode="RGB"):
    Image.fromarray(arr, mode=mode).save(path, format="PNG")
    return path


class TestLoad:
    def test_byte_mapping(self, tmp_path):
        arr = np.zeros((2, 2, 3), np.uint8)
        arr[0, 0] = 255
        arr[1, 1] = (1, 128, 254)
        t = load_image(write_png(tmp_path / "x.png", arr))
        assert t.shape == (1, 3, 2, 2) and t.dtype == np.float32
        assert t.data[0, :, 0, 0].tolist() == [1.0, 1.0, 1.0]
        assert t.data[0, :, 0, 1].tolist() == [0.0, 0.0, 0.0]
        np.testing.assert_array_equal(t.data[0, :, 1, 1], np.float32([1, 128, 254]) / np.float32(255))

    @pytest.mark.parametrize("mode", ["L", "RGBA", "P"])
    def test_rejects_other_modes(self, tmp_path, mode):
        path = tmp_path / "x.png"
        Image.new(mode, (4, 4)).save(path, format="PNG")
        with pytest.raises(ImageFormatError, match="RGB"):
            load_image(path)

    def test_rejects_16_bit(self, tmp_path):
        path = tmp_path / "x.png"
        Image.fromarray(np.zeros((4, 4), np.uint16)).save(path, format="PNG")
        with pytest.raises(ImageFormatError):
            load_image(path)

    def test_rejects_jpeg(self, tmp_path):
        path = tmp_path / "x.png"
        Image.new("RGB", (4, 4)).save(path, format="JPEG")
        with pytest.raises(ImageFormatError, match="PNG"):
            load_image(path)


class TestSave:
    def test_rounding(self):
        assert to_bytes(np.array([0.5])).tolist() == [128]
        assert to_bytes(np.array([-0.2, 0.0, 1.0, 1.7])).tolist() == [0, 0, 255, 255]
        assert to_bytes(np.array([0.5 / 255, 1.49 / 255])).tolist() == [1, 1]

    @settings(max_examples=20)
    @given(data=arrays(np.uint8, (5, 6, 3)))
    def test_round_trip_byte_identical(self, tmp_path_factory, data):
        d = tmp_path_factory.mktemp("io")
        src = write_png(d / "a.png", data)
        out = save_image(load_image(src), d / "b.png")
        assert src.read_bytes() == out.read_bytes()
        np.testing.assert_array_equal(load_image(out).data, load_image(src).data)

    def test_float_round_trip_idempotent(self, tmp_path, rng):
        first = load_image(save_image(rng.random((1, 3, 7, 5)), tmp_path / "a.png"))
        second = load_image(save_image(first, tmp_path / "b.png"))
        np.testing.assert_array_equal(first.data, second.data)

    def test_accepts_chw_and_creates_dirs(self, tmp_path):
        path = save_image(np.full((3, 4, 4), 0.5), tmp_path / "deep" / "x.png")
        assert np.asarray(Image.open(path))[0, 0].tolist() == [128, 128, 128]

    def test_bad_shapes(self, tmp_path):
        with pytest.raises(ValueError, match="batch"):
            save_image(np.zeros((2, 3, 4, 4)), tmp_path / "x.png")
        with pytest.raises(ValueError, match="3 x H x W"):
            save_image(np.zeros((1, 4, 4)), tmp_path / "x.png")

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(OSError):
            save_image(np.zeros((3, 4, 4)), blocker / "x.png")


def test_list_pngs_sorted_and_filtered(tmp_path):
    for name in ("b.png", "a.PNG", "c.txt"):
        (tmp_path / name).write_bytes(b"")
    assert [p.name for p in list_pngs(tmp_path)] == ["a.PNG", "b.png"]
    with pytest.raises(FileNotFoundError):
        list_pngs(tmp_path / "missing")
