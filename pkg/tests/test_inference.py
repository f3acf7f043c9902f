import numpy as np
import pytest
import tifffile
import torch
from PIL import Image

from cldenoise.data import NormalizationRecord
from cldenoise.errors import CropOutOfBounds, InvalidConfig
from cldenoise.inference import (
    TilingSpec,
    blend_window,
    denoise_frame,
    export_crops,
    tile_origins,
    write_denoised,
)
from cldenoise.models import build_generator

from conftest import TINY_GEN


class CountingModel:
    def __init__(self, fn=lambda b: b):
        self.fn = fn
        self.calls = 0
        self.tiles = 0

    def __call__(self, batch):
        self.calls += 1
        self.tiles += batch.shape[0]
        return self.fn(batch)


@pytest.mark.parametrize("blend", ["linear-ramp", "uniform-average"])
@pytest.mark.parametrize("shape", [(256, 256), (300, 300), (300, 520), (100, 180)])
def test_identity_model_reproduces_frame(blend, shape):
    frame = np.random.default_rng(0).random(shape)
    out = denoise_frame(lambda b: b, frame, TilingSpec(256, 32, blend))
    assert out.shape == frame.shape
    assert np.max(np.abs(out - frame)) < 1e-5


def test_constant_model_gives_partition_of_unity():
    frame = np.random.default_rng(1).random((300, 300))
    out = denoise_frame(torch.ones_like, frame, TilingSpec(256, 32))
    assert np.max(np.abs(out - 1.0)) < 1e-5


def test_single_tile_frame_is_one_forward_pass():
    model = CountingModel()
    frame = np.random.default_rng(2).random((256, 256))
    out = denoise_frame(model, frame, TilingSpec(256, 32))
    assert (model.calls, model.tiles) == (1, 1)
    np.testing.assert_array_equal(out, frame)


def test_small_frame_is_reflect_padded_and_cropped():
    model = CountingModel(lambda b: b * 2)
    frame = np.random.default_rng(3).random((40, 50))
    out = denoise_frame(model, frame, TilingSpec(64, 8))
    assert model.tiles == 1
    np.testing.assert_allclose(out, 2 * frame)


def test_tile_origins_cover_the_frame():
    for length in (256, 257, 300, 480, 481, 1000):
        starts = tile_origins(length, 256, 224)
        assert starts[0] == 0 and starts[-1] + 256 == max(length, 256)
        covered = np.zeros(max(length, 256), bool)
        for s in starts:
            covered[s:s + 256] = True
        assert covered.all()


def test_blend_window_is_strictly_positive():
    w = blend_window(TilingSpec(64, 16))
    assert w.min() > 0 and w.max() == 1.0
    np.testing.assert_array_equal(w, w.T)


def test_output_is_independent_of_tile_order():
    frame = np.random.default_rng(4).random((150, 170))
    gen = build_generator(TINY_GEN)
    spec = TilingSpec(16, 6)
    a = denoise_frame(gen, frame, spec, tile_order="raster")
    b = denoise_frame(gen, frame, spec, tile_order="reverse")
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_generator_output_is_bounded_and_deterministic():
    frame = np.random.default_rng(5).random((40, 56)) * 3
    gen = build_generator(TINY_GEN)
    spec = TilingSpec(16, 4)
    out = denoise_frame(gen, frame, spec)
    assert np.abs(out).max() <= 1
    np.testing.assert_array_equal(out, denoise_frame(gen, frame, spec))


def test_tiling_spec_validation():
    with pytest.raises(InvalidConfig):
        TilingSpec(64, 64)
    with pytest.raises(InvalidConfig):
        TilingSpec(64, 8, "median")


# -- crops --------------------------------------------------------------------

def _frames(shape=(512, 512)):
    rng = np.random.default_rng(6)
    gt = rng.random(shape)
    return gt + rng.normal(0, 0.1, shape), gt * 0.95, gt


def test_export_crops_reference_box(tmp_path):
    paths = export_crops(*_frames(), (200, 328, 160, 328), tmp_path)
    assert set(paths) == {"noisy", "denoised", "gt"}
    for key, path in paths.items():
        assert path.name == f"{key}_crop_200_328_160_328.png"
        img = np.asarray(Image.open(path))
        assert img.shape == (128, 168) and img.dtype == np.uint8


def test_export_full_frame(tmp_path):
    noisy, den, gt = _frames((64, 48))
    paths = export_crops(noisy, den, gt, (0, 64, 0, 48), tmp_path)
    assert np.asarray(Image.open(paths["gt"])).shape == (64, 48)


def test_shared_display_normalization(tmp_path):
    noisy, den, gt = _frames((32, 32))
    noisy[5, 7] = gt[5, 7] = 0.5
    paths = export_crops(noisy, den, gt, (0, 32, 0, 32), tmp_path)
    a = np.asarray(Image.open(paths["noisy"]))
    b = np.asarray(Image.open(paths["gt"]))
    assert a[5, 7] == b[5, 7]


def test_crop_out_of_bounds(tmp_path):
    with pytest.raises(CropOutOfBounds):
        export_crops(*_frames((64, 64)), (0, 65, 0, 10), tmp_path)
    with pytest.raises(CropOutOfBounds):
        export_crops(*_frames((64, 64)), (10, 10, 0, 10), tmp_path)


def test_write_denoised(tmp_path):
    out = np.random.default_rng(7).random((20, 24))
    rec = NormalizationRecord(0.1, 99.9, 100.0, 4100.0)
    write_denoised(tmp_path / "d.tif", out, rec, raw_path=tmp_path / "raw.tif")
    back = tifffile.imread(tmp_path / "d.tif")
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, out.astype(np.float32))
    raw = tifffile.imread(tmp_path / "raw.tif")
    assert raw.dtype == np.uint16
    np.testing.assert_allclose(raw, np.round(out * 4000 + 100), atol=0)
    with pytest.raises(InvalidConfig):
        write_denoised(tmp_path / "x.tif", out, None, raw_path=tmp_path / "y.tif")
