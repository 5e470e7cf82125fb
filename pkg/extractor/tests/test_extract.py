from __future__ import annotations

import json

import numpy as np
import pytest

from oiparts_extractor import (
    ExtractSpec,
    extract,
    fit_channel_projection,
    resize_and_center_crop,
    resize_grid,
)

from conftest import StubBackend


def make_spec(image_paths, out_dir, **kwargs):
    defaults = dict(category="horse", timestep=100, resolution=60)
    defaults.update(kwargs)
    return ExtractSpec(images=tuple(str(p) for p in image_paths), out_dir=str(out_dir), **defaults)


# ---------------------------------------------------------------------------
# spec validation


def test_spec_validation(tmp_path):
    with pytest.raises(ValueError, match="timestep"):
        make_spec(["a.png"], tmp_path, timestep=1000)
    with pytest.raises(ValueError, match="resolution"):
        make_spec(["a.png"], tmp_path, resolution=0)
    with pytest.raises(ValueError, match="category"):
        make_spec(["a.png"], tmp_path, category="  ")
    with pytest.raises(ValueError, match="image"):
        make_spec([], tmp_path)
    assert make_spec(["a.png"], tmp_path).prompt == "a photo of horse"


# ---------------------------------------------------------------------------
# preprocessing helpers


def test_resize_and_center_crop_geometry(rng=np.random.default_rng(0)):
    image = rng.integers(0, 256, (100, 200, 3), dtype=np.uint8)
    out = resize_and_center_crop(image, 50)
    assert out.shape == (50, 50, 3)
    tall = rng.integers(0, 256, (300, 90, 3), dtype=np.uint8)
    assert resize_and_center_crop(tall, 64).shape == (64, 64, 3)


def test_resize_grid_constant_and_hand_values():
    constant = np.full((5, 5, 2), 3.5)
    assert np.allclose(resize_grid(constant, 8), 3.5)
    ramp = np.array([[0.0, 1.0]]).reshape(1, 2, 1)
    out = resize_grid(ramp, 4)[..., 0]
    assert out[0].tolist() == pytest.approx([0.0, 0.25, 0.75, 1.0])


def test_channel_projection_is_deterministic(rng=np.random.default_rng(1)):
    samples = rng.standard_normal((500, 12))
    first = fit_channel_projection(samples, 4)
    second = fit_channel_projection(samples, 4)
    assert np.array_equal(first[0], second[0])
    assert np.array_equal(first[1], second[1])
    # the top components capture a dominant planted direction
    planted = np.zeros(12)
    planted[3] = 1.0
    spiked = samples + 10.0 * rng.standard_normal((500, 1)) * planted
    _, components = fit_channel_projection(spiked, 2)
    assert abs(components[3, 0]) > 0.99


# ---------------------------------------------------------------------------
# extraction


def test_output_geometry(tmp_path, stub_backend, image_file):
    spec = make_spec([image_file()], tmp_path / "out")
    result = extract(spec, backend=stub_backend)
    entry = result.outputs[0]
    dino = np.load(tmp_path / "out" / entry["dino"])
    sd = np.load(tmp_path / "out" / entry["sd"])
    assert dino.shape == (60, 60, 1024)
    assert dino.dtype == np.float32
    assert sd.shape == (60, 60, 768)
    assert sd.dtype == np.float32


def test_outputs_are_npy_v1_little_endian(tmp_path, stub_backend, image_file):
    spec = make_spec([image_file()], tmp_path / "out")
    result = extract(spec, backend=stub_backend)
    for key in ("dino", "sd"):
        blob = (tmp_path / "out" / result.outputs[0][key]).read_bytes()
        assert blob[:6] == b"\x93NUMPY"
        assert blob[6:8] == b"\x01\x00"
        assert b"'descr': '<f4'" in blob[:128]


def test_outputs_load_through_engine_reader(tmp_path, stub_backend, image_file):
    op = pytest.importorskip("oiparts")
    spec = make_spec([image_file()], tmp_path / "out")
    result = extract(spec, backend=stub_backend)
    entry = result.outputs[0]
    sd = op.read_tensor(tmp_path / "out" / entry["sd"], source="sd")
    dino = op.read_tensor(tmp_path / "out" / entry["dino"], source="dino")
    fused = op.fuse(sd, dino)
    assert fused.map.channels == 768 + 1024
    assert (fused.map.height, fused.map.width) == (60, 60)


def test_exact_width_sd_needs_no_reduction(tmp_path, image_file):
    backend = StubBackend(sd_channels=768)
    spec = make_spec([image_file()], tmp_path / "out")
    extract(spec, backend=backend)
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["channel_reduction"] is None


def test_narrow_sd_backend_rejected(tmp_path, image_file):
    backend = StubBackend(sd_channels=512)
    spec = make_spec([image_file()], tmp_path / "out")
    with pytest.raises(ValueError, match="widen"):
        extract(spec, backend=backend)


def test_manifest_contents(tmp_path, stub_backend, image_file):
    paths = [image_file("a.png", seed=1), image_file("b.png", seed=2)]
    spec = make_spec(paths, tmp_path / "out", category="car", timestep=100)
    extract(spec, backend=stub_backend)
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["prompt"] == "a photo of car"
    assert manifest["timestep"] == 100
    assert manifest["models"]["dino"]["model"] == "stub-dino"
    assert manifest["preprocessing"]["policy"].startswith("aspect-preserving")
    assert manifest["channel_reduction"]["method"] == "pca"
    assert manifest["channel_reduction"]["from_channels"] == 1280
    assert len(manifest["images"]) == 2
    assert stub_backend.calls[0] == {"prompt": "a photo of car", "timestep": 100}


def test_non_image_files_skipped_with_warning(tmp_path, stub_backend, image_file):
    good = image_file("good.png")
    junk = tmp_path / "notes.txt"
    junk.write_text("not an image")
    spec = make_spec([good, junk], tmp_path / "out")
    with pytest.warns(UserWarning, match="notes.txt"):
        result = extract(spec, backend=stub_backend)
    assert len(result.outputs) == 1
    assert result.skipped == (str(junk),)
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["skipped"] == [str(junk)]


def test_all_unreadable_is_an_error(tmp_path, stub_backend):
    junk = tmp_path / "only.txt"
    junk.write_text("nope")
    spec = make_spec([junk], tmp_path / "out")
    with pytest.warns(UserWarning):
        with pytest.raises(ValueError, match="no readable images"):
            extract(spec, backend=stub_backend)


def test_extraction_is_deterministic(tmp_path, stub_backend, image_file):
    img = image_file()
    spec_a = make_spec([img], tmp_path / "a")
    spec_b = make_spec([img], tmp_path / "b")
    a = extract(spec_a, backend=StubBackend())
    b = extract(spec_b, backend=StubBackend())
    for key in ("dino", "sd"):
        assert (tmp_path / "a" / a.outputs[0][key]).read_bytes() == (
            tmp_path / "b" / b.outputs[0][key]
        ).read_bytes()


def test_pca_basis_is_shared_across_the_batch(tmp_path, image_file):
    solo = make_spec([image_file("a.png", seed=1)], tmp_path / "solo")
    pair = make_spec(
        [image_file("a2.png", seed=1), image_file("b.png", seed=9)], tmp_path / "pair"
    )
    out_solo = extract(solo, backend=StubBackend())
    out_pair = extract(pair, backend=StubBackend())
    solo_sd = (tmp_path / "solo" / out_solo.outputs[0]["sd"]).read_bytes()
    pair_sd = (tmp_path / "pair" / out_pair.outputs[0]["sd"]).read_bytes()
    # same source image, but the joint fit moves the basis
    assert solo_sd != pair_sd


def test_missing_weights_error_is_actionable(tmp_path, monkeypatch):
    transformers = pytest.importorskip("transformers")
    monkeypatch.setenv("HF_HOME", str(tmp_path / "empty-cache"))
    monkeypatch.setenv("HF_HUB_OFFLINE", "1")
    from oiparts_extractor import TorchBackend, WeightsUnavailable

    with pytest.raises(WeightsUnavailable, match="download"):
        TorchBackend()
