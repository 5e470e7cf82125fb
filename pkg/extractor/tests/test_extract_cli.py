from __future__ import annotations

import importlib
import json

import numpy as np

import oiparts_extractor.cli as cli

from conftest import StubBackend

# the package re-exports the extract() function under the submodule's name,
# so fetch the module itself for patching
extract_mod = importlib.import_module("oiparts_extractor.extract")


def test_cli_end_to_end_with_stub(tmp_path, monkeypatch, image_file, capsys):
    monkeypatch.setattr(extract_mod, "default_backend", StubBackend)
    img = image_file("horse.png")
    out = tmp_path / "features"
    code = cli.main(
        ["--images", str(img), "--category", "horse", "--timestep", "100",
         "--resolution", "60", "--out", str(out)]
    )
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["images"][0]["dino"] == "horse_dino.npy"
    assert np.load(out / "horse_sd.npy").shape == (60, 60, 768)
    assert "wrote 1 image(s)" in capsys.readouterr().out


def test_cli_rejects_bad_timestep(tmp_path, image_file, capsys):
    code = cli.main(
        ["--images", str(image_file()), "--category", "horse",
         "--timestep", "5000", "--out", str(tmp_path / "out")]
    )
    assert code == 2
    assert "timestep" in capsys.readouterr().err
