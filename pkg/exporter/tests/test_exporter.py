import json
import os
import struct

import numpy as np
import pytest

from feature_exporter.backends import (
    SD15_WIDTHS,
    SurrogateWidthsBackend,
    make_backend,
    stage_spatial_sizes,
)
from feature_exporter.errors import ExportError, InputError, RetrievalError
from feature_exporter.export import ExportConfig, export
from feature_exporter.fpyr import read_fpyr_header, write_fpyr
from feature_exporter.preprocess import decode_ppm, preprocess, read_manifest


def write_ppm(path, img):
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


@pytest.fixture()
def workspace(tmp_path):
    rng = np.random.default_rng(0)
    names = []
    for i in range(3):
        img = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
        name = f"face{i}.ppm"
        write_ppm(str(tmp_path / name), img)
        names.append(name)
    manifest = tmp_path / "manifest.csv"
    manifest.write_text("".join(f"{n},{2.0 + i}\n" for i, n in enumerate(names)))
    return tmp_path, manifest


class TestPreprocess:
    def test_manifest_order_and_values(self, workspace):
        _, manifest = workspace
        rows = read_manifest(str(manifest))
        assert [r[1] for r in rows] == [2.0, 3.0, 4.0]

    def test_bad_manifest_line(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("no-comma-here\n")
        with pytest.raises(InputError):
            read_manifest(str(p))

    def test_preprocess_shape_and_normalization(self, workspace):
        root, _ = workspace
        out = preprocess("face0.ppm", root_dir=str(root))
        assert out.shape == (3, 224, 224)
        assert np.isfinite(out).all()
        # white pixel maps to (1 - mean)/std; red channel ~ 2.2489
        white = np.full((8, 8, 3), 255, dtype=np.uint8)
        write_ppm(str(root / "white.ppm"), white)
        w = preprocess("white.ppm", root_dir=str(root))
        assert abs(w[0, 0, 0] - (1 - 0.485) / 0.229) < 1e-4

    def test_decode_rejects_wrong_magic(self):
        with pytest.raises(InputError):
            decode_ppm(b"P5\n1 1\n255\n\x00")


class TestFpyr:
    def test_write_and_header(self, tmp_path):
        rng = np.random.default_rng(1)
        scales = [rng.normal(size=(c, 4, 4)).astype(np.float32) for c in (2, 3, 4, 5)]
        path = str(tmp_path / "x.fpyr")
        write_fpyr(path, scales)
        assert read_fpyr_header(path) == [(2, 4, 4), (3, 4, 4), (4, 4, 4), (5, 4, 4)]
        blob = open(path, "rb").read()
        assert blob[:4] == b"FPYR"
        assert struct.unpack_from("<II", blob, 4) == (1, 4)

    def test_no_temp_files_left(self, tmp_path):
        scales = [np.zeros((2, 3, 3), dtype=np.float32)] * 4
        write_fpyr(str(tmp_path / "y.fpyr"), scales)
        assert sorted(os.listdir(tmp_path)) == ["y.fpyr"]

    def test_wrong_scale_count(self, tmp_path):
        with pytest.raises(ExportError):
            write_fpyr(str(tmp_path / "z.fpyr"), [np.zeros((1, 2, 2), dtype=np.float32)] * 3)

    def test_nonfinite_rejected(self, tmp_path):
        bad = [np.zeros((1, 2, 2), dtype=np.float32) for _ in range(4)]
        bad[2][0, 0, 0] = np.nan
        with pytest.raises(ExportError):
            write_fpyr(str(tmp_path / "w.fpyr"), bad)


class TestSurrogateBackend:
    def test_real_widths_and_spatial_ladder(self):
        backend = SurrogateWidthsBackend("some/model", 0, "latent")
        img = np.random.default_rng(2).normal(size=(3, 224, 224)).astype(np.float32)
        scales = backend.extract(img)
        assert [s.shape[0] for s in scales] == list(SD15_WIDTHS)
        assert [s.shape[1] for s in scales] == list(stage_spatial_sizes())
        assert stage_spatial_sizes() == (28, 14, 7, 7)

    def test_deterministic_per_inputs(self):
        img = np.random.default_rng(3).normal(size=(3, 224, 224)).astype(np.float32)
        a = SurrogateWidthsBackend("m", 0, "latent").extract(img)
        b = SurrogateWidthsBackend("m", 0, "latent").extract(img)
        for x, y in zip(a, b):
            assert x.tobytes() == y.tobytes()

    def test_different_timestep_different_features(self):
        img = np.random.default_rng(4).normal(size=(3, 224, 224)).astype(np.float32)
        a = SurrogateWidthsBackend("m", 0, "latent").extract(img)
        b = SurrogateWidthsBackend("m", 250, "latent").extract(img)
        assert not np.array_equal(a[0], b[0])


class TestHubBackend:
    def test_unavailable_runtime_is_retrieval_error(self):
        pytest.importorskip("numpy")
        try:
            import diffusers  # noqa: F401

            pytest.skip("diffusers installed; cannot test the unavailable path")
        except ImportError:
            pass
        with pytest.raises(RetrievalError):
            make_backend("hub", "some/model", 0, "latent")

    def test_pixel_pathway_rejected(self):
        with pytest.raises(InputError):
            make_backend("hub", "some/model", 0, "pixel")


class TestExport:
    def test_one_file_per_image_with_sidecars(self, workspace):
        root, manifest = workspace
        out = root / "features"
        cfg = ExportConfig(backend="surrogate", out_dir=str(out), model_id="m", timestep=0)
        written = export(str(manifest), cfg, root_dir=str(root))
        assert len(written) == 3
        for i in range(3):
            assert (out / f"face{i}.fpyr").exists()
            meta = json.loads((out / f"face{i}.meta.json").read_text())
            assert meta == {
                "model_id": "m",
                "timestep": 0,
                "pathway": "latent",
                "backend": "surrogate",
            }

    def test_reexport_byte_identical_at_timestep_zero(self, workspace):
        root, manifest = workspace
        cfg = ExportConfig(backend="surrogate", out_dir=str(root / "f1"), timestep=0)
        cfg2 = ExportConfig(backend="surrogate", out_dir=str(root / "f2"), timestep=0)
        export(str(manifest), cfg, root_dir=str(root))
        export(str(manifest), cfg2, root_dir=str(root))
        for i in range(3):
            b1 = (root / "f1" / f"face{i}.fpyr").read_bytes()
            b2 = (root / "f2" / f"face{i}.fpyr").read_bytes()
            assert b1 == b2

    def test_cli_exit_codes(self, workspace, capsys):
        from feature_exporter.cli import main

        root, manifest = workspace
        code = main(
            [
                "--manifest", str(manifest), "--data-root", str(root),
                "--out", str(root / "cli_out"), "--backend", "surrogate",
            ]
        )
        assert code == 0
        assert main(["--manifest", "/nope.csv", "--out", str(root / "x")]) == 2
