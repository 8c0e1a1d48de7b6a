import json
import os

import numpy as np
import pytest
from PIL import Image

from clipextract.cli import main
from clipextract.encoders import SeededEncoder, make_encoder, EncoderError
from clipextract.jobs import (
    DATASET_KINDS,
    ExtractJob,
    JobError,
    extract_frames,
    load_pairs,
    text_table_init,
)

# The training side validates the emitted files; its reader is the contract.
embdepth_dataio = pytest.importorskip("embdepth.dataio")

CLIP_WEIGHTS = os.environ.get("CLIP_WEIGHTS", "")


def _write_rgb(path, h, w, seed=0, checkerboard=False):
    rng = np.random.default_rng(seed)
    if checkerboard:
        # 14px cells, constant per cell: mirror-symmetric patch contents
        cells = rng.integers(0, 256, size=(h // 14, w // 14, 3), dtype=np.uint8)
        img = np.repeat(np.repeat(cells, 14, axis=0), 14, axis=1)
    else:
        img = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    Image.fromarray(img, "RGB").save(path)
    return path


def _write_depth(path, h, w, seed=0, scale=1000):
    rng = np.random.default_rng(seed)
    raw = rng.integers(0, 9000, size=(h, w)).astype(np.uint16)
    raw[rng.random((h, w)) < 0.1] = 0  # missing
    Image.fromarray(raw).save(path)
    return raw


@pytest.fixture()
def nyu_dir(tmp_path):
    (tmp_path / "rgb").mkdir()
    (tmp_path / "depth").mkdir()
    for i in range(3):
        _write_rgb(tmp_path / "rgb" / f"im{i}.png", 480, 640, seed=i)
        _write_depth(tmp_path / "depth" / f"im{i}.png", 480, 640, seed=i)
    return tmp_path


class TestSeededEncoderGeometry:
    def test_acceptance_contract(self, tmp_path):
        """336x336 image -> 576 patch vectors + CLS of width 768; the file
        passes the training-side reader; two runs are bit-identical; the text
        table emits unit-norm vectors."""
        rgb = _write_rgb(tmp_path / "one.png", 336, 336, seed=5)
        enc = SeededEncoder(seed=0)
        job = ExtractJob(pairs=[(rgb, None)], kind="nyu", flip=True,
                         out=tmp_path / "one.pceb")
        r1 = extract_frames(job, enc)
        spec, frames = embdepth_dataio.read_pceb(r1.out)
        assert (spec.grid_h * spec.grid_w, spec.dim) == (576, 768)
        assert frames[0].patches.shape == (24, 24, 768)
        assert frames[0].cls.shape == (768,)

        job2 = ExtractJob(pairs=[(rgb, None)], kind="nyu", flip=True,
                          out=tmp_path / "two.pceb")
        r2 = extract_frames(job2, SeededEncoder(seed=0))
        assert r1.out.read_bytes() == r2.out.read_bytes()

        table = text_table_init(np.linspace(1, 10, 15), tmp_path / "t.pctb", enc)
        vectors, centers = embdepth_dataio.read_pctb(table)
        norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
        assert np.abs(norms - 1.0).max() <= 1e-5
        print("[PASS] extractor contract (seeded backend)")

    def test_roundtrips_through_primary_writer(self, nyu_dir, tmp_path):
        enc = SeededEncoder(seed=1, width=32)  # narrow for speed
        job = ExtractJob(pairs=load_pairs(nyu_dir), kind="nyu", flip=True,
                         out=tmp_path / "set.pceb")
        result = extract_frames(job, enc)
        spec, frames = embdepth_dataio.read_pceb(result.out)
        again = embdepth_dataio.write_pceb(tmp_path / "again.pceb", spec, frames)
        assert result.out.read_bytes() == again.read_bytes()

    def test_flip_layout_matches_primary_convention(self, tmp_path):
        # checkerboard with patch-aligned cells: flipping the image mirrors
        # the embedding grid exactly
        rgb = _write_rgb(tmp_path / "cb.png", 336, 336, seed=2, checkerboard=True)
        job = ExtractJob(pairs=[(rgb, None)], kind="nyu", flip=True,
                         out=tmp_path / "cb.pceb")
        extract_frames(job, SeededEncoder(seed=0, width=16))
        _, frames = embdepth_dataio.read_pceb(tmp_path / "cb.pceb")
        direct = frames[0].patches
        flipped = frames[0].flipped_patches
        np.testing.assert_allclose(
            embdepth_dataio.hflip_grid(flipped), direct, atol=1e-6
        )

    def test_kitti_grid_is_one_wide_frame(self, tmp_path):
        rgb = _write_rgb(tmp_path / "k.png", 375, 1242, seed=3)
        depth_raw = _write_depth(tmp_path / "kd.png", 375, 1242, seed=3)
        job = ExtractJob(pairs=[(rgb, tmp_path / "kd.png")], kind="kitti",
                         flip=False, out=tmp_path / "k.pceb")
        extract_frames(job, SeededEncoder(seed=0, width=16))
        spec, frames = embdepth_dataio.read_pceb(tmp_path / "k.pceb")
        assert (spec.grid_h, spec.grid_w) == (24, 96)
        assert (spec.img_h, spec.img_w) == (336, 1344)
        assert len(frames) == 1
        assert spec.d_max == pytest.approx(30.0)

    def test_depth_scaling_and_missing(self, tmp_path):
        h = w = 336
        raw = np.zeros((h, w), dtype=np.uint16)
        raw[:, : w // 2] = 4000  # 4 m at NYU scale
        Image.fromarray(raw).save(tmp_path / "d.png")
        _write_rgb(tmp_path / "r.png", h, w, seed=4)
        job = ExtractJob(pairs=[(tmp_path / "r.png", tmp_path / "d.png")],
                         kind="nyu", flip=False, out=tmp_path / "d.pceb")
        extract_frames(job, SeededEncoder(seed=0, width=8))
        _, frames = embdepth_dataio.read_pceb(tmp_path / "d.pceb")
        depth = frames[0].pixel_depth
        assert depth[0, 0] == pytest.approx(4.0)
        assert np.isnan(depth[0, -1])  # raw 0 -> missing

    def test_failure_manifest_keeps_going(self, nyu_dir, tmp_path):
        bad = nyu_dir / "rgb" / "im1.png"
        bad.write_bytes(b"this is not an image")
        job = ExtractJob(pairs=load_pairs(nyu_dir), kind="nyu", flip=False,
                         out=tmp_path / "partial.pceb")
        result = extract_frames(job, SeededEncoder(seed=0, width=8))
        assert result.n_frames == 2
        assert len(result.failures) == 1
        manifest = json.loads(result.manifest.read_text())
        assert manifest["failures"][0]["image"].endswith("im1.png")
        assert manifest["backend"] == "seeded"


class TestTextTable:
    def test_deterministic_bytes(self, tmp_path):
        enc = SeededEncoder(seed=0)
        centers = np.linspace(0.5, 9.5, 15)
        a = text_table_init(centers, tmp_path / "a.pctb", enc)
        b = text_table_init(centers, tmp_path / "b.pctb", enc)
        assert a.read_bytes() == b.read_bytes()

    def test_recorded_centers_rounded_to_phrasing(self, tmp_path):
        enc = SeededEncoder(seed=0, width=8)
        centers = [1.0 / 3.0, 1.0, 9.6667]
        path = text_table_init(centers, tmp_path / "c.pctb", enc)
        _, recorded = embdepth_dataio.read_pctb(path)
        np.testing.assert_allclose(recorded, [0.3, 1.0, 9.7], atol=1e-6)

    def test_distinct_phrases_distinct_vectors(self, tmp_path):
        enc = SeededEncoder(seed=0)
        path = text_table_init(np.linspace(1, 10, 15), tmp_path / "d.pctb", enc)
        vectors, _ = embdepth_dataio.read_pctb(path)
        v = vectors.astype(np.float64)
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        cos = v @ v.T
        off_diag = cos[~np.eye(len(v), dtype=bool)]
        assert off_diag.max() < 1.0 - 1e-6

    def test_template_needs_value_slot(self, tmp_path):
        with pytest.raises(JobError):
            text_table_init([1.0], tmp_path / "x.pctb", SeededEncoder(), template="meters")


class TestCli:
    def test_extract_and_table(self, nyu_dir, tmp_path, capsys):
        rc = main([
            "extract", "--dataset", "nyu", "--images", str(nyu_dir),
            "--out", str(tmp_path / "cli.pceb"), "--flip",
            "--backend", "seeded",
        ])
        assert rc == 0
        spec, frames = embdepth_dataio.read_pceb(tmp_path / "cli.pceb")
        assert len(frames) == 3 and spec.dim == 768
        rc = main([
            "table", "--bins", "15", "--range", "0:10",
            "--out", str(tmp_path / "cli.pctb"), "--backend", "seeded",
        ])
        assert rc == 0
        vectors, centers = embdepth_dataio.read_pctb(tmp_path / "cli.pctb")
        assert vectors.shape == (15, 768)
        assert centers[0] == pytest.approx(0.3, abs=1e-6)

    def test_unknown_backend_rejected(self):
        with pytest.raises(EncoderError):
            make_encoder("bogus")


@pytest.mark.skipif(not CLIP_WEIGHTS, reason="set CLIP_WEIGHTS to a local ViT-L/14@336 dir")
class TestRealClip:
    def test_contract_on_real_weights(self, tmp_path):
        from clipextract.encoders import ClipEncoder

        enc = ClipEncoder(source=CLIP_WEIGHTS)
        rgb = _write_rgb(tmp_path / "img.png", 336, 336, seed=0)
        job = ExtractJob(pairs=[(rgb, None)], kind="nyu", flip=True,
                         out=tmp_path / "real.pceb")
        r1 = extract_frames(job, enc)
        spec, frames = embdepth_dataio.read_pceb(r1.out)
        assert (spec.grid_h * spec.grid_w, spec.dim) == (576, 768)
        job2 = ExtractJob(pairs=[(rgb, None)], kind="nyu", flip=True,
                          out=tmp_path / "real2.pceb")
        r2 = extract_frames(job2, enc)
        assert r1.out.read_bytes() == r2.out.read_bytes()
        table = text_table_init(np.linspace(1, 10, 15), tmp_path / "real.pctb", enc)
        vectors, _ = embdepth_dataio.read_pctb(table)
        norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
        assert np.abs(norms - 1.0).max() <= 1e-5
        print("[PASS] extractor contract (pretrained backend)")
