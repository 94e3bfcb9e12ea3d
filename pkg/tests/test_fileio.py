"""Round-trips and corruption handling for every artifact format."""

import numpy as np
import pytest

from vlx4d import fileio
from vlx4d.fileio import FormatError
from vlx4d.geom import SpatioTemporalPointCloud


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {
            "enc.block0.q.w": rng.standard_normal((8, 4)),
            "enc.norm.g": rng.standard_normal(16),
            "scalar": np.array(3.25),
        }
        p = tmp_path / "model.vlxt"
        fileio.save_tensors(p, tensors)
        back = fileio.load_tensors(p)
        assert set(back) == set(tensors)
        for k in tensors:
            assert np.array_equal(back[k], np.asarray(tensors[k], dtype=np.float64))
            assert back[k].shape == np.asarray(tensors[k]).shape

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.vlxt"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            fileio.load_tensors(p)

    def test_version_mismatch_names_versions(self, tmp_path):
        p = tmp_path / "v9.vlxt"
        p.write_bytes(b"VLXT" + np.uint32(9).tobytes())
        with pytest.raises(FormatError, match="9"):
            fileio.load_tensors(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "ok.vlxt"
        fileio.save_tensors(p, {"w": np.ones((4, 4))})
        data = p.read_bytes()
        p.write_bytes(data[:-8])
        with pytest.raises(FormatError, match="truncated"):
            fileio.load_tensors(p)


class TestCloud:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        cloud = SpatioTemporalPointCloud(rng.uniform(-1, 1, (100, 3)),
                                         rng.random((100, 3)),
                                         rng.integers(0, 24, 100) / 100.0)
        p = tmp_path / "c.vlxp"
        fileio.save_cloud(p, cloud)
        back = fileio.load_cloud(p)
        # f32 storage: exact only to single precision
        np.testing.assert_allclose(back.positions, cloud.positions, atol=1e-6)
        np.testing.assert_allclose(back.colors, cloud.colors, atol=1e-6)
        np.testing.assert_allclose(back.times, cloud.times, atol=1e-7)
        assert len(back) == 100

    def test_empty_cloud(self, tmp_path):
        cloud = SpatioTemporalPointCloud(np.zeros((0, 3)), np.zeros((0, 3)),
                                         np.zeros(0))
        p = tmp_path / "e.vlxp"
        fileio.save_cloud(p, cloud)
        assert len(fileio.load_cloud(p)) == 0

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.vlxp"
        p.write_bytes(b"XXXX")
        with pytest.raises(FormatError):
            fileio.load_cloud(p)


class TestTracks:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        traj = rng.standard_normal((5, 8, 3))
        vis = rng.random((5, 8)) < 0.5
        p = tmp_path / "t.vlxk"
        fileio.save_tracks(p, traj, vis)
        t2, v2 = fileio.load_tracks(p)
        np.testing.assert_allclose(t2, traj, atol=1e-6)
        np.testing.assert_array_equal(v2, vis)

    def test_shape_mismatch(self, tmp_path):
        with pytest.raises(FormatError):
            fileio.save_tracks(tmp_path / "x.vlxk", np.zeros((2, 3, 3)),
                               np.zeros((2, 4), bool))


class TestGaussians:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        g = rng.random((17, 14))
        p = tmp_path / "g.vlxg"
        fileio.save_gaussians(p, g, tau=0.23)
        g2, tau = fileio.load_gaussians(p)
        np.testing.assert_allclose(g2, g, atol=1e-6)
        assert tau == pytest.approx(0.23, abs=1e-7)


class TestImages:
    def test_ppm_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        img = rng.random((12, 9, 3))
        p = tmp_path / "i.ppm"
        fileio.save_ppm(p, img)
        back = fileio.load_ppm(p)
        assert back.shape == (12, 9, 3)
        assert np.abs(back - img).max() <= 0.5 / 255.0 + 1e-9

    def test_ppm_quantization_stable(self, tmp_path):
        img = np.full((2, 2, 3), 0.5)
        p = tmp_path / "q.ppm"
        fileio.save_ppm(p, img)
        fileio.save_ppm(tmp_path / "q2.ppm", fileio.load_ppm(p))
        assert (tmp_path / "q.ppm").read_bytes() == (tmp_path / "q2.ppm").read_bytes()

    def test_pfm_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        depth = rng.uniform(0, 5, (7, 11)).astype(np.float32).astype(np.float64)
        p = tmp_path / "d.pfm"
        fileio.save_pfm(p, depth)
        np.testing.assert_array_equal(fileio.load_pfm(p), depth)

    def test_bad_headers(self, tmp_path):
        (tmp_path / "bad.ppm").write_bytes(b"P5\n1 1\n255\n\x00")
        with pytest.raises(FormatError):
            fileio.load_ppm(tmp_path / "bad.ppm")
        (tmp_path / "bad.pfm").write_bytes(b"PF\n1 1\n-1.0\n" + b"\x00" * 12)
        with pytest.raises(FormatError):
            fileio.load_pfm(tmp_path / "bad.pfm")


class TestConfigAndLog:
    def test_config_round_trip(self, tmp_path):
        cfg = {"k": 256, "d": 16, "peak_lr": 0.0003, "family": "rotating-box",
               "use_flag": True}
        p = tmp_path / "run.cfg"
        fileio.save_config(p, cfg)
        back = fileio.load_config(p)
        assert back == cfg

    def test_config_comments_and_blank(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# a comment\n\nk = 4\nname = sphere scene\n")
        assert fileio.load_config(p) == {"k": 4, "name": "sphere scene"}

    def test_config_bad_line(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("no equals sign here\n")
        with pytest.raises(FormatError):
            fileio.load_config(p)

    def test_log_append_and_read(self, tmp_path):
        p = tmp_path / "train.log"
        fileio.append_log_line(p, {"step": 1, "L_V": 0.5, "L_GS": 0.25})
        fileio.append_log_line(p, {"step": 2, "L_V": 0.4, "L_GS": 0.2})
        rows = fileio.read_log(p)
        assert rows[0]["step"] == 1 and rows[1]["L_V"] == 0.4

    def test_tree_hash_detects_change(self, tmp_path):
        (tmp_path / "a.txt").write_text("one")
        (tmp_path / "sub").mkdir()
        (tmp_path / "sub" / "b.txt").write_text("two")
        h1 = fileio.tree_hash(tmp_path)
        (tmp_path / "sub" / "b.txt").write_text("two!")
        assert fileio.tree_hash(tmp_path) != h1
