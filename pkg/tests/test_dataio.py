import filecmp
import hashlib

import numpy as np
import pytest

from idsr.dataio import (
    CorruptImageHeader,
    ImageFormatError,
    ManifestRecord,
    SyntheticIdentity,
    TruncatedImage,
    UnsupportedImageFormat,
    decode_image,
    identity_for,
    load_image,
    make_synthetic_dataset,
    read_manifest,
    render_synthetic,
    save_image,
    synthetic_arrays,
    write_manifest,
)
from idsr.frnet import embed_batched


def test_pgm_byte_mapping(tmp_path):
    p = tmp_path / "tiny.pgm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    img = load_image(p)
    assert img.shape == (1, 2, 2) and img.dtype == np.float32
    np.testing.assert_array_equal(img.ravel(), np.array([0, 255, 128, 64], np.float32) / np.float32(255))


def test_pgm_comment_in_header():
    img = decode_image(b"P5\n# made by hand\n2 1\n255\n" + bytes([10, 20]))
    np.testing.assert_array_equal(img.ravel() * 255, [10, 20])


@pytest.mark.parametrize("suffix,channels", [(".png", 1), (".png", 3), (".pgm", 1), (".ppm", 3)])
def test_round_trip_bit_exact(tmp_path, suffix, channels):
    u8 = np.random.default_rng(channels).integers(0, 256, (channels, 9, 13)).astype(np.uint8)
    img = u8.astype(np.float32) / np.float32(255)
    save_image(tmp_path / f"x{suffix}", img)
    back = load_image(tmp_path / f"x{suffix}")
    np.testing.assert_array_equal(back, img)


@pytest.mark.parametrize(
    "raw,err",
    [
        (b"P5\n2 x\n255\n\x00\x00\x00\x00", CorruptImageHeader),
        (b"P5\n2 2\n255\n\x00\x01", TruncatedImage),
        (b"P5\n2 2\n65535\n" + bytes(8), UnsupportedImageFormat),
        (b"P5\n2", CorruptImageHeader),
        (b"GIF89a....", UnsupportedImageFormat),
        (b"\x89PNG\r\n\x1a\n" + bytes(40), CorruptImageHeader),
        (b"\x89PNG\r\n\x1a\n\x00", TruncatedImage),
    ],
)
def test_bad_files_raise_format_errors(raw, err):
    with pytest.raises(err):
        decode_image(raw)
    assert issubclass(err, ImageFormatError)


def test_truncated_png(tmp_path):
    save_image(tmp_path / "a.png", np.random.default_rng(0).random((3, 32, 32)))
    raw = (tmp_path / "a.png").read_bytes()
    with pytest.raises(ImageFormatError):
        decode_image(raw[: len(raw) // 2])


def test_save_rejects_mismatched_suffix(tmp_path):
    with pytest.raises(ValueError):
        save_image(tmp_path / "a.pgm", np.zeros((3, 4, 4)))
    with pytest.raises(UnsupportedImageFormat):
        save_image(tmp_path / "a.bmp", np.zeros((1, 4, 4)))


class TestSynthetic:
    def test_same_seed_same_image(self):
        a = render_synthetic(identity_for(3, 1), (3, 1, 1, 0))
        b = render_synthetic(identity_for(3, 1), (3, 1, 1, 0))
        np.testing.assert_array_equal(a, b)

    def test_nuisance_changes_image(self):
        ident = identity_for(3, 1)
        assert not np.array_equal(render_synthetic(ident, 1), render_synthetic(ident, 2))

    @pytest.mark.parametrize("channels", [1, 3])
    def test_all_half_identity(self, channels):
        img = render_synthetic(SyntheticIdentity((0.5,) * 12), 0, channels)
        assert img.shape == (channels, 128, 128)
        assert np.isfinite(img).all() and img.min() >= 0 and img.max() <= 1

    @pytest.mark.parametrize("params", [(0.5,) * 11, (0.5,) * 11 + (1.5,)])
    def test_bad_identity(self, params):
        with pytest.raises(ValueError):
            SyntheticIdentity(params)

    def test_arrays_match_disk(self, tmp_path):
        m = make_synthetic_dataset(tmp_path, 2, 3, seed=4)
        _, arr = synthetic_arrays(2, 3, seed=4, channels=3)
        disk = np.stack([load_image(r.path) for r in m.records])
        np.testing.assert_array_equal(disk, arr)

    def test_embedder_separates_identities(self, embedder):
        """Same-identity pairs sit closer than different-identity pairs, averaged over 100 trials."""
        rng = np.random.default_rng(77)
        same, diff = [], []
        for t in range(100):
            i, j = rng.choice(50, 2, replace=False)
            a = render_synthetic(identity_for(5, i), (5, 9, t, 0))
            b = render_synthetic(identity_for(5, i), (5, 9, t, 1))
            c = render_synthetic(identity_for(5, j), (5, 9, t, 2))
            e = embed_batched(embedder, np.stack([a, b, c]))
            same.append(np.sum((e[0] - e[1]) ** 2))
            diff.append(np.sum((e[0] - e[2]) ** 2))
        assert np.mean(same) < np.mean(diff)
        assert np.mean(np.array(same) < np.array(diff)) > 0.9


class TestDataset:
    def test_counts_and_roles(self, tmp_path):
        make_synthetic_dataset(tmp_path, 10, 4, seed=7)
        assert len(list(tmp_path.glob("*.png"))) == 40
        m = read_manifest(tmp_path / "manifest.csv")
        roles = [r.role for r in m.records]
        assert (roles.count("gallery"), roles.count("probe"), roles.count("train")) == (10, 10, 20)
        assert m.labels("gallery") == [f"id{i:03d}" for i in range(10)]

    def test_byte_identical_rerun(self, tmp_path):
        make_synthetic_dataset(tmp_path / "a", 3, 3, seed=7)
        make_synthetic_dataset(tmp_path / "b", 3, 3, seed=7)
        cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
        assert not cmp.left_only and not cmp.right_only
        for name in cmp.common_files:
            a = hashlib.sha256((tmp_path / "a" / name).read_bytes()).digest()
            assert a == hashlib.sha256((tmp_path / "b" / name).read_bytes()).digest()

    def test_different_seed_differs(self, tmp_path):
        make_synthetic_dataset(tmp_path / "a", 1, 1, seed=7)
        make_synthetic_dataset(tmp_path / "b", 1, 1, seed=8)
        assert (tmp_path / "a/id000_00.png").read_bytes() != (tmp_path / "b/id000_00.png").read_bytes()

    @pytest.mark.parametrize("n_ids,n_imgs", [(0, 4), (3, 0)])
    def test_zero_counts_rejected(self, tmp_path, n_ids, n_imgs):
        with pytest.raises(ValueError):
            make_synthetic_dataset(tmp_path, n_ids, n_imgs, seed=0)

    def test_manifest_load(self, tmp_path):
        m = make_synthetic_dataset(tmp_path, 2, 2, seed=1, channels=1, ext=".pgm")
        recs, imgs = read_manifest(tmp_path / "manifest.csv").load("probe")
        assert [r.label for r in recs] == ["id000", "id001"] and imgs.shape == (2, 1, 128, 128)
        assert m.root == tmp_path


class TestManifest:
    def test_missing_file(self, tmp_path):
        write_manifest(tmp_path / "m.csv", [ManifestRecord("a", "gallery", tmp_path / "nope.png")])
        with pytest.raises(FileNotFoundError, match="nope.png"):
            read_manifest(tmp_path / "m.csv")

    def test_bad_role(self, tmp_path):
        (tmp_path / "m.csv").write_text("label,role,path\na,query,x.png\n")
        with pytest.raises(ValueError, match="role"):
            read_manifest(tmp_path / "m.csv", check_paths=False)

    def test_missing_columns(self, tmp_path):
        (tmp_path / "m.csv").write_text("label,path\na,x.png\n")
        with pytest.raises(ValueError, match="columns"):
            read_manifest(tmp_path / "m.csv")

    def test_optional_columns_round_trip(self, tmp_path):
        recs = [ManifestRecord("7", "probe", tmp_path / "p.png", camera="cam2", distance="d3")]
        write_manifest(tmp_path / "m.csv", recs)
        back = read_manifest(tmp_path / "m.csv", check_paths=False).records[0]
        assert (back.camera, back.distance, back.path) == ("cam2", "d3", tmp_path / "p.png")
