import csv

import numpy as np
import pytest

from splicefx import imageops, splicegen as sg
from splicefx.jpeg import decode_pixels, encode, parse_coefficients, quality_to_tables

from conftest import pil_jpeg


@pytest.fixture(scope="module")
def donor():
    img = sg.generate_image(3, 7, 128)
    patch, mask = sg.extract_object(img, np.random.default_rng(0), rel_size=0.4)
    return patch, mask


class TestCorpus:
    def test_deterministic(self):
        np.testing.assert_array_equal(sg.generate_image(1, 4, 64), sg.generate_image(1, 4, 64))

    def test_distinct(self):
        imgs = sg.gen_corpus(10, 64, seed=2)
        for i in range(10):
            for j in range(i + 1, 10):
                assert np.abs(imgs[i].astype(int) - imgs[j]).sum() > 0

    def test_range_and_shape(self):
        img = sg.generate_image(0, 0, 80)
        assert img.shape == (80, 80, 3) and img.dtype == np.uint8

    def test_too_small(self):
        with pytest.raises(sg.RangeError):
            sg.gen_corpus(1, 32, 0)


class TestTransform:
    def test_identity(self, donor):
        patch, mask = donor
        p, m = sg.transform_object(patch, mask, sg.SpliceRecipe(50, 50))
        np.testing.assert_array_equal(p, patch)
        np.testing.assert_array_equal(m, mask)

    def test_double_flip(self, donor):
        patch, mask = donor
        r = sg.SpliceRecipe(50, 50, flip=1)
        p1, m1 = sg.transform_object(patch, mask, r)
        p2, m2 = sg.transform_object(p1, m1, r)
        np.testing.assert_array_equal(p2, patch)
        np.testing.assert_array_equal(m2, mask)
        np.testing.assert_array_equal(p1, patch[:, ::-1])

    def test_example_row_area(self, donor):
        patch, mask = donor
        r = sg.SpliceRecipe(94, 73, "obj", 1.0, 28, 0, 1.73, 1.29, 1.81)
        p, m = sg.transform_object(patch, mask, r)
        ratio = m.sum() / mask.sum()
        assert 0.8 <= ratio <= 1.2
        assert p.min() >= 0 and p.max() <= 255

    @pytest.mark.parametrize("scale", [0.85, 0.9, 1.0])
    def test_scaled_area(self, donor, scale):
        patch, mask = donor
        _, m = sg.transform_object(patch, mask, sg.SpliceRecipe(50, 50, scale=scale,
                                                                 rotation_deg=61))
        ratio = m.sum() / mask.sum()
        assert scale ** 2 * 0.8 <= ratio <= scale ** 2 * 1.2

    def test_contrast_formula(self):
        patch = np.full((6, 6, 3), 100.0)
        patch[:3] = 120.0
        mask = np.ones((6, 6), bool)
        p, _ = sg.transform_object(patch, mask, sg.SpliceRecipe(50, 50, contrast=1.5))
        # mean luminance 110: 100 -> 95, 120 -> 125
        np.testing.assert_allclose(p[3:], 95.0)
        np.testing.assert_allclose(p[:3], 125.0)

    def test_brightness_clamps(self):
        patch = np.array([[[100.0, 200.0, 250.0]]])
        p, _ = sg.transform_object(patch, np.ones((1, 1), bool),
                                   sg.SpliceRecipe(50, 50, brightness=1.2))
        np.testing.assert_allclose(p[0, 0], [120, 240, 255])

    @pytest.mark.parametrize("factor", [1.5, 1.81, 2.0])
    def test_sharpness_matches_reference_enhancer(self, rng, factor):
        from PIL import Image, ImageEnhance
        patch = rng.integers(0, 256, (12, 15, 3), dtype=np.uint8)
        p, _ = sg.transform_object(patch, np.ones((12, 15), bool),
                                   sg.SpliceRecipe(50, 50, sharpness=factor))
        ref = np.asarray(ImageEnhance.Sharpness(Image.fromarray(patch)).enhance(factor))
        assert np.abs(np.rint(p) - ref).max() <= 1

    def test_sharpness_border_untouched(self, rng):
        patch = rng.uniform(60, 190, (9, 9, 3))
        p, _ = sg.transform_object(patch, np.ones((9, 9), bool),
                                   sg.SpliceRecipe(50, 50, sharpness=1.7))
        np.testing.assert_array_equal(p[0], patch[0])
        np.testing.assert_array_equal(p[:, -1], patch[:, -1])

    def test_empty_mask(self):
        with pytest.raises(sg.EmptyMask):
            sg.transform_object(np.zeros((4, 4, 3)), np.zeros((4, 4), bool),
                                sg.SpliceRecipe(50, 50, flip=1))


class TestSplice:
    def test_original(self):
        src = sg.generate_image(4, 0, 64)
        data = sg.make_original(src, 61)
        coef = parse_coefficients(data)
        np.testing.assert_array_equal(coef.quant_table(0), quality_to_tables(61)[0])
        assert data == sg.make_original(src, 61)
        hi, lo = parse_coefficients(sg.make_original(src, 95)), parse_coefficients(
            sg.make_original(src, 30))
        assert not np.array_equal(hi.luma, lo.luma)

    def test_spliced_tables_and_mask(self, donor):
        patch, pmask = donor
        target = sg.generate_image(4, 1, 128)
        recipe = sg.SpliceRecipe(88, 47, "o", 0.9, 33, 1, 1.6, 1.2, 1.8)
        data, mask = sg.make_spliced(patch, pmask, target, recipe, seed=3)
        coef = parse_coefficients(data)
        np.testing.assert_array_equal(coef.quant_table(0), quality_to_tables(47)[0])
        assert mask.shape == target.shape[:2]
        assert set(np.unique(mask).tolist()) == {0, 255}

    def test_background_is_first_compression(self, donor):
        patch, pmask = donor
        target = sg.generate_image(4, 2, 128)
        recipe = sg.SpliceRecipe(72, 55, "o", 0.95, 10, 0, 1.5, 1.1, 1.5)
        composite, mask, background = sg.compose_splice(patch, pmask, target, recipe, seed=1)
        expected = decode_pixels(parse_coefficients(encode(target, 72)))
        np.testing.assert_array_equal(background, expected)
        outside = mask == 0
        np.testing.assert_array_equal(composite[outside], expected[outside])
        assert not np.array_equal(composite[~outside], expected[~outside])

    def test_paste_out_of_bounds(self):
        with pytest.raises(sg.PasteOutOfBounds):
            sg.paste(np.zeros((10, 10, 3), np.uint8), np.zeros((5, 5, 3)),
                     np.ones((5, 5), bool), (7, 0))

    def test_object_too_large(self):
        big = np.full((200, 200, 3), 90, np.uint8)
        with pytest.raises(sg.PasteOutOfBounds):
            sg.compose_splice(big, np.ones((200, 200), bool), sg.generate_image(0, 0, 64),
                              sg.SpliceRecipe(50, 50))

    def test_recipe_ranges(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            r = sg.sample_recipe(rng)
            assert 30 <= r.qf1 <= 95 and 30 <= r.qf2 <= 95
            assert 0.85 <= r.scale <= 1.0 and 0 <= r.rotation_deg < 180
            assert 1.5 <= r.contrast <= 1.85 and 1.1 <= r.brightness <= 1.4
            assert 1.5 <= r.sharpness <= 2.0 and r.flip in (0, 1)

    def test_recipe_validate(self):
        with pytest.raises(sg.RangeError):
            sg.SpliceRecipe(20, 50).validate()


@pytest.fixture(scope="module")
def ds(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    sg.gen_dataset(10, 7, out, size=96, workers=1)
    return out


class TestDataset:
    def test_layout(self, ds):
        rows = sg.read_manifest(ds / "manifest.csv")
        assert len(rows) == 20
        assert sum(r["label"] == "spliced" for r in rows) == 10
        with open(ds / "manifest.csv", newline="") as fh:
            header = next(csv.reader(fh))
        assert header[:10] == ["name", "first compression", "second compression",
                               "object name", "scale", "rotation", "flip", "contrast",
                               "brightness", "sharpness"]
        assert len(list((ds / "masks").iterdir())) == 10

    def test_rows_and_masks(self, ds):
        for r in sg.read_manifest(ds / "manifest.csv"):
            data = (ds / r["name"]).read_bytes()
            coef = parse_coefficients(data)
            if r["label"] == "original":
                assert r["second compression"] == "" and r["mask_path"] == ""
                q = int(r["first compression"])
            else:
                assert all(r[k] != "" for k in sg.MANIFEST_FIELDS)
                q = int(r["second compression"])
                mask = imageops.read_png_gray(ds / r["mask_path"])
                frac = sg.validate_mask(mask, (coef.height, coef.width))
                assert 0.01 <= frac <= 0.40
            np.testing.assert_array_equal(coef.quant_table(0), quality_to_tables(q)[0])

    def test_deterministic(self, ds, tmp_path):
        sg.gen_dataset(10, 7, tmp_path, size=96, workers=1)
        for path in sorted(ds.rglob("*")):
            if path.is_file():
                assert (tmp_path / path.relative_to(ds)).read_bytes() == path.read_bytes()

    def test_worker_count_independent(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        sg.gen_dataset(4, 3, a, size=64, workers=1)
        sg.gen_dataset(4, 3, b, size=64, workers=2)
        assert (a / "manifest.csv").read_bytes() == (b / "manifest.csv").read_bytes()
        assert (a / "spliced/s00003_spliced.jpg").read_bytes() == \
            (b / "spliced/s00003_spliced.jpg").read_bytes()

    def test_corpus_directory(self, tmp_path):
        src = tmp_path / "src"
        (src / "masks").mkdir(parents=True)
        for i in range(3):
            img = sg.generate_image(9, i, 96)
            if i == 0:
                (src / "a.jpg").write_bytes(pil_jpeg(img, 90))
            else:
                sg.write_ppm(src / f"b{i}.ppm", img)
        m = np.zeros((96, 96), np.uint8)
        m[30:60, 20:70] = 255
        imageops.write_png_gray(src / "masks" / "b1.png", m)
        rows = sg.gen_dataset(3, 1, tmp_path / "out", corpus_dir=src, workers=1)
        assert len(rows) == 6
        with pytest.raises(sg.InsufficientCorpus):
            sg.gen_dataset(4, 1, tmp_path / "out2", corpus_dir=src, workers=1)

    def test_count_zero(self, tmp_path):
        with pytest.raises(ValueError):
            sg.gen_dataset(0, 1, tmp_path)


def test_png_round_trip(tmp_path, rng):
    m = (rng.random((17, 23)) > 0.5).astype(np.uint8) * 255
    imageops.write_png_gray(tmp_path / "m.png", m)
    np.testing.assert_array_equal(imageops.read_png_gray(tmp_path / "m.png"), m)


def test_png_readable_by_reference(tmp_path, rng):
    from PIL import Image
    m = rng.integers(0, 256, (9, 14), dtype=np.uint8)
    imageops.write_png_gray(tmp_path / "m.png", m)
    np.testing.assert_array_equal(np.asarray(Image.open(tmp_path / "m.png")), m)
