import datetime as dt
import warnings
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cephaloscope.data import (
    AugmentParams,
    DataError,
    Gender,
    ImageBuffer,
    Manifest,
    Orientation,
    Part,
    SampleRecord,
    SplitSpec,
    SyntheticSpec,
    ablation_label,
    apply_augment,
    augment,
    bilinear_resize,
    compute_age,
    crop_regions,
    largest_remainder,
    measure_radius,
    normalize,
    pad_and_resize,
    parse_parts,
    partition_boxes,
    read_manifest,
    read_pgm,
    render,
    stratified_split,
    synth_generate,
    write_manifest,
    write_pgm,
)
from cephaloscope.data.regions import region_mask
from oracles import formula_boxes


def record(i, age, gender=0, orientation="left"):
    return SampleRecord(f"{int(age)}/s{i:04d}.pgm", age, gender, orientation)


def random_manifest(rng, n):
    ages = rng.integers(400, 4001, size=n) / 100.0
    return Manifest([record(i, float(a), int(rng.integers(0, 2))) for i, a in enumerate(ages)])


class TestAge:
    def test_same_day(self):
        assert compute_age(dt.date(2001, 5, 5), dt.date(2001, 5, 5)) == 0.0

    def test_exact_decade(self):
        birth = dt.datetime(2000, 1, 1)
        assert compute_age(birth, birth + dt.timedelta(days=3652.5)) == 10.0

    def test_day_count_example(self):
        days = dt.date(2020, 6, 1).toordinal() - dt.date(2000, 1, 1).toordinal()
        assert days == 7457
        assert compute_age(dt.date(2000, 1, 1), dt.date(2020, 6, 1)) == 20.42

    def test_photo_before_birth(self):
        with pytest.raises(DataError):
            compute_age(dt.date(2010, 1, 2), dt.date(2010, 1, 1))


class TestRecords:
    def test_two_decimals_required(self):
        with pytest.raises(DataError):
            SampleRecord("a.pgm", 12.345, 0)

    def test_admissible_range(self):
        SampleRecord("a.pgm", 4.0, 0)
        SampleRecord("a.pgm", 40.0, 1)
        with pytest.raises(DataError):
            SampleRecord("a.pgm", 3.99, 0)
        with pytest.raises(DataError):
            SampleRecord("a.pgm", 40.01, 0)

    def test_manifest_roundtrip(self, tmp_path, rng):
        m = random_manifest(rng, 40)
        write_manifest(m, tmp_path / "m.csv")
        text = (tmp_path / "m.csv").read_text().splitlines()
        assert text[0] == "path,age,gender,orientation"
        assert all(len(line.split(",")[1].split(".")[1]) == 2 for line in text[1:])
        assert read_manifest(tmp_path / "m.csv") == m

    def test_manifest_gender_words(self, tmp_path):
        (tmp_path / "m.csv").write_text("path,age,gender,orientation\na.pgm,5.10,female,right\n")
        (rec,) = read_manifest(tmp_path / "m.csv")
        assert rec.gender is Gender.FEMALE and rec.orientation is Orientation.RIGHT

    def test_manifest_bad_header(self, tmp_path):
        (tmp_path / "m.csv").write_text("file,age\n")
        with pytest.raises(DataError):
            read_manifest(tmp_path / "m.csv")


class TestPreprocessing:
    def test_normalize(self):
        assert normalize(0, 16) == 0.0
        assert normalize(65535, 16) == 1.0
        assert round(float(normalize(32768, 16)), 8) == 0.50000763
        assert normalize(255, 8) == 1.0

    def test_square_input_is_pure_resize(self, rng):
        px = rng.random((10, 10))
        np.testing.assert_array_equal(pad_and_resize(ImageBuffer(px), 10).pixels, px)
        np.testing.assert_array_equal(pad_and_resize(ImageBuffer(px), 7).pixels, bilinear_resize(px, (7, 7)))

    def test_tall_image_gets_side_columns(self, rng):
        px = rng.uniform(0.1, 1.0, size=(200, 100))
        out = pad_and_resize(ImageBuffer(px), 200).pixels
        assert out.shape == (200, 200)
        assert not out[:, :50].any() and not out[:, 150:].any()
        np.testing.assert_array_equal(out[:, 50:150], px)

    def test_constant_stays_constant(self):
        out = pad_and_resize(ImageBuffer(np.full((30, 30), 0.3)), 17).pixels
        np.testing.assert_allclose(out, 0.3, atol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 32), st.integers(0, 2**31))
    def test_idempotent_and_in_range(self, h, w, target, seed):
        px = np.random.default_rng(seed).random((h, w))
        once = pad_and_resize(ImageBuffer(px), target)
        twice = pad_and_resize(once, target)
        np.testing.assert_array_equal(once.pixels, twice.pixels)
        assert 0.0 <= once.pixels.min() and once.pixels.max() <= 1.0

    def test_bilinear_midpoint(self):
        out = bilinear_resize(np.array([[0.0, 1.0]]), (1, 3))
        np.testing.assert_allclose(out, [[0.0, 0.5, 1.0]])

    def test_image_buffer_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            ImageBuffer(np.array([[1.5]]))


class TestPGM:
    @pytest.mark.parametrize("depth", [8, 16])
    def test_roundtrip(self, tmp_path, rng, depth):
        levels = 2**depth - 1
        px = rng.integers(0, levels + 1, size=(5, 7)) / levels
        write_pgm(tmp_path / "x.pgm", px, depth)
        img = read_pgm(tmp_path / "x.pgm")
        assert img.source_bit_depth == depth
        assert (img.width, img.height) == (7, 5)
        np.testing.assert_allclose(img.pixels, px, atol=1e-15)

    def test_16bit_byte_order(self, tmp_path):
        write_pgm(tmp_path / "x.pgm", np.array([[1.0, 0.0]]), 16)
        data = (tmp_path / "x.pgm").read_bytes()
        assert data.startswith(b"P5\n2 1\n65535\n")
        assert data.endswith(b"\xff\xff\x00\x00")

    def test_comment_in_header(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
        np.testing.assert_array_equal(read_pgm(tmp_path / "c.pgm").pixels, [[0.0, 1.0]])

    def test_rejects_ascii_pgm(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
        with pytest.raises(ValueError):
            read_pgm(tmp_path / "a.pgm")


class TestAugment:
    def test_identity_params(self, rng):
        px = rng.random((12, 9))
        np.testing.assert_array_equal(apply_augment(px, AugmentParams()), px)

    def test_double_flip(self, rng):
        px = rng.random((8, 8))
        flip = AugmentParams(hflip=True)
        np.testing.assert_array_equal(apply_augment(apply_augment(px, flip), flip), px)
        np.testing.assert_array_equal(apply_augment(px, flip), px[:, ::-1])
        np.testing.assert_array_equal(apply_augment(px, AugmentParams(vflip=True)), px[::-1])

    def test_rotated_constant(self):
        out = apply_augment(np.full((16, 16), 0.7), AugmentParams(rotation_deg=9.0, translate=(0.04, -0.03), scale=1.04))
        np.testing.assert_allclose(out, 0.7, atol=1e-12)

    def test_channels_share_transform(self, rng):
        px = rng.random((16, 16))
        p = AugmentParams(hflip=True, rotation_deg=-7.0, scale=0.97)
        both = apply_augment(np.stack([px, px]), p)
        np.testing.assert_array_equal(both[0], both[1])
        np.testing.assert_array_equal(both[0], apply_augment(px, p))

    def test_seeded_and_bounded(self, rng):
        img = ImageBuffer(rng.random((20, 20)))
        a, b = augment(img, 5), augment(img, 5)
        np.testing.assert_array_equal(a.pixels, b.pixels)
        assert a.pixels.min() >= 0.0 and a.pixels.max() <= 1.0

    def test_rotation_keeps_centre(self):
        # a single bright pixel at the centre stays at the centre under rotation
        px = np.zeros((9, 9))
        px[4, 4] = 1.0
        out = apply_augment(px, AugmentParams(rotation_deg=10.0))
        assert np.unravel_index(np.argmax(out), out.shape) == (4, 4)


class TestSplit:
    def test_largest_remainder_examples(self):
        assert largest_remainder(20, (7, 1.5, 1.5)) == [14, 3, 3]
        assert largest_remainder(10, (7, 1.5, 1.5)) == [7, 2, 1]
        assert largest_remainder(0, (7, 1.5, 1.5)) == [0, 0, 0]

    def test_empty(self):
        parts = stratified_split(Manifest())
        assert [len(p) for p in parts] == [0, 0, 0]

    def test_small_stratum_goes_to_train(self):
        m = Manifest([record(0, 5.0), record(1, 5.5)])
        with pytest.warns(UserWarning, match="fewer than 3"):
            tr, va, te = stratified_split(m)
        assert len(tr) == 2 and len(va) == 0 and len(te) == 0

    def test_ratios_must_sum_to_ten(self):
        with pytest.raises(ValueError):
            SplitSpec(ratios=(7, 2, 2))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.integers(0, 300), st.integers(0, 1000))
    def test_partition_and_proportions(self, mseed, n, seed):
        m = random_manifest(np.random.default_rng(mseed), n)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            tr, va, te = stratified_split(m, SplitSpec(seed=seed))
        ids = [r.image_path for part in (tr, va, te) for r in part]
        assert sorted(ids) == sorted(r.image_path for r in m)
        assert len(set(ids)) == len(ids)
        for age, members in m.strata().items():
            k = len(members)
            got = [sum(r.age_stratum == age for r in part) for part in (tr, va, te)]
            if k < 3:
                assert got == [k, 0, 0]
                continue
            for g, share in zip(got, (0.7, 0.15, 0.15)):
                assert abs(g - share * k) <= 1

    @pytest.mark.filterwarnings("ignore:age strata")
    def test_seed_changes_assignment(self, rng):
        m = random_manifest(rng, 200)
        a = stratified_split(m, SplitSpec(seed=1))[0]
        b = stratified_split(m, SplitSpec(seed=2))[0]
        assert a != b
        assert stratified_split(m, SplitSpec(seed=1))[0] == a


class TestRegions:
    def test_worked_example_left(self):
        boxes = partition_boxes(900, 600, "left")
        assert (boxes[Part.A].upper_left, boxes[Part.A].lower_right) == ((0, 200), (700, 600))
        assert (boxes[Part.B].upper_left, boxes[Part.B].lower_right) == ((0, 0), (900, 400))
        assert (boxes[Part.C].upper_left, boxes[Part.C].lower_right) == ((500, 200), (900, 600))

    def test_worked_example_right(self):
        a = partition_boxes(900, 600, "right")[Part.A]
        assert (a.upper_left, a.lower_right) == ((200, 200), (900, 600))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 3000), st.integers(1, 3000), st.sampled_from(["left", "right"]))
    def test_matches_formula_oracle(self, w, h, orient):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            boxes = partition_boxes(w, h, orient)
        want = formula_boxes(w, h, orient)
        for part in Part:
            b = boxes[part]
            assert (b.x1, b.y1, b.x2, b.y2) == want[part.value]
            assert 0 <= b.x1 <= b.x2 <= w and 0 <= b.y1 <= b.y2 <= h

    def test_small_image_warns_and_stays_in_bounds(self):
        with pytest.warns(UserWarning, match="clamped"):
            boxes = partition_boxes(150, 150)
        for b in boxes.values():
            assert 0 <= b.x1 < b.x2 <= 150 and 0 <= b.y1 < b.y2 <= 150

    def test_large_image_no_warning(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            partition_boxes(2304, 1536)

    @pytest.mark.parametrize("w,h", [(900, 600), (2304, 1536), (641, 433), (300, 300)])
    def test_union_covers_canvas(self, w, h):
        boxes = partition_boxes(w, h)
        assert region_mask(w, h, boxes, "ABC").all()
        px = np.random.default_rng(0).random((h, w))
        np.testing.assert_array_equal(crop_regions(ImageBuffer(px), boxes, "ABC").pixels, px)

    def test_single_part_crop_extent(self, rng):
        img = ImageBuffer(rng.random((600, 900)))
        boxes = partition_boxes(900, 600)
        crop = crop_regions(img, boxes, [Part.C])
        assert (crop.width, crop.height) == (boxes[Part.C].width, boxes[Part.C].height)

    def test_pair_masks_outside(self, rng):
        from cephaloscope.data import RegionBox

        px = rng.uniform(0.5, 1.0, size=(10, 10))
        boxes = {Part.A: RegionBox(Part.A, 0, 0, 3, 3), Part.B: RegionBox(Part.B, 6, 6, 10, 10)}
        out = crop_regions(ImageBuffer(px), boxes, [Part.A, Part.B]).pixels
        inside = np.zeros((10, 10), bool)
        inside[:3, :3] = inside[6:, 6:] = True
        assert not out[~inside].any()
        np.testing.assert_array_equal(out[inside], px[inside])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(50, 400), st.integers(50, 400), st.sampled_from(["A", "B", "C", "A+B", "B+C", "A+C"]))
    def test_mirror_coherence(self, w, h, sel):
        left = np.random.default_rng(w * 1000 + h).random((h, w))
        right = left[:, ::-1]
        parts = parse_parts(sel)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            got = crop_regions(ImageBuffer(right), partition_boxes(w, h, "right"), parts).pixels
            ref = crop_regions(ImageBuffer(left), partition_boxes(w, h, "left"), parts).pixels
        np.testing.assert_array_equal(got, ref[:, ::-1])

    def test_labels(self):
        assert ablation_label([Part.B, Part.A]) == "PAR.A+B"
        assert ablation_label("C") == "PAR.C"
        assert parse_parts("a,c") == [Part.A, Part.C]
        with pytest.raises(ValueError):
            parse_parts("A+A")


class TestSynthetic:
    def test_same_cell_same_image_without_noise(self):
        spec = SyntheticSpec(noise=0.0, count_per_cell=1, ages=(10, 10))
        a = render(spec, 10.5, Gender.MALE)
        b = render(spec, 10.5, Gender.MALE)
        np.testing.assert_array_equal(a, b)
        _, imgs1 = synth_generate(spec)
        _, imgs2 = synth_generate(spec)
        for x, y in zip(imgs1, imgs2):
            np.testing.assert_array_equal(x, y)

    @pytest.mark.parametrize("age", [4.0, 9.37, 17.5, 25.0, 33.21, 40.0])
    def test_radius_readback(self, age):
        spec = SyntheticSpec(noise=0.0, size=64)
        for gender in Gender:
            img = render(spec, age, gender)
            assert abs(measure_radius(img, spec) - spec.disc_radius(age)) <= 1.0
        mirrored = render(spec, age, Gender.MALE, Orientation.RIGHT)
        assert abs(measure_radius(mirrored, spec, Orientation.RIGHT) - spec.disc_radius(age)) <= 1.0

    def test_age_histogram_matches_counts(self):
        spec = SyntheticSpec(count_per_cell=3, ages=(4, 9), seed=2)
        m, imgs = synth_generate(spec)
        hist = Counter((int(r.age), r.gender) for r in m)
        assert hist == Counter({c: 3 for c in spec.cells()})
        assert len(imgs) == len(m) == 36

    def test_total_spread(self):
        spec = SyntheticSpec(total=600)
        counts = spec.cell_counts()
        assert sum(counts.values()) == 600
        assert max(counts.values()) - min(counts.values()) <= 1

    def test_writes_tree(self, tmp_path):
        spec = SyntheticSpec(count_per_cell=1, ages=(4, 5), size=16)
        m, imgs = synth_generate(spec, tmp_path)
        assert read_manifest(tmp_path / "manifest.csv") == m
        for rec, img in zip(m, imgs):
            assert rec.image_path.startswith(f"{int(rec.age)}/")
            np.testing.assert_allclose(read_pgm(tmp_path / rec.image_path).pixels, img, atol=1 / 65535)

    def test_pixels_in_range(self):
        _, imgs = synth_generate(SyntheticSpec(count_per_cell=1, noise=0.3))
        assert all(i.min() >= 0.0 and i.max() <= 1.0 for i in imgs)

    def test_invalid_size(self):
        with pytest.raises(ValueError):
            SyntheticSpec(size=4)

    @pytest.mark.parametrize("level", [-0.1, 0.24, 0.5])
    def test_canvas_texture_must_stay_below_disc(self, level):
        with pytest.raises(ValueError):
            SyntheticSpec(canvas_texture=level)

    def test_without_canvas_texture_gender_lives_in_disc(self):
        spec = SyntheticSpec(noise=0.0, canvas_texture=0.0)
        m = render(spec, 20.0, Gender.MALE)
        f = render(spec, 20.0, Gender.FEMALE)
        x1, y1, x2, y2 = spec.disc_bbox(20.0)
        diff = m != f
        assert diff.any()
        ys, xs = np.nonzero(diff)
        assert xs.min() >= x1 and xs.max() <= x2 and ys.min() >= y1 and ys.max() <= y2

    def test_age_changes_only_the_disc(self):
        spec = SyntheticSpec(noise=0.0)
        young = render(spec, 10.0, Gender.FEMALE)
        old = render(spec, 30.0, Gender.FEMALE)
        x1, y1, x2, y2 = spec.disc_bbox(30.0)
        ys, xs = np.nonzero(young != old)
        assert xs.max() <= x2 and ys.max() <= y2

    @pytest.mark.parametrize("gender", [Gender.MALE, Gender.FEMALE])
    def test_canvas_stripe_frequency(self, gender):
        spec = SyntheticSpec(noise=0.0)
        row = render(spec, 4.0, gender)[-1]  # bottom row never meets the disc
        assert set(np.unique(row)) == {0.0, spec.canvas_texture}
        rising = np.count_nonzero(np.diff((row > 0).astype(int)) == 1) + (row[0] > 0)
        assert rising == spec.texture_cycles[int(gender)]
