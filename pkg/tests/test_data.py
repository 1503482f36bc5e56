import numpy as np
import pytest

from platerec import data
from platerec.data import (
    ReviewRecord, SynthConfig, apply_transform, augment_minority,
    generate_synthetic, label_from_stars, load_feature_file, load_manifest,
    make_train_val, read_ppm, resize_image, save_feature_file, save_manifest,
    split_dataset, three_way_split, write_ppm,
)


def review(rid, user, rest, stars, n_images=1):
    return ReviewRecord(
        review_id=rid, user_id=user, restaurant_id=rest, stars=stars,
        image_paths=[f"{rid}_{i}.ppm" for i in range(n_images)],
    )


# ---------------------------------------------------------------------------
# Labels and manifest IO
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("stars,label", [(1, 0), (2, 0), (3, 0), (4, 1), (5, 1)])
def test_label_from_stars(stars, label):
    assert label_from_stars(stars) == label


def test_label_out_of_range():
    with pytest.raises(ValueError):
        label_from_stars(6)


class TestManifest:

    def test_empty_file(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text("")
        assert load_manifest(p) == []

    def test_round_trip(self, tmp_path):
        recs = [review("r1", "u1", "x", 5, 2), review("r2", "u2", "y", 1)]
        recs[0].timestamp = 123
        p = tmp_path / "m.jsonl"
        save_manifest(recs, p)
        assert load_manifest(p) == recs

    def test_stars_out_of_range(self, tmp_path):
        p = tmp_path / "m.jsonl"
        save_manifest([review("r1", "u1", "x", 5)], p)
        p.write_text(p.read_text().replace('"stars": 5', '"stars": 6'))
        with pytest.raises(ValueError, match="stars"):
            load_manifest(p)

    def test_malformed_line_reports_line_number(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text('{"review_id": "r1"\n')
        with pytest.raises(ValueError, match=":1:"):
            load_manifest(p)

    def test_duplicate_review_id(self, tmp_path):
        p = tmp_path / "m.jsonl"
        save_manifest([review("r1", "u1", "x", 5), review("r1", "u2", "y", 1)], p)
        with pytest.raises(ValueError, match="duplicate"):
            load_manifest(p)


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def partition_of_review(split, rec):
    parts = {r.partition for r in split.rows if r.image_path in rec.image_paths}
    assert len(parts) == 1, "images of one review must share a partition"
    return parts.pop()


class TestSplit:

    def test_duplicate_pair_goes_to_train(self):
        revs = [review("a1", "A", "X", 5), review("a2", "A", "X", 2),
                review("b1", "B", "Y", 4), review("b2", "B", "Z", 4)]
        split = split_dataset(revs, seed=0)
        assert partition_of_review(split, revs[0]) == "train"
        assert partition_of_review(split, revs[1]) == "train"

    def test_single_review_user_goes_to_train(self):
        revs = [review("b1", "B", "Y", 4),
                review("c1", "C", "Y", 4), review("c2", "C", "Z", 4)]
        split = split_dataset(revs, seed=0)
        assert partition_of_review(split, revs[0]) == "train"

    def test_restaurant_coverage_pulls_back_to_train(self):
        # user C: two positives (X, Y) and one negative (Z); Z is seen by
        # nobody else, so its held-out review must return to train.
        revs = [review("c1", "C", "X", 5), review("c2", "C", "Y", 4),
                review("c3", "C", "Z", 1),
                # duplicate pairs keep X and Y covered in train
                review("e1", "E", "X", 4), review("e2", "E", "X", 2),
                review("f1", "F", "Y", 4), review("f2", "F", "Y", 2)]
        split = split_dataset(revs, seed=0)
        assert partition_of_review(split, revs[2]) == "train"
        c_test = [r for r in split.rows
                  if r.user_id == "C" and r.partition == "test"]
        assert len(c_test) == 1

    def test_empty_input(self):
        with pytest.raises(ValueError):
            split_dataset([], seed=0)

    def test_stable_under_manifest_reordering(self):
        rng = np.random.default_rng(5)
        revs = [review(f"r{i}", f"u{i % 7}", f"x{i % 4}", int(rng.integers(1, 6)))
                for i in range(30)]
        a = split_dataset(revs, seed=3)
        b = split_dataset(list(reversed(revs)), seed=3)
        assert {(r.image_path, r.partition) for r in a.rows} == \
               {(r.image_path, r.partition) for r in b.rows}


def check_invariants(split, held="test"):
    """Brute-force set verification of the split guarantees."""
    parts = {}
    for r in split.rows:
        assert r.image_path not in parts, "image assigned twice"
        parts[r.image_path] = r
    train_users = {r.user_id for r in split.rows if r.partition == "train"}
    train_rests = {r.restaurant_id for r in split.rows if r.partition == "train"}
    for r in split.rows:
        if r.partition == held:
            assert r.user_id in train_users
            assert r.restaurant_id in train_rests


def random_manifest(rng, n_users=8, n_rests=5, max_reviews=4):
    revs = []
    rid = 0
    for u in range(n_users):
        for _ in range(int(rng.integers(1, max_reviews + 1))):
            revs.append(review(
                f"r{rid}", f"u{u}", f"x{rng.integers(n_rests)}",
                int(rng.integers(1, 6)), n_images=int(rng.integers(1, 3)),
            ))
            rid += 1
    return revs


class TestSplitInvariants:

    @pytest.mark.parametrize("seed", range(30))
    def test_two_way(self, seed):
        revs = random_manifest(np.random.default_rng(seed))
        split = split_dataset(revs, seed=seed)
        check_invariants(split)
        n_images = sum(len(r.image_paths) for r in revs)
        assert len(split.rows) == n_images  # coverage

    @pytest.mark.parametrize("seed", range(15))
    def test_three_way(self, seed):
        revs = random_manifest(np.random.default_rng(seed + 1000))
        split = three_way_split(revs, seed=seed)
        check_invariants(split, held="test")
        # validation plays the role of the held-out set wrt train
        train_users = {r.user_id for r in split.rows if r.partition == "train"}
        train_rests = {r.restaurant_id for r in split.rows if r.partition == "train"}
        for r in split.rows:
            if r.partition == "validation":
                assert r.user_id in train_users
                assert r.restaurant_id in train_rests

    def test_duplicated_pairs_entirely_in_train(self):
        rng = np.random.default_rng(77)
        revs = random_manifest(rng)
        split = three_way_split(revs, seed=2)
        pair_count = {}
        for rec in revs:
            key = (rec.user_id, rec.restaurant_id)
            pair_count[key] = pair_count.get(key, 0) + 1
        for rec in revs:
            if pair_count[(rec.user_id, rec.restaurant_id)] >= 2:
                assert partition_of_review(split, rec) == "train"


def test_split_file_round_trip(tmp_path):
    revs = random_manifest(np.random.default_rng(9))
    split = three_way_split(revs, seed=1)
    path = tmp_path / "split.jsonl"
    data.save_split(split, path)
    loaded = data.load_split(path)
    assert loaded.rows == split.rows
    assert loaded.user_index == split.user_index


# ---------------------------------------------------------------------------
# Transforms and augmentation
# ---------------------------------------------------------------------------

class TestTransforms:

    def test_flip_is_involution(self):
        img = np.random.default_rng(0).random((8, 6, 3)).astype(np.float32)
        assert np.array_equal(apply_transform(apply_transform(img, "flip_x"), "flip_x"), img)

    def test_flip_reverses_x(self):
        img = np.arange(12, dtype=np.float32).reshape(2, 2, 3)
        out = apply_transform(img, "flip_x")
        assert np.array_equal(out[:, 0, :], img[:, 1, :])
        assert np.array_equal(out[:, 1, :], img[:, 0, :])

    def test_translate_moves_lit_pixel(self):
        img = np.zeros((16, 16, 3), dtype=np.float32)
        img[2, 3, :] = 1.0
        out = apply_transform(img, "translate_5_5")
        assert out[7, 8, 0] == 1.0
        assert out.sum() == pytest.approx(3.0)

    @pytest.mark.parametrize("kind", data.TRANSFORM_KINDS)
    def test_size_preserved(self, kind):
        img = np.random.default_rng(1).random((12, 20, 3)).astype(np.float32)
        assert apply_transform(img, kind).shape == img.shape

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            apply_transform(np.zeros((4, 4, 3), dtype=np.float32), "shear")

    def test_rescale_zooms_in(self):
        # a center-bright image keeps its center; the border is pushed out
        img = np.zeros((16, 16, 3), dtype=np.float32)
        img[6:10, 6:10, :] = 1.0
        out = apply_transform(img, "rescale_125")
        assert out[8, 8, 0] == pytest.approx(1.0)
        assert out.sum() > img.sum()  # the bright square grew


class TestAugmentMinority:

    def make_triads(self, n_pos, n_neg):
        triads = [data.TriadExample(0, 0, f"p{i}", 1) for i in range(n_pos)]
        triads += [data.TriadExample(0, 0, f"n{i}", 0) for i in range(n_neg)]
        return triads

    def test_minority_quintupled_majority_untouched(self):
        aug = augment_minority(self.make_triads(20, 4))
        assert sum(t.label == 0 for t in aug) == 20
        assert sum(t.label == 1 for t in aug) == 20

    def test_origins_recorded(self):
        aug = augment_minority(self.make_triads(6, 1))
        origins = sorted(t.origin for t in aug if t.label == 0)
        assert origins == ["flipped", "original", "rescaled", "rotated", "translated"]

    def test_balanced_input_quintuples_smaller_class(self):
        aug = augment_minority(self.make_triads(3, 3))
        assert sum(t.label == 0 for t in aug) == 15
        assert sum(t.label == 1 for t in aug) == 3


# ---------------------------------------------------------------------------
# PPM and resize
# ---------------------------------------------------------------------------

class TestPpm:

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        img = (rng.integers(0, 256, (9, 7, 3)) / 255.0).astype(np.float32)
        p = tmp_path / "img.ppm"
        write_ppm(img, p)
        assert np.allclose(read_ppm(p), img)

    def test_white_pixel_bytes(self, tmp_path):
        p = tmp_path / "w.ppm"
        write_ppm(np.ones((1, 1, 3), dtype=np.float32), p)
        assert p.read_bytes() == b"P6\n1 1\n255\n\xff\xff\xff"

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "t.ppm"
        p.write_bytes(b"P6\n2 2\n255\n\x00\x00\x00")
        with pytest.raises(ValueError, match="truncated"):
            read_ppm(p)

    def test_wrong_magic(self, tmp_path):
        p = tmp_path / "b.ppm"
        p.write_bytes(b"P5\n1 1\n255\n\x00")
        with pytest.raises(ValueError, match="P6"):
            read_ppm(p)

    def test_wrong_maxval(self, tmp_path):
        p = tmp_path / "m.ppm"
        p.write_bytes(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00")
        with pytest.raises(ValueError, match="maxval"):
            read_ppm(p)


class TestResize:

    def test_identity_at_same_size(self):
        img = np.random.default_rng(2).random((10, 10, 3)).astype(np.float32)
        assert np.allclose(resize_image(img, 10, 10), img, atol=1e-6)

    def test_constant_stays_constant(self):
        img = np.full((8, 8, 3), 0.4, dtype=np.float32)
        assert np.allclose(resize_image(img, 19, 5), 0.4, atol=1e-6)

    def test_checkerboard_interpolation(self):
        img = np.zeros((2, 2, 3), dtype=np.float32)
        img[0, 1] = img[1, 0] = 1.0
        out = resize_image(img, 4, 4)
        # independent hand oracle: source coords (i+0.5)/2 - 0.5, clipped
        coords = np.clip((np.arange(4) + 0.5) * 2 / 4 - 0.5, 0, 1)
        expected = np.empty((4, 4))
        for yi, y in enumerate(coords):
            for xi, x in enumerate(coords):
                y0, x0 = int(np.floor(y)), int(np.floor(x))
                y1, x1 = min(y0 + 1, 1), min(x0 + 1, 1)
                fy, fx = y - y0, x - x0
                expected[yi, xi] = (
                    img[y0, x0, 0] * (1 - fy) * (1 - fx)
                    + img[y0, x1, 0] * (1 - fy) * fx
                    + img[y1, x0, 0] * fy * (1 - fx)
                    + img[y1, x1, 0] * fy * fx
                )
        assert np.allclose(out[:, :, 0], expected, atol=1e-6)

    def test_zero_target_rejected(self):
        with pytest.raises(ValueError):
            resize_image(np.zeros((4, 4, 3)), 0, 4)


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

class TestSynthetic:

    def test_realized_ratio_near_target(self, tmp_path):
        config = SynthConfig(n_users=200, n_restaurants=12, target_ratio=6.0, seed=3)
        _, records = generate_synthetic(config, tmp_path)
        pos = sum(len(r.image_paths) for r in records if label_from_stars(r.stars) == 1)
        neg = sum(len(r.image_paths) for r in records if label_from_stars(r.stars) == 0)
        assert 5.4 <= pos / neg <= 6.6

    def test_zero_signal_brightness_independent_of_label(self, tmp_path):
        config = SynthConfig(n_users=400, n_restaurants=16, signal_strength=0.0,
                             images_per_review=(1, 1), image_size=16, seed=9)
        _, records = generate_synthetic(config, tmp_path)
        means, labels = [], []
        for rec in records:
            for p in rec.image_paths:
                means.append(read_ppm(tmp_path / p).mean())
                labels.append(label_from_stars(rec.stars))
        rho = np.corrcoef(means, labels)[0, 1]
        assert abs(rho) < 0.05

    def test_deterministic_bytes(self, tmp_path):
        config = SynthConfig(n_users=10, n_restaurants=4, seed=5)
        d1, d2 = tmp_path / "a", tmp_path / "b"
        m1, _ = generate_synthetic(config, d1)
        m2, _ = generate_synthetic(config, d2)
        assert m1.read_bytes() == m2.read_bytes()
        for p in sorted((d1 / "images").iterdir()):
            assert p.read_bytes() == (d2 / "images" / p.name).read_bytes()

    def test_invalid_ratio(self):
        with pytest.raises(ValueError):
            SynthConfig(target_ratio=0.0)


# ---------------------------------------------------------------------------
# Feature files
# ---------------------------------------------------------------------------

class TestFeatureFile:

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        feats = {f"img{i}.ppm": rng.standard_normal(48).astype(np.float32)
                 for i in range(3)}
        p = tmp_path / "features.txt"
        save_feature_file(feats, p)
        loaded = load_feature_file(p)
        assert set(loaded) == set(feats)
        for k in feats:
            assert np.array_equal(loaded[k], feats[k])

    def test_header_declares_length(self, tmp_path):
        p = tmp_path / "f.txt"
        save_feature_file({"a.ppm": np.zeros(5, dtype=np.float32)}, p)
        assert p.read_text().splitlines()[0] == "5"

    def test_mixed_lengths_rejected_on_save(self, tmp_path):
        with pytest.raises(ValueError):
            save_feature_file({"a": np.zeros(3), "b": np.zeros(4)}, tmp_path / "f.txt")

    def test_mixed_lengths_rejected_on_load(self, tmp_path):
        p = tmp_path / "f.txt"
        p.write_text("3\na 1 2 3\nb 1 2\n")
        with pytest.raises(ValueError, match="expected 3"):
            load_feature_file(p)
