"""Review manifests, image IO, label derivation, dataset splitting and augmentation.

The split procedure assigns every image of every review to exactly one
partition while guaranteeing that (a) every user and restaurant seen in the
held-out partition also appears in train and (b) repeated (user, restaurant)
pairs land entirely in train. Minority-class augmentation enlarges only the
smaller class with four fixed image transforms.

Images are held in memory as H x W x 3 float32 arrays in [0, 1] and stored
on disk as binary PPM (P6, maxval 255).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .nn import derive_seed, make_rng

TRANSFORM_KINDS = ("rotate_m30", "flip_x", "rescale_125", "translate_5_5")

ORIGIN_OF_KIND = {
    "rotate_m30": "rotated",
    "flip_x": "flipped",
    "rescale_125": "rescaled",
    "translate_5_5": "translated",
}

PARTITIONS = ("train", "validation", "test")


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

@dataclass
class ReviewRecord:
    review_id: str
    user_id: str
    restaurant_id: str
    stars: int
    image_paths: list[str]
    timestamp: int | None = None


@dataclass
class TriadExample:
    user_index: int
    restaurant_index: int
    image_ref: str
    label: int
    origin: str = "original"


@dataclass
class SplitRow:
    image_path: str
    user_id: str
    restaurant_id: str
    label: int
    origin: str
    partition: str


@dataclass
class SplitAssignment:
    rows: list[SplitRow]
    user_index: dict[str, int]
    restaurant_index: dict[str, int]
    review_partition: dict[str, str] | None = None  # review_id -> partition, when known

    def rows_in(self, partition):
        return [r for r in self.rows if r.partition == partition]

    def triads(self, partition) -> list[TriadExample]:
        return [
            TriadExample(
                user_index=self.user_index[r.user_id],
                restaurant_index=self.restaurant_index[r.restaurant_id],
                image_ref=r.image_path,
                label=r.label,
                origin=r.origin,
            )
            for r in self.rows_in(partition)
        ]


def label_from_stars(stars: int) -> int:
    """Stars 1-3 mean dislike (0), 4-5 mean like (1)."""
    if not 1 <= stars <= 5:
        raise ValueError(f"stars must be in [1, 5], got {stars}")
    return 1 if stars >= 4 else 0


# ---------------------------------------------------------------------------
# Manifest IO (one JSON object per line)
# ---------------------------------------------------------------------------

def load_manifest(path) -> list[ReviewRecord]:
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed manifest line: {exc}") from exc
            try:
                rec = ReviewRecord(
                    review_id=obj["review_id"],
                    user_id=obj["user_id"],
                    restaurant_id=obj["restaurant_id"],
                    stars=int(obj["stars"]),
                    image_paths=list(obj["images"]),
                    timestamp=obj.get("timestamp"),
                )
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing field {exc}") from exc
            if not 1 <= rec.stars <= 5:
                raise ValueError(f"{path}:{lineno}: stars must be in [1, 5], got {rec.stars}")
            if not rec.image_paths:
                raise ValueError(f"{path}:{lineno}: review has no images")
            if rec.review_id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate review_id {rec.review_id!r}")
            seen.add(rec.review_id)
            records.append(rec)
    return records


def save_manifest(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {
                "review_id": rec.review_id,
                "user_id": rec.user_id,
                "restaurant_id": rec.restaurant_id,
                "stars": rec.stars,
                "images": rec.image_paths,
            }
            if rec.timestamp is not None:
                obj["timestamp"] = rec.timestamp
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def _index_map(ids):
    return {v: i for i, v in enumerate(sorted(set(ids)))}


def _split_reviews(reviews, seed):
    """Partition reviews into (train_ids, held_out_ids) per the three rules.

    Per user: (1) reviews repeating a (user, restaurant) pair all go to
    train; (2) the rest are grouped by label and each group donates one
    seeded-random review to the held-out set, provided the user keeps at
    least one train review; (3) held-out reviews whose restaurant never
    occurs in train are pulled back into train.
    """
    by_user: dict[str, list[ReviewRecord]] = {}
    for rec in reviews:
        by_user.setdefault(rec.user_id, []).append(rec)

    train, held = [], []
    for user_id in sorted(by_user):
        revs = sorted(by_user[user_id], key=lambda r: r.review_id)
        rest_count: dict[str, int] = {}
        for r in revs:
            rest_count[r.restaurant_id] = rest_count.get(r.restaurant_id, 0) + 1
        dup = [r for r in revs if rest_count[r.restaurant_id] >= 2]
        unique = [r for r in revs if rest_count[r.restaurant_id] == 1]
        train.extend(dup)
        n_train_user = len(dup)
        if len(revs) == 1:
            train.extend(unique)
            continue
        for label in (0, 1):
            group = [r for r in unique if label_from_stars(r.stars) == label]
            if not group:
                continue
            if len(group) == 1:
                # a lone review may be held out only if the user keeps train coverage
                if n_train_user >= 1:
                    held.extend(group)
                else:
                    train.extend(group)
                    n_train_user += 1
                continue
            rng = make_rng(seed, f"split:{user_id}:{label}")
            pick = int(rng.integers(len(group)))
            held.append(group[pick])
            rest = [r for i, r in enumerate(group) if i != pick]
            train.extend(rest)
            n_train_user += len(rest)

    train_restaurants = {r.restaurant_id for r in train}
    moved = [r for r in held if r.restaurant_id not in train_restaurants]
    held = [r for r in held if r.restaurant_id in train_restaurants]
    train.extend(moved)
    return {r.review_id for r in train}, {r.review_id for r in held}


def _rows_for(reviews, partition_of_review):
    rows = []
    for rec in reviews:
        part = partition_of_review[rec.review_id]
        label = label_from_stars(rec.stars)
        for img in rec.image_paths:
            rows.append(SplitRow(img, rec.user_id, rec.restaurant_id, label, "original", part))
    return rows


def split_dataset(reviews, seed) -> SplitAssignment:
    """Two-way train/test split of a review manifest."""
    if not reviews:
        raise ValueError("cannot split an empty manifest")
    train_ids, test_ids = _split_reviews(reviews, seed)
    part = {rid: "train" for rid in train_ids}
    part.update({rid: "test" for rid in test_ids})
    return SplitAssignment(
        rows=_rows_for(reviews, part),
        user_index=_index_map(r.user_id for r in reviews),
        restaurant_index=_index_map(r.restaurant_id for r in reviews),
        review_partition=part,
    )


def make_train_val(reviews, split: SplitAssignment, seed) -> SplitAssignment:
    """Re-split the train reviews with the same procedure into train/validation."""
    if split.review_partition is None:
        raise ValueError("split carries no review partition map; use split_dataset output")
    train_reviews = [r for r in reviews if split.review_partition.get(r.review_id) == "train"]
    if not train_reviews:
        raise ValueError("train partition is empty, cannot carve a validation set")
    sub_train, sub_val = _split_reviews(train_reviews, derive_seed(seed, "train-val"))
    part = dict(split.review_partition)
    part.update({rid: "train" for rid in sub_train})
    part.update({rid: "validation" for rid in sub_val})
    return SplitAssignment(
        rows=_rows_for(reviews, part),
        user_index=split.user_index,
        restaurant_index=split.restaurant_index,
        review_partition=part,
    )


def three_way_split(reviews, seed) -> SplitAssignment:
    """Train/test split followed by the train/validation re-split."""
    first = split_dataset(reviews, seed)
    return make_train_val(reviews, first, seed)


def save_split(split: SplitAssignment, path):
    with open(path, "w", encoding="utf-8") as fh:
        for row in split.rows:
            fh.write(json.dumps({
                "image_path": row.image_path,
                "user_id": row.user_id,
                "restaurant_id": row.restaurant_id,
                "label": row.label,
                "origin": row.origin,
                "partition": row.partition,
            }, sort_keys=True) + "\n")


def load_split(path) -> SplitAssignment:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                row = SplitRow(obj["image_path"], obj["user_id"], obj["restaurant_id"],
                               int(obj["label"]), obj["origin"], obj["partition"])
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed split line: {exc}") from exc
            if row.partition not in PARTITIONS:
                raise ValueError(f"{path}:{lineno}: unknown partition {row.partition!r}")
            rows.append(row)
    return SplitAssignment(
        rows=rows,
        user_index=_index_map(r.user_id for r in rows),
        restaurant_index=_index_map(r.restaurant_id for r in rows),
    )


# ---------------------------------------------------------------------------
# Image transforms and augmentation
# ---------------------------------------------------------------------------

def apply_transform(image, kind):
    """One of the four fixed size-preserving augmentation transforms."""
    image = np.asarray(image, dtype=np.float32)
    if kind == "flip_x":
        return image[:, ::-1, :].copy()
    if kind == "translate_5_5":
        out = np.zeros_like(image)
        h, w = image.shape[:2]
        if h > 5 and w > 5:
            out[5:, 5:, :] = image[:h - 5, :w - 5, :]
        return out
    if kind == "rotate_m30":
        out = ndimage.rotate(image, angle=-30.0, axes=(1, 0), reshape=False,
                             order=1, mode="constant", cval=0.0)
        return np.clip(out, 0.0, 1.0).astype(np.float32)
    if kind == "rescale_125":
        # zoom in by 1.25 about the image center, output keeps the input size
        s = 1.0 / 1.25
        h, w = image.shape[:2]
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        matrix = np.diag([s, s, 1.0])
        offset = [cy * (1.0 - s), cx * (1.0 - s), 0.0]
        out = ndimage.affine_transform(image, matrix, offset=offset, order=1,
                                       mode="constant", cval=0.0)
        return np.clip(out, 0.0, 1.0).astype(np.float32)
    raise ValueError(f"unknown transform kind {kind!r}")


def augment_minority(triads: list[TriadExample]) -> list[TriadExample]:
    """Original plus all four transforms for every minority-class triad (x5)."""
    counts = {0: 0, 1: 0}
    for t in triads:
        counts[t.label] += 1
    if counts[0] == 0 or counts[1] == 0:
        minority = 0 if counts[0] > 0 else 1
    else:
        minority = 0 if counts[0] <= counts[1] else 1
    out = list(triads)
    for t in triads:
        if t.label != minority or t.origin != "original":
            continue
        for kind in TRANSFORM_KINDS:
            out.append(replace(t, origin=ORIGIN_OF_KIND[kind]))
    return out


# ---------------------------------------------------------------------------
# PPM IO and resizing
# ---------------------------------------------------------------------------

def write_ppm(image, path):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got shape {image.shape}")
    h, w = image.shape[:2]
    u8 = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(u8.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    # header: magic then three whitespace-separated integers, '#' comments allowed
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        try:
            fields.append(int(blob[start:pos]))
        except ValueError as exc:
            raise ValueError(f"{path}: bad PPM header token") from exc
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    payload = blob[pos:pos + 3 * w * h]
    if len(payload) < 3 * w * h:
        raise ValueError(f"{path}: truncated PPM payload")
    u8 = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return (u8.astype(np.float32) / 255.0)


def resize_image(image, height, width):
    """Bilinear resize to height x width (pixel-center alignment)."""
    if height < 1 or width < 1:
        raise ValueError("target dimensions must be positive")
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[:2]
    ys = np.clip((np.arange(height) + 0.5) * h / height - 0.5, 0, h - 1)
    xs = np.clip((np.arange(width) + 0.5) * w / width - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    out = (
        image[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
        + image[np.ix_(y0, x1)] * (1 - fy) * fx
        + image[np.ix_(y1, x0)] * fy * (1 - fx)
        + image[np.ix_(y1, x1)] * fy * fx
    )
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# Synthetic data generation
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    n_users: int = 50
    n_restaurants: int = 10
    reviews_per_user: tuple[int, int] = (2, 4)
    images_per_review: tuple[int, int] = (1, 2)
    target_ratio: float = 6.0
    signal_strength: float = 0.8
    image_size: int = 32
    noise_sigma: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.target_ratio <= 0:
            raise ValueError(f"target ratio must be positive, got {self.target_ratio}")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise ValueError("signal strength must lie in [0, 1]")
        if self.n_users < 1 or self.n_restaurants < 1:
            raise ValueError("need at least one user and one restaurant")


def _restaurant_texture(size, rng):
    grid = rng.random((4, 4, 3)).astype(np.float32)
    tex = resize_image(grid, size, size)
    tex = 0.3 + 0.4 * tex
    return tex - tex.mean() + 0.5  # mean brightness 0.5 so the star shift is the signal


def _brightness_shift(stars):
    return 0.3 * (stars - 3) / 2.0


def generate_synthetic(config: SynthConfig, out_dir):
    """Write a deterministic synthetic manifest plus PPM images under out_dir.

    Each restaurant gets a seeded smooth texture and a latent quality; stars
    come from quality plus noise, thresholded so the realized positive to
    negative image ratio matches the target. Images mix the restaurant
    texture with a brightness shift monotone in stars, scaled by the signal
    strength, plus pixel noise.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    size = config.image_size

    quality = make_rng(config.seed, "quality").random(config.n_restaurants)
    textures = [
        _restaurant_texture(size, make_rng(config.seed, f"texture:{r}"))
        for r in range(config.n_restaurants)
    ]

    # lay out reviews first so star labels can be calibrated globally
    plans = []  # (user, restaurant, latent score, n_images)
    for u in range(config.n_users):
        rng = make_rng(config.seed, f"user:{u}")
        lo, hi = config.reviews_per_user
        for _ in range(int(rng.integers(lo, hi + 1))):
            r = int(rng.integers(config.n_restaurants))
            # review noise dominates restaurant quality so labels are driven
            # by the per-image brightness signal, not memorizable identities
            s = quality[r] + 1.0 * rng.standard_normal()
            lo_i, hi_i = config.images_per_review
            n_img = int(rng.integers(lo_i, hi_i + 1))
            plans.append([u, r, s, n_img])

    total_images = sum(p[3] for p in plans)
    p_pos = config.target_ratio / (1.0 + config.target_ratio)
    order = sorted(range(len(plans)), key=lambda i: (plans[i][2], i))
    neg_budget = round((1.0 - p_pos) * total_images)
    negatives = []
    acc = 0
    for i in order:
        if acc >= neg_budget:
            break
        negatives.append(i)
        acc += plans[i][3]
    neg_set = set(negatives)

    # stars within each side follow latent-score rank
    neg_sorted = [i for i in order if i in neg_set]
    pos_sorted = [i for i in order if i not in neg_set]
    stars = {}
    for k, i in enumerate(neg_sorted):
        stars[i] = 1 + min(2, (3 * k) // max(1, len(neg_sorted)))
    for k, i in enumerate(pos_sorted):
        stars[i] = 4 + min(1, (2 * k) // max(1, len(pos_sorted)))

    records = []
    for idx, (u, r, _s, n_img) in enumerate(plans):
        review_id = f"rev{idx:05d}"
        st = stars[idx]
        shift = config.signal_strength * _brightness_shift(st)
        paths = []
        for j in range(n_img):
            rng = make_rng(config.seed, f"image:{review_id}:{j}")
            img = textures[r] + shift + config.noise_sigma * rng.standard_normal(
                (size, size, 3)).astype(np.float32)
            img = np.clip(img, 0.0, 1.0)
            rel = f"images/{review_id}_{j}.ppm"
            write_ppm(img, out_dir / rel)
            paths.append(rel)
        records.append(ReviewRecord(
            review_id=review_id,
            user_id=f"u{u:04d}",
            restaurant_id=f"r{r:03d}",
            stars=st,
            image_paths=paths,
        ))

    manifest_path = out_dir / "manifest.jsonl"
    save_manifest(records, manifest_path)
    return manifest_path, records


# ---------------------------------------------------------------------------
# Feature files
# ---------------------------------------------------------------------------

def save_feature_file(features: dict[str, np.ndarray], path):
    """Header line with the vector length, then one `path v1 v2 ...` per line."""
    if not features:
        raise ValueError("refusing to write an empty feature file")
    dims = {len(v) for v in features.values()}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature lengths: {sorted(dims)}")
    dim = dims.pop()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{dim}\n")
        for key in sorted(features):
            if any(ch.isspace() for ch in key):
                raise ValueError(f"image reference may not contain whitespace: {key!r}")
            vals = " ".join(repr(float(v)) for v in np.asarray(features[key], dtype=np.float32))
            fh.write(f"{key} {vals}\n")


def load_feature_file(path) -> dict[str, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        try:
            dim = int(header)
        except ValueError as exc:
            raise ValueError(f"{path}: bad feature-file header {header!r}") from exc
        features = {}
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            key, vals = parts[0], parts[1:]
            if len(vals) != dim:
                raise ValueError(
                    f"{path}:{lineno}: expected {dim} values, got {len(vals)}"
                )
            features[key] = np.array(vals, dtype=np.float32)
    return features
