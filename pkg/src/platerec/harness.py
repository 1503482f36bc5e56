"""End-to-end pipeline orchestration: split, augment, train, extract, evaluate.

Every stage materializes its artifacts (split file, augmented images,
feature file, checkpoints, reports) under the output directory so stages
can be re-run and inspected independently. One global seed determines the
split, the augmentation set, all initializations and dropout masks, and
therefore every reported metric.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import cae as cae_mod
from . import data as data_mod
from . import nn
from . import recmodel as rec_mod
from .metrics import MetricsReport, confusion_counts, compute_metrics, format_report

CHECKPOINT_VERSION = 1

FEATURE_SOURCES = ("cae", "feature-file", "random-projection")

KIND_OF_ORIGIN = {v: k for k, v in data_mod.ORIGIN_OF_KIND.items()}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def save_checkpoint(model, path):
    """Header line (JSON) + raw little-endian float32 payload; bit-exact round trip."""
    if isinstance(model, cae_mod.CaeModel):
        kind = "cae"
    elif isinstance(model, rec_mod.RecModel):
        kind = "rec"
    else:
        raise CheckpointError(f"cannot checkpoint object of type {type(model).__name__}")
    state = model.state_dict()
    names = sorted(state)
    directory = {}
    offset = 0
    for name in names:
        arr = state[name]
        directory[name] = {"shape": list(arr.shape), "offset": offset}
        offset += arr.size
    header = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": model.config.to_dict(),
        "tensors": directory,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for name in names:
            fh.write(np.ascontiguousarray(state[name], dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {header.get('format_version')}"
        )
    kind = header.get("kind")
    if kind == "cae":
        config = cae_mod.CaeConfig(**header["config"])
        model = cae_mod.build_cae(config)
    elif kind == "rec":
        config = rec_mod.RecConfig(**header["config"])
        model = rec_mod.build_recommender(config)
    else:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")

    floats = np.frombuffer(payload, dtype="<f4")
    live = model.state_dict()
    directory = header["tensors"]
    if set(live) != set(directory):
        raise CheckpointError(f"{path}: tensor directory does not match the model")
    for name, arr in live.items():
        meta = directory[name]
        shape = tuple(meta["shape"])
        if shape != arr.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name}: file {shape}, model {arr.shape}"
            )
        start = meta["offset"]
        end = start + arr.size
        if end > floats.size:
            raise CheckpointError(f"{path}: truncated payload for tensor {name}")
        arr[...] = floats[start:end].reshape(shape)
    return model


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------

def random_projection_features(images: dict[str, np.ndarray], dim, seed):
    """Seeded Gaussian projection of flattened pixels; an untrained control
    extractor standing in for pretrained-CNN features."""
    if not images:
        return {}
    n_in = next(iter(images.values())).size
    proj = nn.make_rng(seed, "random-projection").standard_normal((n_in, dim))
    proj = (proj / np.sqrt(n_in)).astype(np.float32)
    return {
        key: (img.reshape(-1).astype(np.float32) @ proj)
        for key, img in sorted(images.items())
    }


# ---------------------------------------------------------------------------
# Experiment configuration and report
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    data_dir: str
    out_dir: str
    image_size: int = 32
    seed: int = 0
    feature_source: str = "cae"
    feature_file: str | None = None
    image_feature_dim: int | None = None
    cae_loss: str = "bce"
    cae_lr: float = 0.001
    cae_batch: int = 32
    cae_patience: int = 6
    cae_max_epochs: int = 100
    embed_dim: int = 16
    n_reduce_blocks: int = 2
    rec_lr: float = 0.001
    rec_batch: int = 32
    rec_patience: int = 12
    rec_max_epochs: int = 100
    threshold: float = 0.5

    def __post_init__(self):
        if self.feature_source not in FEATURE_SOURCES:
            raise ValueError(f"unknown feature source {self.feature_source!r}")
        if self.feature_source == "feature-file" and not self.feature_file:
            raise ValueError("feature-file source needs a feature_file path")

    def to_dict(self):
        return asdict(self)


@dataclass
class RunReport:
    config: dict
    seed: int
    metrics: dict[str, MetricsReport]
    cae_history: dict | None
    rec_history: dict
    wall_times: dict[str, float]
    n_reduce_blocks: int

    def to_dict(self):
        return {
            "config": self.config,
            "seed": self.seed,
            "metrics": {k: v.to_dict() for k, v in self.metrics.items()},
            "cae_history": self.cae_history,
            "rec_history": self.rec_history,
            "wall_times": self.wall_times,
            "n_reduce_blocks": self.n_reduce_blocks,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            config=d["config"], seed=d["seed"],
            metrics={k: MetricsReport.from_dict(v) for k, v in d["metrics"].items()},
            cae_history=d["cae_history"], rec_history=d["rec_history"],
            wall_times=d["wall_times"], n_reduce_blocks=d["n_reduce_blocks"],
        )


class StageError(RuntimeError):
    """Pipeline failure tagged with the stage that caused it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# Pipeline stages
# ---------------------------------------------------------------------------

def augmented_image_path(origin, original_path):
    return f"augmented/{origin}__{Path(original_path).name}"


def materialize_augmentation(split, data_dir, out_dir):
    """Augment minority train triads and write the transformed image files.

    Returns (augmented train triads, new split rows for the transformed
    images). Transforms run at stored resolution, before any resizing.
    """
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    (out_dir / "augmented").mkdir(parents=True, exist_ok=True)
    train_triads = split.triads("train")
    augmented = data_mod.augment_minority(train_triads)
    new_rows = []
    rev_user = {v: k for k, v in split.user_index.items()}
    rev_rest = {v: k for k, v in split.restaurant_index.items()}
    written = set()
    for t in augmented:
        if t.origin == "original":
            continue
        new_ref = augmented_image_path(t.origin, t.image_ref)
        if new_ref not in written:
            img = data_mod.read_ppm(data_dir / t.image_ref)
            out = data_mod.apply_transform(img, KIND_OF_ORIGIN[t.origin])
            data_mod.write_ppm(out, out_dir / new_ref)
            written.add(new_ref)
        new_rows.append(data_mod.SplitRow(
            image_path=new_ref, user_id=rev_user[t.user_index],
            restaurant_id=rev_rest[t.restaurant_index], label=t.label,
            origin=t.origin, partition="train",
        ))
        t.image_ref = new_ref
    return augmented, new_rows


def _load_resized(path, roots, size):
    for root in roots:
        candidate = Path(root) / path
        if candidate.exists():
            img = data_mod.read_ppm(candidate)
            if img.shape[:2] != (size, size):
                img = data_mod.resize_image(img, size, size)
            return img
    raise FileNotFoundError(f"image {path!r} not found under {list(map(str, roots))}")


@dataclass
class PreparedData:
    split: data_mod.SplitAssignment       # includes augmented train rows
    augmented_train: list                  # TriadExample list for training
    features: dict[str, np.ndarray]
    feature_dim: int
    cae_history: dict | None
    wall_times: dict[str, float] = field(default_factory=dict)


def prepare_data(config: ExperimentConfig) -> PreparedData:
    """Stages up to and including feature extraction; artifacts land in out_dir."""
    data_dir, out_dir = Path(config.data_dir), Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    walls = {}

    t0 = time.perf_counter()
    try:
        reviews = data_mod.load_manifest(data_dir / "manifest.jsonl")
        split = data_mod.three_way_split(reviews, config.seed)
        data_mod.save_split(split, out_dir / "split.jsonl")
    except Exception as exc:
        raise StageError("split", exc) from exc
    walls["split"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        augmented, new_rows = materialize_augmentation(split, data_dir, out_dir)
        full_split = data_mod.SplitAssignment(
            rows=split.rows + new_rows,
            user_index=split.user_index,
            restaurant_index=split.restaurant_index,
            review_partition=split.review_partition,
        )
        data_mod.save_split(full_split, out_dir / "augmented_split.jsonl")
    except Exception as exc:
        raise StageError("augment", exc) from exc
    walls["augment"] = time.perf_counter() - t0

    size = config.image_size
    roots = (data_dir, out_dir)
    t0 = time.perf_counter()
    try:
        all_paths = sorted({row.image_path for row in full_split.rows})
        images = {p: _load_resized(p, roots, size) for p in all_paths}
    except Exception as exc:
        raise StageError("load-images", exc) from exc
    walls["load-images"] = time.perf_counter() - t0

    cae_history = None
    t0 = time.perf_counter()
    try:
        if config.feature_source == "cae":
            cae_config = cae_mod.CaeConfig(
                input_height=size, input_width=size, loss_kind=config.cae_loss,
                batch_size=config.cae_batch, patience=config.cae_patience,
                max_epochs=config.cae_max_epochs, learning_rate=config.cae_lr,
                seed=config.seed,
            )
            train_imgs = [images[r.image_path] for r in split.rows_in("train")]
            val_imgs = [images[r.image_path] for r in split.rows_in("validation")]
            model = cae_mod.build_cae(cae_config)
            model, history = cae_mod.train_cae(model, train_imgs, val_imgs, cae_config)
            cae_history = history.to_dict()
            save_checkpoint(model, out_dir / "cae.ckpt")
            codes = cae_mod.encode_images(model, [images[p] for p in all_paths])
            features = {p: codes[i] for i, p in enumerate(all_paths)}
            feature_dim = cae_config.code_length
        elif config.feature_source == "random-projection":
            feature_dim = config.image_feature_dim or 48
            features = random_projection_features(images, feature_dim, config.seed)
        else:
            features = data_mod.load_feature_file(config.feature_file)
            feature_dim = len(next(iter(features.values())))
            if config.image_feature_dim and feature_dim != config.image_feature_dim:
                raise ValueError(
                    f"feature file has vectors of length {feature_dim}, "
                    f"expected {config.image_feature_dim}"
                )
            missing = [p for p in all_paths if p not in features]
            if missing:
                raise KeyError(f"feature file lacks {len(missing)} image references, "
                               f"first missing: {missing[0]!r}")
        data_mod.save_feature_file(features, out_dir / "features.txt")
    except StageError:
        raise
    except Exception as exc:
        raise StageError("features", exc) from exc
    walls["features"] = time.perf_counter() - t0

    return PreparedData(
        split=full_split, augmented_train=augmented, features=features,
        feature_dim=feature_dim, cae_history=cae_history, wall_times=walls,
    )


def triads_to_batch(triads, features) -> rec_mod.TriadBatch:
    if not triads:
        raise ValueError("no triads to batch")
    feats = np.stack([features[t.image_ref] for t in triads])
    return rec_mod.TriadBatch(
        users=np.array([t.user_index for t in triads]),
        restaurants=np.array([t.restaurant_index for t in triads]),
        features=feats,
        labels=np.array([t.label for t in triads]),
    )


def evaluate_batch(model, batch, threshold) -> MetricsReport:
    probs = model.forward(batch, mode=nn.INFERENCE)
    return compute_metrics(confusion_counts(probs, batch.labels, threshold), threshold)


def train_and_evaluate(prepared: PreparedData, config: ExperimentConfig,
                       n_reduce_blocks=None):
    """Train the recommender on the augmented train triads and evaluate all partitions."""
    if n_reduce_blocks is None:
        n_reduce_blocks = config.n_reduce_blocks
    split = prepared.split
    rec_config = rec_mod.RecConfig(
        n_users=len(split.user_index),
        n_restaurants=len(split.restaurant_index),
        image_feature_dim=prepared.feature_dim,
        embed_dim=config.embed_dim,
        n_reduce_blocks=n_reduce_blocks,
        learning_rate=config.rec_lr,
        batch_size=config.rec_batch,
        patience=config.rec_patience,
        max_epochs=config.rec_max_epochs,
        decision_threshold=config.threshold,
        seed=config.seed,
    )
    train_batch = triads_to_batch(prepared.augmented_train, prepared.features)
    val_batch = triads_to_batch(split.triads("validation"), prepared.features)
    model = rec_mod.build_recommender(rec_config)
    model, history = rec_mod.train_recommender(model, train_batch, val_batch, rec_config)

    reports = {}
    for partition in data_mod.PARTITIONS:
        triads = split.triads(partition) if partition != "train" else [
            t for t in split.triads("train") if t.origin == "original"
        ]
        if triads:
            reports[partition] = evaluate_batch(
                model, triads_to_batch(triads, prepared.features), config.threshold
            )
    return model, history, reports


def run_experiment(config: ExperimentConfig) -> RunReport:
    prepared = prepare_data(config)
    out_dir = Path(config.out_dir)
    t0 = time.perf_counter()
    try:
        model, history, reports = train_and_evaluate(prepared, config)
        save_checkpoint(model, out_dir / "rec.ckpt")
    except StageError:
        raise
    except Exception as exc:
        raise StageError("train-rec", exc) from exc
    walls = dict(prepared.wall_times)
    walls["train-rec"] = time.perf_counter() - t0

    report = RunReport(
        config=config.to_dict(), seed=config.seed, metrics=reports,
        cae_history=prepared.cae_history, rec_history=history.to_dict(),
        wall_times=walls, n_reduce_blocks=config.n_reduce_blocks,
    )
    write_report(report, out_dir / "report.json")
    return report


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

METRIC_ROWS = ("sensitivity", "specificity", "precision", "f1", "b_score")
METRIC_LABELS = {"sensitivity": "Sens.", "specificity": "Spec.",
                 "precision": "Precision", "f1": "F1-Score", "b_score": "B-Score"}


def run_ablation(config: ExperimentConfig, block_counts=(1, 2)):
    """One recommender run per reduce-block count on identical splits and features.

    Returns {"variants": {str(n): RunReport}, "table": text} with the
    five-metric side-by-side comparison on the test partition.
    """
    prepared = prepare_data(config)
    out_dir = Path(config.out_dir)
    variants = {}
    for n_blocks in block_counts:
        t0 = time.perf_counter()
        model, history, reports = train_and_evaluate(prepared, config, n_reduce_blocks=n_blocks)
        save_checkpoint(model, out_dir / f"rec_{n_blocks}rb.ckpt")
        walls = dict(prepared.wall_times)
        walls["train-rec"] = time.perf_counter() - t0
        variants[str(n_blocks)] = RunReport(
            config=config.to_dict(), seed=config.seed, metrics=reports,
            cae_history=prepared.cae_history, rec_history=history.to_dict(),
            wall_times=walls, n_reduce_blocks=n_blocks,
        )
    table = ablation_table(variants, partition="test")
    with open(out_dir / "ablation.json", "w", encoding="utf-8") as fh:
        json.dump({k: v.to_dict() for k, v in variants.items()}, fh, indent=2)
    with open(out_dir / "ablation.txt", "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    return {"variants": variants, "table": table}


def ablation_table(variants: dict[str, RunReport], partition="test") -> str:
    cols = sorted(variants)
    header = f"{'':12s}" + "".join(f"{c + 'RB':>10s}" for c in cols)
    lines = [header]
    for metric in METRIC_ROWS:
        cells = []
        for c in cols:
            value = getattr(variants[c].metrics[partition], metric)
            cells.append(f"{'n/a':>10s}" if value is None else f"{value:>10.4f}")
        lines.append(f"{METRIC_LABELS[metric]:12s}" + "".join(cells))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def write_report(report: RunReport, path):
    """Machine-readable JSON plus a plain-text table next to it."""
    if not report.rec_history or not report.rec_history.get("val_b_score"):
        raise ValueError("incomplete report: empty training history")
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    lines = [f"seed: {report.seed}", f"reduce blocks: {report.n_reduce_blocks}", ""]
    for partition in data_mod.PARTITIONS:
        if partition in report.metrics:
            lines.append(f"[{partition}]")
            lines.append(format_report(report.metrics[partition]))
            lines.append("")
    with open(path.with_suffix(".txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))


def load_report(path) -> RunReport:
    with open(path, encoding="utf-8") as fh:
        return RunReport.from_dict(json.load(fh))
