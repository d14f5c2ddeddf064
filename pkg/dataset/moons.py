"""
TWO-MOON synthetic data, input-noise injection and splitting.

Class 0: (r cos t, r sin t),            t ~ U[0, pi]
Class 1: (r - r cos t, -r sin t + r/2), t ~ U[0, pi]
then N(0, noise_std^2) on every coordinate.

Every sample keeps its original id. Noise for a sample depends only on
(seed, id), so noising and splitting commute.
"""
import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from config import FLOAT_FORMAT, MOON_N_PER_CLASS, MOON_NOISE_STD, MOON_RADIUS
from errors import ConfigError, ShapeError
from tensor.core import Rng, gauss_draw

log = logging.getLogger(__name__)


class MoonSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_per_class: int = Field(MOON_N_PER_CLASS, ge=1)
    radius: float = Field(MOON_RADIUS, gt=0)
    noise_std: float = Field(MOON_NOISE_STD, ge=0)
    seed: int = 0


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray            # (n, d)
    labels: np.ndarray              # (n,) int64
    ids: np.ndarray = field(default=None)
    num_classes: int = 2

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or labels.shape != (features.shape[0],):
            raise ShapeError("dataset", features.shape, labels.shape)
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(features)):
            raise ValueError("dataset features must be finite")
        ids = np.arange(len(labels)) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, index):
        return Dataset(self.features[index], self.labels[index], self.ids[index], self.num_classes)


def generate_two_moons(spec):
    rng = Rng(spec.seed)
    n, r = spec.n_per_class, spec.radius
    t0 = np.pi * rng.spawn(0).uniform(n)
    t1 = np.pi * rng.spawn(1).uniform(n)
    upper = np.column_stack([r * np.cos(t0), r * np.sin(t0)])
    lower = np.column_stack([r - r * np.cos(t1), -r * np.sin(t1) + r / 2.0])
    features = np.vstack([upper, lower])
    features = features + gauss_draw(rng.spawn(2), 2 * n, 2, 0.0, spec.noise_std)
    labels = np.concatenate([np.zeros(n, dtype=np.int64), np.ones(n, dtype=np.int64)])
    log.debug(f"Generated {2 * n} moon points (r={r}, noise={spec.noise_std}, seed={spec.seed})")
    return Dataset(features, labels)


def add_gaussian_noise(dataset, std, seed):
    """Perturb features with N(0, std^2); the noise of sample id k comes from stream spawn(k) of Rng(seed)."""
    if std < 0:
        raise ConfigError(f"noise std must be >= 0, got {std}")
    if std == 0 or len(dataset) == 0:
        return Dataset(dataset.features.copy(), dataset.labels, dataset.ids, dataset.num_classes)
    root = Rng(seed)
    noise = np.vstack([gauss_draw(root.spawn(int(k)), 1, dataset.dim, 0.0, std) for k in dataset.ids])
    return Dataset(dataset.features + noise, dataset.labels, dataset.ids, dataset.num_classes)


def split(dataset, train_fraction, seed):
    """Shuffled disjoint (train, test) partition."""
    if not 0 < train_fraction < 1:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(dataset)
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise ConfigError(f"split of {n} samples at {train_fraction} leaves one side empty")
    order = Rng(seed).permutation(n)
    return dataset.subset(order[:n_train]), dataset.subset(order[n_train:])


def save_dataset_csv(dataset, filepath):
    """Columns x0..x{d-1}, label; floats at 17 significant digits."""
    os.makedirs(os.path.dirname(os.path.abspath(filepath)), exist_ok=True)
    fieldnames = [f"x{j}" for j in range(dataset.dim)] + ["label"]
    with open(filepath, "w", encoding="utf-8", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for row, label in zip(dataset.features, dataset.labels):
            rec = {f"x{j}": format(v, FLOAT_FORMAT) for j, v in enumerate(row)}
            rec["label"] = int(label)
            w.writerow(rec)
    log.info(f"Saved {len(dataset)} samples to {filepath}")
    return filepath


def load_dataset_csv(filepath, num_classes=2):
    with open(filepath, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        cols = [c for c in reader.fieldnames if c != "label"]
        rows = list(reader)
    features = np.array([[float(r[c]) for c in cols] for r in rows]).reshape(len(rows), len(cols))
    labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    return Dataset(features, labels, num_classes=num_classes)
