"""Synthetic point-cloud datasets and their on-disk format.

A dataset directory holds ``manifest.json`` and one text file per cloud with
one point per line, coordinates written with 17 significant digits so that
float64 values survive the round trip exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import make_rng

FORMAT_VERSION = 1
TEMPLATES = ("ring", "two-bar", "cross")


class ManifestError(ValueError):
    pass


@dataclass
class Dataset:
    clouds: list
    labels: list
    dim: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.clouds) != len(self.labels):
            raise ValueError("clouds and labels differ in length")
        for c in self.clouds:
            if np.ndim(c) != 2 or np.shape(c)[1] != self.dim:
                raise ValueError(f"cloud of shape {np.shape(c)} in a dim={self.dim} dataset")

    def __len__(self):
        return len(self.clouds)

    def subset(self, idx) -> "Dataset":
        return Dataset([self.clouds[i] for i in idx], [self.labels[i] for i in idx], self.dim, dict(self.meta))

    def with_label(self, label: int) -> "Dataset":
        return self.subset([i for i, l in enumerate(self.labels) if l == label])

    def counts(self) -> dict:
        out: dict = {}
        for l in self.labels:
            out[l] = out.get(l, 0) + 1
        return dict(sorted(out.items()))


def gen_mixture2d(
    n_samples: int, points_per_cloud: int, centers, sigma: float, seed: int, balanced: bool = False
) -> Dataset:
    """Each cloud picks one center uniformly (its label) and scatters points around it.

    With ``balanced`` the labels are a shuffled sequence with equal counts per
    center (up to one), which removes the multinomial imbalance of small sets.
    """
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or len(centers) < 1 or centers.shape[1] != 2:
        raise ValueError("centers must be a nonempty list of 2D points")
    if not sigma > 0 or n_samples < 0 or points_per_cloud < 1:
        raise ValueError("need sigma > 0, n_samples >= 0 and points_per_cloud >= 1")
    rng = make_rng(seed)
    if balanced:
        labels = rng.permutation(np.arange(n_samples) % len(centers))
    else:
        labels = rng.integers(0, len(centers), size=n_samples)
    noise = rng.standard_normal((n_samples, points_per_cloud, 2))
    clouds = [centers[l] + sigma * noise[i] for i, l in enumerate(labels)]
    meta = {"kind": "mixture2d", "centers": centers.tolist(), "sigma": sigma, "seed": seed, "balanced": balanced}
    return Dataset(clouds, labels.tolist(), 2, meta)


def _template_points(name: str, n: int, rng) -> np.ndarray:
    u = rng.random(n)
    if name == "ring":
        ang = 2.0 * math.pi * u
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    # two-bar: horizontal bars y = +-0.5; cross: horizontal and vertical bars through 0
    which = rng.integers(0, 2, size=n)
    s = 2.0 * u - 1.0
    if name == "two-bar":
        return np.stack([s, np.where(which == 0, 0.5, -0.5)], axis=1)
    if name == "cross":
        return np.where(which[:, None] == 0, np.stack([s, 0 * s], 1), np.stack([0 * s, s], 1))
    raise ValueError(f"unknown template {name!r}; expected one of {TEMPLATES}")


def template_distance(name: str, P) -> np.ndarray:
    """Distance from each point to the template locus."""
    P = np.asarray(P, dtype=np.float64)
    x, y = P[:, 0], P[:, 1]
    cx = np.clip(x, -1.0, 1.0)
    if name == "ring":
        return np.abs(np.hypot(x, y) - 1.0)
    if name == "two-bar":
        return np.minimum(np.hypot(x - cx, y - 0.5), np.hypot(x - cx, y + 0.5))
    if name == "cross":
        cy = np.clip(y, -1.0, 1.0)
        return np.minimum(np.hypot(x - cx, y), np.hypot(x, y - cy))
    raise ValueError(f"unknown template {name!r}")


def gen_template_shapes(n_samples: int, points_per_cloud: int, templates, jitter: float, seed: int) -> Dataset:
    templates = list(templates)
    if not templates or any(t not in TEMPLATES for t in templates):
        raise ValueError(f"templates must be a nonempty subset of {TEMPLATES}")
    if jitter < 0 or n_samples < 0 or points_per_cloud < 1:
        raise ValueError("need jitter >= 0, n_samples >= 0 and points_per_cloud >= 1")
    rng = make_rng(seed)
    labels = rng.integers(0, len(templates), size=n_samples)
    clouds = []
    for l in labels:
        P = _template_points(templates[l], points_per_cloud, rng)
        clouds.append(P + jitter * rng.standard_normal(P.shape))
    meta = {"kind": "templates", "templates": templates, "jitter": jitter, "seed": seed}
    return Dataset(clouds, labels.tolist(), 2, meta)


def split(ds: Dataset, ratios=(0.9, 0.05, 0.05), seed: int = 0):
    """Stratified shuffle split into (train, val, test).

    Samples are shuffled within each label and interleaved by their relative
    rank, so every prefix of the ordering holds the labels in proportion.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = make_rng(seed)
    labels = np.asarray(ds.labels)
    keys = np.empty(len(ds))
    for l in np.unique(labels):
        idx = np.flatnonzero(labels == l)
        rng.shuffle(idx)
        keys[idx] = (np.arange(len(idx)) + 0.5) / len(idx)
    order = np.lexsort((np.arange(len(ds)), keys))
    n = len(ds)
    n_train = round(ratios[0] * n)
    n_val = min(round(ratios[1] * n), n - n_train)
    parts = order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]
    return tuple(ds.subset(sorted(p.tolist())) for p in parts)


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    samples = []
    for i, (cloud, label) in enumerate(zip(ds.clouds, ds.labels)):
        name = f"sample_{i:06d}.txt"
        lines = [" ".join(f"{v:.17g}" for v in row) for row in np.asarray(cloud)]
        (path / name).write_text("\n".join(lines) + "\n")
        samples.append({"file": name, "label": int(label)})
    manifest = {
        "version": FORMAT_VERSION,
        "dim": ds.dim,
        "labels": sorted({int(l) for l in ds.labels}),
        "samples": samples,
        "meta": ds.meta,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def _parse_cloud(file: Path, dim: int) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(file.read_text().splitlines(), start=1):
        parts = line.split()
        if len(parts) != dim:
            raise ManifestError(f"{file}: line {lineno}: expected {dim} values, found {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise ManifestError(f"{file}: line {lineno}: {exc}") from exc
    if not rows:
        raise ManifestError(f"{file}: line 1: empty sample file")
    return np.array(rows, dtype=np.float64)


def load_dataset(path) -> Dataset:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise ManifestError(f"{mpath}: no manifest found")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{mpath}: line {exc.lineno}: invalid JSON ({exc.msg})") from exc
    for key in ("version", "dim", "samples"):
        if key not in manifest:
            raise ManifestError(f"{mpath}: missing field {key!r}")
    if manifest["version"] != FORMAT_VERSION:
        raise ManifestError(f"{mpath}: field 'version': unsupported value {manifest['version']!r}")
    dim = manifest["dim"]
    if dim not in (2, 3):
        raise ManifestError(f"{mpath}: field 'dim': expected 2 or 3, got {dim!r}")
    clouds, labels = [], []
    for k, entry in enumerate(manifest["samples"]):
        if not isinstance(entry, dict) or "file" not in entry or "label" not in entry:
            raise ManifestError(f"{mpath}: samples[{k}]: needs 'file' and 'label'")
        file = path / entry["file"]
        if not file.is_file():
            raise ManifestError(f"{mpath}: samples[{k}]: missing sample file {entry['file']!r}")
        clouds.append(_parse_cloud(file, dim))
        labels.append(int(entry["label"]))
    return Dataset(clouds, labels, dim, manifest.get("meta", {}))
