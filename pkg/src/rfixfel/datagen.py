"""Synthetic single-shot photon-count datasets.

Each image rotates the ground-truth density by a Haar-random rotation and
draws independent Poisson counts per pixel with mean equal to the model
intensity. Image ``j`` uses its own Philox stream keyed by
``(seed, j)``, so datasets are reproducible and order independent.

File format (``format_version`` 1), UTF-8 text, one JSON document per line:

    line 1   RFIXFEL-DATASET 1
    line 2   header object (keys sorted): format_version, grid {n_u, n_v,
             k_max}, n_images, target_mean_photons, intensity_scale,
             scale_sample_size, sigma, truth_centers (n_balls x 3), seed
    line 3+  one record per image, in image_index order:
             {"image_index": u64, "rotation": [w, x, y, z],
              "pixels": [[pixel_index, count], ...]}

Pixel indices are ``a * n_v + b`` for the lattice point ``(ku[a], kv[b])``;
only positive counts are stored. Floats are written with their shortest
round-tripping repr, so reading and re-writing is lossless.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .rotations import random_quaternion
from .xfel import DensityParams, DetectorGrid, ForwardModel, Observation, PhotonImage

__all__ = [
    "FORMAT_VERSION",
    "MAGIC",
    "DatasetHeader",
    "Dataset",
    "image_rng",
    "sample_rotation_uniform",
    "default_truth",
    "calibrate_intensity_scale",
    "generate_image",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
]

FORMAT_VERSION = 1
MAGIC = "RFIXFEL-DATASET 1"
_DATA_STREAM = 7
_SCALE_STREAM = 8
_TRUTH_STREAM = 9


def image_rng(seed: int, index: int, stream: int = _DATA_STREAM) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream), int(index)))
    return np.random.Generator(np.random.Philox(ss))


def sample_rotation_uniform(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform unit quaternion."""
    return random_quaternion(rng)


def default_truth(n_balls: int = 10, radius: float = 1.0, min_separation: float = 0.35,
                  sigma: float = 0.519, seed: int = 0, max_tries: int = 100000) -> DensityParams:
    """Ball centers drawn uniformly inside a ball, rejecting close pairs."""
    rng = image_rng(seed, 0, _TRUTH_STREAM)
    pts = []
    for _ in range(max_tries):
        p = rng.uniform(-radius, radius, 3)
        if p @ p > radius * radius:
            continue
        if all(np.linalg.norm(p - q) >= min_separation for q in pts):
            pts.append(p)
            if len(pts) == n_balls:
                return DensityParams(np.array(pts), sigma)
    raise RuntimeError("could not place balls; lower min_separation or raise radius")


def calibrate_intensity_scale(truth: DensityParams, grid: DetectorGrid, target_mean_photons: float,
                              seed: int, sample_size: int = 256) -> float:
    """Scale making the rotation-averaged expected count on the grid equal the target."""
    if target_mean_photons == 0:
        return 0.0
    unit = ForwardModel(grid, 1.0)
    rng = image_rng(seed, 0, _SCALE_STREAM)
    totals = [unit.expected_counts(truth, sample_rotation_uniform(rng)).sum() for _ in range(sample_size)]
    return float(target_mean_photons / np.mean(totals))


def generate_image(truth: DensityParams, rotation, model: ForwardModel,
                   rng: np.random.Generator, index: int = 0) -> PhotonImage:
    """Poisson counts on every pixel at the given orientation."""
    lam = model.expected_counts(truth, rotation)
    counts = rng.poisson(lam)
    nz = np.flatnonzero(counts)
    return PhotonImage(int(index), Observation(nz, counts[nz]), np.asarray(rotation, dtype=float))


@dataclass(frozen=True)
class DatasetHeader:
    grid: DetectorGrid
    n_images: int
    target_mean_photons: float
    intensity_scale: float
    truth: DensityParams
    seed: int
    scale_sample_size: int = 256
    format_version: int = FORMAT_VERSION

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "grid": self.grid.to_dict(),
            "n_images": self.n_images,
            "target_mean_photons": self.target_mean_photons,
            "intensity_scale": self.intensity_scale,
            "scale_sample_size": self.scale_sample_size,
            "sigma": self.truth.sigma,
            "truth_centers": self.truth.centers.tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetHeader":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported dataset format version {d.get('format_version')!r}")
        g = d["grid"]
        return cls(
            grid=DetectorGrid(int(g["n_u"]), int(g["n_v"]), float(g["k_max"])),
            n_images=int(d["n_images"]),
            target_mean_photons=float(d["target_mean_photons"]),
            intensity_scale=float(d["intensity_scale"]),
            truth=DensityParams(np.array(d["truth_centers"], dtype=float), float(d["sigma"])),
            seed=int(d["seed"]),
            scale_sample_size=int(d["scale_sample_size"]),
        )


@dataclass(frozen=True)
class Dataset:
    header: DatasetHeader
    images: tuple

    @property
    def model(self) -> ForwardModel:
        return ForwardModel(self.header.grid, self.header.intensity_scale)

    @property
    def sigma(self) -> float:
        return self.header.truth.sigma

    @property
    def truth(self) -> DensityParams:
        return self.header.truth

    def __len__(self):
        return len(self.images)

    def observations(self) -> list:
        """Count data without the generating rotations."""
        return [im.observation for im in self.images]


def generate_dataset(truth: DensityParams, M: int, grid: DetectorGrid, target_mean_photons: float = 15.0,
                     seed: int = 0, scale_sample_size: int = 256) -> Dataset:
    """``M`` images with i.i.d. Haar rotations and Poisson counts."""
    if M < 1:
        raise ValueError("need at least one image")
    scale = calibrate_intensity_scale(truth, grid, target_mean_photons, seed, scale_sample_size)
    header = DatasetHeader(grid, int(M), float(target_mean_photons), scale, truth, int(seed),
                           int(scale_sample_size))
    model = ForwardModel(grid, scale)
    images = []
    for j in range(int(M)):
        rng = image_rng(seed, j)
        images.append(generate_image(truth, sample_rotation_uniform(rng), model, rng, index=j))
    return Dataset(header, tuple(images))


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_dataset(dataset: Dataset, path) -> None:
    """Write atomically: the file appears only once complete."""
    path = os.fspath(path)
    tmp = path + ".partial"
    try:
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(MAGIC + "\n")
            fh.write(_dumps(dataset.header.to_dict()) + "\n")
            for im in dataset.images:
                rec = {"image_index": int(im.index),
                       "rotation": [float(v) for v in im.rotation],
                       "pixels": [[int(p), int(c)] for p, c in zip(im.pixels, im.counts)]}
                fh.write(_dumps(rec) + "\n")
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise OSError(f"could not write dataset to {path}: {exc}") from exc


def read_dataset(path) -> Dataset:
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            magic = fh.readline().rstrip("\n")
            if magic != MAGIC:
                raise ValueError(f"{path}: not a dataset file (bad magic line)")
            header = DatasetHeader.from_dict(json.loads(fh.readline()))
            images = []
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                pix = np.array([p for p, _ in rec["pixels"]], dtype=np.int64)
                cnt = np.array([c for _, c in rec["pixels"]], dtype=np.int64)
                images.append(PhotonImage(int(rec["image_index"]), Observation(pix, cnt),
                                          np.array(rec["rotation"], dtype=float)))
    except OSError as exc:
        raise OSError(f"could not read dataset {path}: {exc}") from exc
    if len(images) != header.n_images:
        raise ValueError(f"{path}: header announces {header.n_images} images, found {len(images)}")
    if [im.index for im in images] != list(range(len(images))):
        raise ValueError(f"{path}: image records out of order")
    return Dataset(header, tuple(images))
