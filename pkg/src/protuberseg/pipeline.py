"""Preprocessing and phantom dataset generation.

Phantoms are texture-free test images: a procedurally generated kidney at
one intensity on a darker background, with an inserted tumor that is
either isodense with the kidney (shape is the only signal) or hypo/
hyperdense. They stand in for real CT volumes and let the three-network
pipeline be compared against a plain segmentation baseline.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import synthgen
from .volume import Mask, NumericFault, Volume, gaussian_blur, resample, write_pvol

MANIFEST_VERSION = 1


@dataclass
class PreprocessConfig:
    clip_lo: float = -90.0
    clip_hi: float = 210.0
    target_spacing: float = 1.0
    patch: int = 128

    def __post_init__(self):
        if self.clip_lo >= self.clip_hi:
            raise ValueError("clip_lo must be < clip_hi")
        if self.target_spacing <= 0:
            raise ValueError("target_spacing must be > 0")


def preprocess(image: Volume, cfg: PreprocessConfig = PreprocessConfig()
               ) -> Volume:
    """Resample to the target spacing, clip intensities, map to [-1, 1]."""
    if not np.all(np.isfinite(image.data)):
        raise NumericFault("non-finite voxels in input image")
    v = resample(image, cfg.target_spacing)
    mid = (cfg.clip_lo + cfg.clip_hi) / 2.0
    half = (cfg.clip_hi - cfg.clip_lo) / 2.0
    data = (np.clip(v.data, cfg.clip_lo, cfg.clip_hi) - mid) / half
    return Volume(data.astype(np.float32), v.spacing)


@dataclass
class PhantomConfig:
    grid: int = 32
    p_iso: float = 0.5
    background: float = -1.0
    kidney_intensity: float = 0.2
    tumor_delta_range: tuple[float, float] = (0.4, 0.7)
    noise_std: float = 0.05
    blur_sigma: float = 0.6
    # shape sizes as fractions of the grid; None = generator defaults
    kidney_radius_frac: tuple[float, float] | None = None
    tumor_radius_range: tuple[float, float] | None = None

    def __post_init__(self):
        self.tumor_delta_range = tuple(self.tumor_delta_range)
        if self.kidney_radius_frac is not None:
            self.kidney_radius_frac = tuple(self.kidney_radius_frac)
        if self.tumor_radius_range is not None:
            self.tumor_radius_range = tuple(self.tumor_radius_range)
        if not 0.0 <= self.p_iso <= 1.0:
            raise ValueError("p_iso must be in [0, 1]")

    def shape_params(self):
        kp = synthgen.default_shape_params(self.grid)
        if self.kidney_radius_frac is not None:
            lo, hi = self.kidney_radius_frac
            kp.radius_range = (lo * self.grid, hi * self.grid)
        tp = synthgen.default_tumor_params(kp)
        if self.tumor_radius_range is not None:
            tp.radius_range = tuple(self.tumor_radius_range)
        return kp, tp


def _make_phantom(master_seed: int, index: int, cfg: PhantomConfig):
    """One phantom: image volume plus GT kidney (tumor excluded) and
    tumor masks; pure function of (master_seed, index)."""
    rng = np.random.default_rng([master_seed, index])
    kp, tp = cfg.shape_params()
    while True:
        kidney = synthgen.gen_kidney_shape(rng, kp)
        tumor = synthgen.gen_tumor_shape(rng, tp)
        out = synthgen.try_compose(kidney, tumor, rng)
        if isinstance(out, synthgen.SynthSample):
            break
    isodense = bool(rng.random() < cfg.p_iso)
    if isodense:
        tumor_intensity = cfg.kidney_intensity
    else:
        delta = rng.uniform(*cfg.tumor_delta_range)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        tumor_intensity = cfg.kidney_intensity + sign * delta
    img = np.full((cfg.grid,) * 3, cfg.background, dtype=np.float64)
    kidney_only = out.kidney_mask.data & ~out.tumor_mask.data
    img[kidney_only == 1] = cfg.kidney_intensity
    img[out.tumor_mask.data == 1] = tumor_intensity
    vol = Volume(img.astype(np.float32))
    if cfg.blur_sigma > 0:
        vol = gaussian_blur(vol, cfg.blur_sigma)
    noisy = vol.data + rng.normal(0.0, cfg.noise_std, vol.data.shape)
    vol = Volume(noisy.astype(np.float32))
    gt_kidney = Mask(kidney_only)
    meta = {
        "seed": [master_seed, index],
        "isodense": isodense,
        "tumor_intensity": float(tumor_intensity),
        "coverage_ratio": out.meta["coverage_ratio"],
        "containment_ratio": out.meta["containment_ratio"],
    }
    return vol, gt_kidney, out.tumor_mask, meta


def _emit_phantom(args):
    master_seed, index, cfg, split, out_dir = args
    vol, gt_kidney, gt_tumor, meta = _make_phantom(master_seed, index, cfg)
    stem = f"phantom_{index:04d}"
    names = {
        "image": f"{stem}_image.pvol",
        "kidney": f"{stem}_kidney.pvol",
        "tumor": f"{stem}_tumor.pvol",
    }
    write_pvol(os.path.join(out_dir, names["image"]), vol)
    write_pvol(os.path.join(out_dir, names["kidney"]), gt_kidney)
    write_pvol(os.path.join(out_dir, names["tumor"]), gt_tumor)
    return index, names | {"split": split} | meta


def make_phantom_dataset(n_train: int, n_test: int, master_seed: int,
                         out_dir, cfg: PhantomConfig = PhantomConfig(),
                         threads: int = 1) -> dict:
    """Emit a phantom dataset with split tags and a JSON manifest."""
    if n_train + n_test < 1:
        raise ValueError("need at least one phantom")
    os.makedirs(out_dir, exist_ok=True)
    jobs = [(master_seed, i, cfg, "train" if i < n_train else "test",
             out_dir) for i in range(n_train + n_test)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_emit_phantom, jobs, chunksize=4))
    else:
        results = [_emit_phantom(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    manifest = {
        "version": MANIFEST_VERSION,
        "master_seed": master_seed,
        "grid": cfg.grid,
        "p_iso": cfg.p_iso,
        "entries": [entry for _, entry in results],
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def load_phantom_manifest(out_dir) -> dict:
    with open(os.path.join(out_dir, "manifest.json")) as f:
        return json.load(f)
