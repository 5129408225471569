"""Synthetic protuberance dataset: procedural kidney/tumor shapes, random
tumor insertion with coverage/containment acceptance, and the input
degradations used when training the protuberance detector.

Shapes are implicit surfaces: an ellipsoid whose radius is modulated by a
smooth low-frequency random field, plus (for kidneys) a gentle bend of the
long axis. Both are star-convex about their center, so a single connected
component comes out by construction.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from .volume import (
    Mask,
    Volume,
    count,
    gaussian_blur,
    intersection,
    rotate_mask,
    scale_mask,
    translate_mask,
    union,
    write_pvol,
)

MANIFEST_VERSION = 1

# tumor insertion ranges ("random rotation and scaling", pinned here)
ROT_Z_RANGE = (-180.0, 180.0)
ROT_XY_RANGE = (-20.0, 20.0)
SCALE_RANGE = (0.7, 1.3)
MAX_COVERAGE = 0.3
MAX_CONTAINMENT = 0.95
ATTEMPT_BUDGET = 100


@dataclass
class ShapeParams:
    """Procedural shape generator knobs (voxel units)."""

    grid: int = 64
    radius_range: tuple[float, float] = (10.0, 16.0)
    elongation: float = 1.6          # long-axis multiplier for kidneys
    perturb_amplitude: float = 0.15  # radial modulation, fraction of radius
    perturb_cells: int = 3           # coarse field resolution per axis
    bend_amplitude: float = 0.25     # center offset fraction (kidney only)

    def __post_init__(self):
        self.radius_range = tuple(self.radius_range)
        lo, hi = self.radius_range
        if not (0 < lo <= hi < self.grid / 2):
            raise ValueError(f"radius range {self.radius_range} does not fit "
                             f"grid {self.grid}")
        if self.perturb_amplitude < 0 or self.perturb_amplitude >= 1:
            raise ValueError("perturb_amplitude must be in [0, 1)")


@dataclass
class Step2AugConfig:
    """Input degradations simulating soft base-network probability maps."""

    blur_sigma_range: tuple[float, float] = (0.5, 2.0)
    noise_std_range: tuple[float, float] = (0.0, 0.1)
    intensity_shift_range: tuple[float, float] = (-0.2, 0.2)
    apply_prob: float = 0.5

    def __post_init__(self):
        self.blur_sigma_range = tuple(self.blur_sigma_range)
        self.noise_std_range = tuple(self.noise_std_range)
        self.intensity_shift_range = tuple(self.intensity_shift_range)
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ValueError("apply_prob must be in [0, 1]")
        for lo, hi in (self.blur_sigma_range, self.noise_std_range):
            if lo < 0 or hi < lo:
                raise ValueError("range bounds must satisfy 0 <= lo <= hi")


@dataclass
class SynthSample:
    input_mask: Mask
    target_mask: Mask
    kidney_mask: Mask
    tumor_mask: Mask
    meta: dict


@dataclass
class Rejection:
    reason: str


def _smooth_field(rng, grid: int, cells: int) -> np.ndarray:
    """Low-frequency random field in [-1, 1], trilinearly upsampled."""
    coarse = rng.uniform(-1.0, 1.0, size=(cells, cells, cells))
    pos = np.linspace(0, cells - 1, grid)
    i0 = np.minimum(pos.astype(np.int64), cells - 2)
    w = pos - i0
    out = coarse
    for ax in range(3):
        lo = np.take(out, i0, axis=ax)
        hi = np.take(out, i0 + 1, axis=ax)
        shape = [1, 1, 1]
        shape[ax] = -1
        wb = w.reshape(shape)
        out = lo * (1 - wb) + hi * wb
    return out


def _implicit_shape(rng, p: ShapeParams, radii, bend: float) -> Mask:
    """Voxelize {x : |x - c(z)| <= R(direction)} on a grid^3 lattice."""
    n = p.grid
    c = (n - 1) / 2.0
    zz, yy, xx = np.meshgrid(*[np.arange(n, dtype=np.float64)] * 3,
                             indexing="ij")
    rz, ry, rx = radii
    # bend: shift the in-plane center as a quadratic function of z
    xc = c + bend * rx * ((zz - c) / rz) ** 2
    u = (zz - c) / rz
    v = (yy - c) / ry
    w = (xx - xc) / rx
    rho = np.sqrt(u * u + v * v + w * w)
    if p.perturb_amplitude > 0:
        boundary = 1.0 + p.perturb_amplitude * _smooth_field(rng, n,
                                                             p.perturb_cells)
    else:
        boundary = 1.0
    return Mask((rho <= boundary).astype(np.uint8))


def gen_kidney_shape(rng, p: ShapeParams) -> Mask:
    """Bean-like blob: elongated ellipsoid, perturbed surface, bent axis."""
    r = rng.uniform(*p.radius_range)
    radii = (r * p.elongation, r, r)
    bend = rng.uniform(0.0, p.bend_amplitude)
    return _implicit_shape(rng, p, radii, bend)


def gen_tumor_shape(rng, p: ShapeParams) -> Mask:
    """Roughly spherical blob, no bend, independent per-axis radii."""
    radii = tuple(rng.uniform(*p.radius_range) for _ in range(3))
    return _implicit_shape(rng, p, radii, bend=0.0)


def coverage_ratio(kidney: Mask, tumor: Mask) -> float:
    """Fraction of kidney voxels covered by the tumor."""
    k = count(kidney)
    if k == 0:
        raise ValueError("kidney mask is empty")
    return count(intersection(kidney, tumor)) / k


def containment_ratio(kidney: Mask, tumor: Mask) -> float:
    """Fraction of tumor voxels inside the kidney."""
    t = count(tumor)
    if t == 0:
        raise ValueError("tumor mask is empty")
    return count(intersection(kidney, tumor)) / t


def _bbox(m: Mask):
    idx = np.nonzero(m.data)
    return (np.array([c.min() for c in idx]),
            np.array([c.max() for c in idx]))


def _place_tumor(kidney: Mask, tumor: Mask, rng):
    """Sample an integer offset putting the tumor centroid inside the
    kidney bbox dilated by the tumor's effective radius."""
    tc = np.array([c.mean() for c in np.nonzero(tumor.data)])
    lo, hi = _bbox(kidney)
    r = (count(tumor) * 3.0 / (4.0 * np.pi)) ** (1.0 / 3.0)
    lo = lo - r
    hi = hi + r
    target = np.array([rng.uniform(lo[i], hi[i]) for i in range(3)])
    return np.rint(target - tc).astype(int)


def evaluate_placement(kidney: Mask, placed_tumor: Mask,
                       max_coverage: float = MAX_COVERAGE,
                       max_containment: float = MAX_CONTAINMENT):
    """Acceptance test for one placement.

    Returns (None, coverage, containment) when accepted, otherwise a
    (reason, coverage, containment) triple with NaN for unevaluated ratios.
    """
    if count(placed_tumor) == 0:
        return "tumor left the grid", float("nan"), float("nan")
    if count(intersection(kidney, placed_tumor)) == 0:
        return "no overlap", 0.0, 0.0
    cov = coverage_ratio(kidney, placed_tumor)
    con = containment_ratio(kidney, placed_tumor)
    if cov >= max_coverage:
        return "coverage", cov, con
    if con >= max_containment:
        return "containment", cov, con
    return None, cov, con


def try_compose(kidney: Mask, tumor: Mask, rng,
                max_coverage: float = MAX_COVERAGE,
                max_containment: float = MAX_CONTAINMENT,
                attempts: int = ATTEMPT_BUDGET,
                target_whole_tumor: bool = True):
    """Insert a transformed tumor into the kidney; accept when less than
    30% of the kidney is covered and at least 5% of the tumor protrudes.

    Returns a SynthSample on success, else a Rejection describing the last
    failed attempt.
    """
    if count(kidney) == 0 or count(tumor) == 0:
        raise ValueError("kidney and tumor masks must be nonempty")
    last = Rejection("attempt budget exhausted")
    for _ in range(attempts):
        angles = (rng.uniform(*ROT_Z_RANGE), rng.uniform(*ROT_XY_RANGE),
                  rng.uniform(*ROT_XY_RANGE))
        factor = rng.uniform(*SCALE_RANGE)
        t = scale_mask(rotate_mask(tumor, angles), factor)
        if count(t) == 0:
            last = Rejection("tumor vanished under transform")
            continue
        offset = _place_tumor(kidney, t, rng)
        t = translate_mask(t, offset)
        reason, cov, con = evaluate_placement(kidney, t, max_coverage,
                                              max_containment)
        if reason is not None:
            last = Rejection(reason)
            continue
        input_mask = union(kidney, t)
        if target_whole_tumor:
            target = Mask(t.data.copy(), t.spacing)
        else:
            target = Mask(t.data & ~kidney.data, t.spacing)
        meta = {
            "rotation": [float(a) for a in angles],
            "scale": float(factor),
            "offset": [int(o) for o in offset],
            "coverage_ratio": cov,
            "containment_ratio": con,
        }
        return SynthSample(input_mask, target, kidney, t, meta)
    return last


def _make_sample(master_seed: int, index: int, shape_params: ShapeParams,
                 tumor_params: ShapeParams) -> SynthSample:
    """Deterministic per-index sample; resamples shapes until acceptance."""
    rng = np.random.default_rng([master_seed, index])
    while True:
        kidney = gen_kidney_shape(rng, shape_params)
        tumor = gen_tumor_shape(rng, tumor_params)
        out = try_compose(kidney, tumor, rng)
        if isinstance(out, SynthSample):
            out.meta["seed"] = [master_seed, index]
            return out


def default_tumor_params(shape_params: ShapeParams) -> ShapeParams:
    """Tumor shape knobs scaled down from the kidney's."""
    lo, hi = shape_params.radius_range
    return ShapeParams(
        grid=shape_params.grid,
        radius_range=(0.35 * lo, 0.55 * hi),
        elongation=1.0,
        perturb_amplitude=shape_params.perturb_amplitude,
        perturb_cells=shape_params.perturb_cells,
        bend_amplitude=0.0,
    )


def default_shape_params(grid: int) -> ShapeParams:
    """Kidney shape knobs proportional to the grid."""
    return ShapeParams(grid=grid, radius_range=(0.16 * grid, 0.25 * grid))


def _emit_sample(args):
    master_seed, index, sp, tp, out_dir = args
    s = _make_sample(master_seed, index, sp, tp)
    stem = os.path.join(out_dir, f"sample_{index:05d}")
    input_path = f"{stem}_input.pvol"
    target_path = f"{stem}_target.pvol"
    kidney_path = f"{stem}_kidney.pvol"
    tumor_path = f"{stem}_tumor.pvol"
    write_pvol(input_path, s.input_mask)
    write_pvol(target_path, s.target_mask)
    write_pvol(kidney_path, s.kidney_mask)
    write_pvol(tumor_path, s.tumor_mask)
    entry = {
        "input_path": os.path.basename(input_path),
        "target_path": os.path.basename(target_path),
        "kidney_path": os.path.basename(kidney_path),
        "tumor_path": os.path.basename(tumor_path),
        "seed": s.meta["seed"],
        "coverage_ratio": s.meta["coverage_ratio"],
        "containment_ratio": s.meta["containment_ratio"],
        "rotation": s.meta["rotation"],
        "scale": s.meta["scale"],
        "offset": s.meta["offset"],
    }
    return index, entry


def generate_dataset(n: int, master_seed: int, out_dir,
                     grid: int = 64,
                     shape_params: ShapeParams | None = None,
                     tumor_params: ShapeParams | None = None,
                     threads: int = 1) -> dict:
    """Write n accepted samples as PVOL pairs plus a JSON manifest.

    Byte-identical across reruns and across thread counts: each sample is
    a pure function of (master_seed, index).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    sp = shape_params or default_shape_params(grid)
    tp = tumor_params or default_tumor_params(sp)
    manifest = {
        "version": MANIFEST_VERSION,
        "master_seed": master_seed,
        "grid": sp.grid,
        "samples": [],
    }
    jobs = [(master_seed, i, sp, tp, out_dir) for i in range(n)]
    try:
        if threads > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(_emit_sample, jobs, chunksize=8))
        else:
            results = [_emit_sample(j) for j in jobs]
    except OSError:
        manifest["partial"] = True
        _write_manifest(out_dir, manifest)
        raise
    results.sort(key=lambda r: r[0])
    manifest["samples"] = [entry for _, entry in results]
    _write_manifest(out_dir, manifest)
    return manifest


def _write_manifest(out_dir, manifest) -> None:
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_manifest(out_dir) -> dict:
    with open(os.path.join(out_dir, "manifest.json")) as f:
        return json.load(f)


def augment_step2_input(m: Mask, cfg: Step2AugConfig, rng) -> Volume:
    """Degrade a binary mask into a soft [0, 1] map: optional blur, noise
    and global intensity shift, each applied with cfg.apply_prob."""
    v = Volume(m.data.astype(np.float32), m.spacing)
    if rng.random() < cfg.apply_prob:
        sigma = rng.uniform(*cfg.blur_sigma_range)
        v = gaussian_blur(v, sigma)
    data = v.data.astype(np.float64)
    if rng.random() < cfg.apply_prob:
        std = rng.uniform(*cfg.noise_std_range)
        data = data + rng.normal(0.0, std, size=data.shape)
    if rng.random() < cfg.apply_prob:
        data = data + rng.uniform(*cfg.intensity_shift_range)
    return Volume(np.clip(data, 0.0, 1.0).astype(np.float32), m.spacing)
