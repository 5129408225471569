"""Optimizer, warmup+cosine schedule, three-step orchestration and the
fusion wiring between the three networks.

Step 1 trains the base network (kidney + tumor heads) on images.
Step 2 trains the protuberance detector alone on degraded synthetic masks.
Step 3 trains base + fusion jointly, protuberance parameters frozen; the
protuberance net receives the base network's soft kidney probability and
its output is summed with the initial tumor probability, clipped to
[0, 1], and concatenated with the image as the fusion input.

Every global step derives its own rng from (seed, stage, step), so runs
are bit-reproducible regardless of how batches are produced.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import synthgen
from .losses import LossConfig, step1_loss, step2_loss, step3_loss
from .tensornet import (
    Network,
    NetworkConfig,
    ParamSet,
    Tensor,
    add,
    build_network,
    clamp01,
    concat_channels,
    forward,
    load_checkpoint,
    narrow_channels,
    save_checkpoint,
)
from .volume import (
    Mask,
    NumericFault,
    Volume,
    crop,
    read_pvol,
    rotate_scale_mask,
    rotate_scale_volume,
)


@dataclass
class Schedule:
    base_lr: float = 1e-4
    peak_lr: float = 0.1
    warmup_fraction: float = 0.3
    total_steps: int = 1000

    def __post_init__(self):
        if not 0 < self.base_lr < self.peak_lr:
            raise ValueError("need 0 < base_lr < peak_lr")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must be in (0, 1)")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def lr_at(step: int, sch: Schedule) -> float:
    """Linear warmup from base_lr to peak_lr, then cosine decay to 0."""
    if not 0 <= step < sch.total_steps:
        raise ValueError(f"step {step} outside [0, {sch.total_steps})")
    w = round(sch.warmup_fraction * sch.total_steps)
    if step < w:
        return sch.base_lr + (sch.peak_lr - sch.base_lr) * step / w
    span = sch.total_steps - w
    return sch.peak_lr * 0.5 * (1.0 + math.cos(math.pi * (step - w) / span))


@dataclass
class OptimConfig:
    momentum: float = 0.9
    weight_decay: float = 1e-7


def sgd_update(params: ParamSet, lr: float,
               opt: OptimConfig = OptimConfig()) -> None:
    """v <- momentum*v + g + wd*p; p <- p - lr*v. Frozen params untouched."""
    for name in params.names():
        if name in params.frozen:
            continue
        t = params.params[name]
        g = t.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericFault(f"non-finite gradient for {name}")
        v = params.momentum[name]
        v *= opt.momentum
        v += g + opt.weight_decay * t.data
        t.data -= lr * v


def fuse(tumor_prob: Tensor, prot_prob: Tensor, image: Tensor) -> Tensor:
    """Two-channel fusion input: (image, clip(tumor + protuberance))."""
    if tumor_prob.shape != prot_prob.shape or \
            tumor_prob.shape[2:] != image.shape[2:]:
        raise ValueError(
            f"shape mismatch: tumor {tumor_prob.shape}, "
            f"prot {prot_prob.shape}, image {image.shape}")
    summed = clamp01(add(tumor_prob, prot_prob))
    return concat_channels(image, summed)


# ---------------------------------------------------------------------------
# configuration

@dataclass
class StepPlan:
    steps: int
    batch: int
    warmup_fraction: float


@dataclass
class AugConfig:
    """Image-space augmentation for Steps 1 and 3."""

    apply_prob: float = 0.5
    rot_z: float = 15.0
    rot_xy: float = 5.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    noise_std: float = 0.02

    def __post_init__(self):
        self.scale_range = tuple(self.scale_range)


@dataclass
class TrainConfig:
    grid: int = 32
    depth: int = 2
    base_channels: int = 4
    prot_channels: int = 4
    fusion_channels: int = 4
    patch: int = 32
    dtype: str = "float32"
    seed: int = 0
    peak_lr: float = 0.1
    base_lr: float = 1e-4
    step1: StepPlan = field(default_factory=lambda: StepPlan(400, 4, 0.3))
    step2: StepPlan = field(default_factory=lambda: StepPlan(300, 8, 0.1))
    step3: StepPlan = field(default_factory=lambda: StepPlan(300, 2, 0.3))
    aug: AugConfig = field(default_factory=AugConfig)
    step2_aug: synthgen.Step2AugConfig = field(
        default_factory=synthgen.Step2AugConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    init_base_from: str | None = None  # optional pretrained base checkpoint

    def schedule(self, plan: StepPlan) -> Schedule:
        return Schedule(self.base_lr, self.peak_lr, plan.warmup_fraction,
                        plan.steps)

    def base_cfg(self) -> NetworkConfig:
        return NetworkConfig(1, 2, self.base_channels, self.depth,
                             ("kidney", "tumor"), self.dtype)

    def prot_cfg(self) -> NetworkConfig:
        return NetworkConfig(1, 1, self.prot_channels, self.depth,
                             ("protuberance",), self.dtype)

    def fusion_cfg(self) -> NetworkConfig:
        return NetworkConfig(2, 1, self.fusion_channels, self.depth,
                             ("tumor",), self.dtype)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        d = json.loads(text)
        for key, typ in (("step1", StepPlan), ("step2", StepPlan),
                         ("step3", StepPlan), ("aug", AugConfig),
                         ("step2_aug", synthgen.Step2AugConfig),
                         ("optim", OptimConfig), ("loss", LossConfig)):
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path) as f:
            return cls.from_json(f.read())


def full_scale_config() -> TrainConfig:
    """Reference configuration at full production scale."""
    return TrainConfig(
        grid=128, depth=5, base_channels=16, prot_channels=8,
        fusion_channels=16, patch=128,
        step1=StepPlan(250_000, 8, 0.3),
        step2=StepPlan(100_000, 16, 0.1),
        step3=StepPlan(100_000, 4, 0.3),
    )


# ---------------------------------------------------------------------------
# data plumbing

def load_image_dataset(manifest_path):
    """Load a phantom/image dataset manifest; returns train entries as
    (image, kidney, tumor) triples."""
    with open(manifest_path) as f:
        manifest = json.load(f)
    root = os.path.dirname(manifest_path)
    entries = []
    for e in manifest["entries"]:
        if e.get("split", "train") != "train":
            continue
        entries.append((
            read_pvol(os.path.join(root, e["image"])),
            read_pvol(os.path.join(root, e["kidney"])),
            read_pvol(os.path.join(root, e["tumor"])),
        ))
    if not entries:
        raise ValueError(f"{manifest_path}: no training entries")
    return entries


def load_synth_dataset(synth_dir):
    manifest = synthgen.load_manifest(synth_dir)
    pairs = []
    for e in manifest["samples"]:
        pairs.append((
            read_pvol(os.path.join(synth_dir, e["input_path"])),
            read_pvol(os.path.join(synth_dir, e["target_path"])),
        ))
    if not pairs:
        raise ValueError(f"{synth_dir}: empty synthetic dataset")
    return pairs


def _augmented_patch(image: Volume, kidney: Mask, tumor: Mask,
                     patch: int, aug: AugConfig, rng):
    """One training example: optional rotation/scaling/noise, then a
    foreground-biased crop when the image exceeds the patch size."""
    if rng.random() < aug.apply_prob:
        angles = (rng.uniform(-aug.rot_z, aug.rot_z),
                  rng.uniform(-aug.rot_xy, aug.rot_xy),
                  rng.uniform(-aug.rot_xy, aug.rot_xy))
        factor = rng.uniform(*aug.scale_range)
        image = rotate_scale_volume(image, angles, factor,
                                    fill=float(image.data.min()))
        kidney = rotate_scale_mask(kidney, angles, factor)
        tumor = rotate_scale_mask(tumor, angles, factor)
    img = image.data.astype(np.float64)
    if aug.noise_std > 0 and rng.random() < aug.apply_prob:
        img = img + rng.normal(0.0, aug.noise_std, img.shape)
    if image.dims != (patch, patch, patch):
        origin = _sample_crop_origin(kidney, patch, rng)
        img_v = crop(Volume(img.astype(np.float32), image.spacing),
                     origin, (patch,) * 3)
        kidney = crop(kidney, origin, (patch,) * 3)
        tumor = crop(tumor, origin, (patch,) * 3)
        img = img_v.data.astype(np.float64)
    return img, kidney.data, tumor.data


def _sample_crop_origin(kidney: Mask, patch: int, rng):
    """Uniform crop origin, biased so at least half the draws cover some
    kidney foreground."""
    dims = kidney.dims
    hi = [max(n - patch, 0) for n in dims]
    if rng.random() < 0.5 and kidney.data.any():
        zz, yy, xx = np.nonzero(kidney.data)
        i = rng.integers(zz.size)
        center = (int(zz[i]), int(yy[i]), int(xx[i]))
        return tuple(min(max(c - patch // 2, 0), h)
                     for c, h in zip(center, hi))
    return tuple(int(rng.integers(h + 1)) for h in hi)


def _batch_tensors(examples, dtype):
    imgs = np.stack([e[0] for e in examples])[:, None].astype(dtype)
    kid = np.stack([e[1] for e in examples])[:, None].astype(dtype)
    tum = np.stack([e[2] for e in examples])[:, None].astype(dtype)
    target = np.concatenate([kid, tum], axis=1)
    return Tensor(imgs), Tensor(target)


class LossLog:
    """Plain-text loss curve: one `step,lr,loss` line per step."""

    def __init__(self, path):
        self.path = path
        self.lines = []

    def record(self, step, lr, loss):
        self.lines.append(f"{step},{lr:.8g},{loss:.8g}")

    def write(self):
        with open(self.path, "w") as f:
            f.write("\n".join(self.lines) + "\n")


# ---------------------------------------------------------------------------
# step runners

def run_step1(cfg: TrainConfig, manifest_path, out_dir) -> str:
    """Train the base network; returns the checkpoint path."""
    data = load_image_dataset(manifest_path)
    plan = cfg.step1
    if len(data) < 1:
        raise ValueError("empty dataset")
    os.makedirs(out_dir, exist_ok=True)
    if cfg.init_base_from:
        net = load_checkpoint(cfg.init_base_from)
        if net.cfg != cfg.base_cfg():
            raise ValueError("init_base_from checkpoint config mismatch")
    else:
        net = build_network(cfg.base_cfg(),
                            np.random.default_rng([cfg.seed, 1]))
    sch = cfg.schedule(plan)
    log = LossLog(os.path.join(out_dir, "loss_step1.csv"))
    for step in range(plan.steps):
        rng = np.random.default_rng([cfg.seed, 1, step])
        idx = rng.integers(len(data), size=plan.batch)
        examples = [_augmented_patch(*data[i], cfg.patch, cfg.aug, rng)
                    for i in idx]
        x, target = _batch_tensors(examples, net.cfg.np_dtype)
        net.params.zero_grad()
        out = forward(net, x)
        loss = step1_loss(out, target, cfg.loss)
        loss.backward()
        lr = lr_at(step, sch)
        sgd_update(net.params, lr, cfg.optim)
        log.record(step, lr, loss.item())
    log.write()
    path = os.path.join(out_dir, "base.ckpt")
    save_checkpoint(path, net)
    return path


def run_step2(cfg: TrainConfig, synth_dir, out_dir) -> str:
    """Train the protuberance detector on degraded synthetic masks."""
    pairs = load_synth_dataset(synth_dir)
    plan = cfg.step2
    os.makedirs(out_dir, exist_ok=True)
    net = build_network(cfg.prot_cfg(), np.random.default_rng([cfg.seed, 2]))
    sch = cfg.schedule(plan)
    log = LossLog(os.path.join(out_dir, "loss_step2.csv"))
    for step in range(plan.steps):
        rng = np.random.default_rng([cfg.seed, 2, step])
        idx = rng.integers(len(pairs), size=plan.batch)
        xs, ts = [], []
        for i in idx:
            inp, tgt = pairs[i]
            soft = synthgen.augment_step2_input(inp, cfg.step2_aug, rng)
            xs.append(soft.data)
            ts.append(tgt.data)
        x = Tensor(np.stack(xs)[:, None].astype(net.cfg.np_dtype))
        t = Tensor(np.stack(ts)[:, None].astype(net.cfg.np_dtype))
        net.params.zero_grad()
        out = forward(net, x)
        loss = step2_loss(out, t)
        loss.backward()
        lr = lr_at(step, sch)
        sgd_update(net.params, lr, cfg.optim)
        log.record(step, lr, loss.item())
    log.write()
    path = os.path.join(out_dir, "prot.ckpt")
    save_checkpoint(path, net)
    return path


def _three_net_forward(base: Network, prot: Network, fusion: Network,
                       x: Tensor):
    """Full pipeline forward; returns (base_out, prot_out, fusion_out)."""
    base_out = forward(base, x)
    kidney_p = narrow_channels(base_out, 0, 1)
    tumor_p = narrow_channels(base_out, 1, 2)
    prot_out = forward(prot, kidney_p)
    fusion_in = fuse(tumor_p, prot_out, x)
    fusion_out = forward(fusion, fusion_in)
    return base_out, prot_out, fusion_out


def run_step3(cfg: TrainConfig, manifest_path, base_ckpt, prot_ckpt,
              out_dir) -> dict:
    """Joint training with the protuberance parameters frozen; returns
    paths of the three emitted checkpoints."""
    data = load_image_dataset(manifest_path)
    plan = cfg.step3
    os.makedirs(out_dir, exist_ok=True)
    base = load_checkpoint(base_ckpt)
    prot = load_checkpoint(prot_ckpt)
    if base.cfg != cfg.base_cfg() or prot.cfg != cfg.prot_cfg():
        raise ValueError("checkpoint/config mismatch")
    prot.params.freeze_all()
    fusion = build_network(cfg.fusion_cfg(),
                           np.random.default_rng([cfg.seed, 3]))
    sch = cfg.schedule(plan)
    log = LossLog(os.path.join(out_dir, "loss_step3.csv"))
    for step in range(plan.steps):
        rng = np.random.default_rng([cfg.seed, 3, step])
        idx = rng.integers(len(data), size=plan.batch)
        examples = [_augmented_patch(*data[i], cfg.patch, cfg.aug, rng)
                    for i in idx]
        x, target = _batch_tensors(examples, base.cfg.np_dtype)
        for ps in (base.params, prot.params, fusion.params):
            ps.zero_grad()
        base_out, _, fusion_out = _three_net_forward(base, prot, fusion, x)
        loss = step3_loss(fusion_out, base_out, target, cfg.loss)
        loss.backward()
        lr = lr_at(step, sch)
        sgd_update(base.params, lr, cfg.optim)
        sgd_update(prot.params, lr, cfg.optim)   # no-op: all frozen
        sgd_update(fusion.params, lr, cfg.optim)
        log.record(step, lr, loss.item())
    log.write()
    paths = {
        "base": os.path.join(out_dir, "base.ckpt"),
        "prot": os.path.join(out_dir, "prot.ckpt"),
        "fusion": os.path.join(out_dir, "fusion.ckpt"),
    }
    save_checkpoint(paths["base"], base)
    save_checkpoint(paths["prot"], prot)
    save_checkpoint(paths["fusion"], fusion)
    return paths


# ---------------------------------------------------------------------------
# inference

def _tile_origins(n: int, patch: int) -> list[int]:
    """Start offsets covering [0, n) with 50% overlap."""
    if n <= patch:
        return [0]
    starts = list(range(0, n - patch + 1, patch // 2))
    if starts[-1] != n - patch:
        starts.append(n - patch)
    return starts


def infer(ckpts: dict, image: Volume, patch: int | None = None,
          threshold: float = 0.5) -> dict:
    """Run prediction; returns {"kidney": Mask, "tumor": Mask}.

    ckpts maps role -> checkpoint path and needs at least "base"; with
    "prot" and "fusion" present the tumor mask comes from the fusion
    network, otherwise from the base network (step-1 baseline).
    """
    base = load_checkpoint(ckpts["base"])
    full = "prot" in ckpts and "fusion" in ckpts
    prot = load_checkpoint(ckpts["prot"]) if full else None
    fusion = load_checkpoint(ckpts["fusion"]) if full else None
    depth = base.cfg.num_downsamplings
    if patch is None:
        patch = min(image.dims)
    if patch % (2 ** depth):
        raise ValueError(f"patch {patch} not divisible by 2^{depth}")

    dims = image.dims
    pad_dims = tuple(max(n, patch) for n in dims)
    img = np.zeros(pad_dims, dtype=np.float32)
    img[: dims[0], : dims[1], : dims[2]] = image.data

    acc_k = np.zeros(pad_dims, dtype=np.float64)
    acc_t = np.zeros(pad_dims, dtype=np.float64)
    weight = np.zeros(pad_dims, dtype=np.float64)
    origins = [_tile_origins(n, patch) for n in pad_dims]
    for oz in origins[0]:
        for oy in origins[1]:
            for ox in origins[2]:
                sl = (slice(oz, oz + patch), slice(oy, oy + patch),
                      slice(ox, ox + patch))
                x = Tensor(img[sl][None, None].astype(base.cfg.np_dtype))
                if full:
                    base_out, _, fusion_out = _three_net_forward(
                        base, prot, fusion, x)
                    kp = base_out.data[0, 0]
                    tp = fusion_out.data[0, 0]
                else:
                    base_out = forward(base, x)
                    kp = base_out.data[0, 0]
                    tp = base_out.data[0, 1]
                acc_k[sl] += kp
                acc_t[sl] += tp
                weight[sl] += 1.0
    acc_k /= weight
    acc_t /= weight
    kidney = (acc_k[: dims[0], : dims[1], : dims[2]] >= threshold)
    tumor = (acc_t[: dims[0], : dims[1], : dims[2]] >= threshold)
    return {
        "kidney": Mask(kidney.astype(np.uint8), image.spacing),
        "tumor": Mask(tumor.astype(np.uint8), image.spacing),
    }
