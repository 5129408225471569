"""Command-line surface binding all modules together."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import evalmetrics, pipeline, synthgen, training
from .volume import read_pvol, write_pvol


def _cmd_gen_synth(args) -> int:
    synthgen.generate_dataset(args.n, args.seed, args.out, grid=args.grid,
                              threads=args.threads)
    print(f"wrote {args.n} samples to {args.out}")
    return 0


def _cmd_make_phantoms(args) -> int:
    cfg = pipeline.PhantomConfig(grid=args.grid, p_iso=args.p_iso)
    pipeline.make_phantom_dataset(args.n_train, args.n_test, args.seed,
                                  args.out, cfg, threads=args.threads)
    print(f"wrote {args.n_train}+{args.n_test} phantoms to {args.out}")
    return 0


def _cmd_preprocess(args) -> int:
    cfg = pipeline.PreprocessConfig(target_spacing=args.spacing)
    v = read_pvol(args.image)
    write_pvol(args.out, pipeline.preprocess(v, cfg))
    print(f"preprocessed {args.image} -> {args.out}")
    return 0


def _load_train_config(args) -> training.TrainConfig:
    if args.config:
        cfg = training.TrainConfig.from_file(args.config)
    else:
        cfg = training.TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _cmd_train_step1(args) -> int:
    cfg = _load_train_config(args)
    path = training.run_step1(cfg, args.manifest, args.out)
    print(f"step 1 checkpoint: {path}")
    return 0


def _cmd_train_step2(args) -> int:
    cfg = _load_train_config(args)
    path = training.run_step2(cfg, args.synth_dir, args.out)
    print(f"step 2 checkpoint: {path}")
    return 0


def _cmd_train_step3(args) -> int:
    cfg = _load_train_config(args)
    paths = training.run_step3(cfg, args.manifest, args.base_ckpt,
                               args.prot_ckpt, args.out)
    print(f"step 3 checkpoints: {json.dumps(paths)}")
    return 0


def _cmd_infer(args) -> int:
    ckpts = {"base": os.path.join(args.ckpt_dir, "base.ckpt")}
    for role in ("prot", "fusion"):
        p = os.path.join(args.ckpt_dir, f"{role}.ckpt")
        if os.path.exists(p):
            ckpts[role] = p
    if args.base_only:
        ckpts = {"base": ckpts["base"]}
    image = read_pvol(args.image)
    masks = training.infer(ckpts, image, patch=args.patch)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.image))[0]
    for role, m in masks.items():
        write_pvol(os.path.join(args.out, f"{stem}_{role}.pvol"), m)
    print(f"wrote predictions for {stem} to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    report = evalmetrics.evaluate_set(args.pred, args.gt, args.out)
    print(json.dumps({k: report[k] for k in
                      ("mean_tumor_dice", "sensitivity", "fps_per_image")}))
    return 0


def _cmd_grad_check(args) -> int:
    # small random probes over every differentiable op plus a whole network
    from .tensornet import (Tensor, NetworkConfig, build_network, forward,
                            conv3d, maxpool3d, upsample2x, sigmoid, tsum, mul)
    rng = np.random.default_rng(args.seed or 0)
    failures = 0

    def probe(name, fn, tensors, tol):
        nonlocal failures
        out = fn(*tensors)
        proj = Tensor(rng.standard_normal(out.shape))
        loss = tsum(mul(out, proj))
        for t in tensors:
            t.grad = None
        loss.backward()
        worst = 0.0
        eps = 1e-6
        for t in tensors:
            flat = t.data.ravel()
            for i in rng.choice(flat.size, size=min(8, flat.size),
                                replace=False):
                orig = flat[i]
                flat[i] = orig + eps
                up = float(np.sum(fn(*tensors).data * proj.data))
                flat[i] = orig - eps
                down = float(np.sum(fn(*tensors).data * proj.data))
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                analytic = t.grad.ravel()[i]
                err = abs(analytic - numeric) / max(
                    abs(analytic) + abs(numeric), 1e-8)
                worst = max(worst, err)
        ok = worst < tol
        failures += not ok
        print(f"{name}: max rel err {worst:.3g} "
              f"({'ok' if ok else 'FAIL'}, tol {tol})")

    def t(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    x, w, b = t(1, 2, 8, 8, 8), t(3, 2, 3, 3, 3), t(3)
    probe("conv3d", lambda x, w, b: conv3d(x, w, b), [x, w, b], 1e-4)
    probe("conv3d_s2", lambda x, w, b: conv3d(x, w, b, 2), [x, w, b], 1e-4)
    probe("maxpool3d", maxpool3d, [t(1, 2, 4, 4, 4)], 1e-4)
    probe("upsample2x", upsample2x, [t(1, 2, 4, 4, 4)], 1e-4)
    probe("sigmoid", sigmoid, [t(4, 4)], 1e-4)

    cfg = NetworkConfig(1, 2, 4, 2, ("kidney", "tumor"), "float64")
    net = build_network(cfg, rng)
    xin = Tensor(rng.standard_normal((1, 1, 8, 8, 8)))
    names = net.params.names()
    worst = 0.0
    proj = Tensor(rng.standard_normal((1, 2, 8, 8, 8)))
    net.params.zero_grad()
    loss = tsum(mul(forward(net, xin), proj))
    loss.backward()
    for _ in range(10):
        name = names[rng.integers(len(names))]
        tt = net.params.params[name]
        flat = tt.data.ravel()
        i = int(rng.integers(flat.size))
        eps = 1e-6
        orig = flat[i]
        flat[i] = orig + eps
        up = float(np.sum(forward(net, xin).data * proj.data))
        flat[i] = orig - eps
        down = float(np.sum(forward(net, xin).data * proj.data))
        flat[i] = orig
        numeric = (up - down) / (2 * eps)
        analytic = tt.grad.ravel()[i]
        err = abs(analytic - numeric) / max(abs(analytic) + abs(numeric),
                                            1e-8)
        worst = max(worst, err)
    ok = worst < 1e-3
    failures += not ok
    print(f"network: max rel err {worst:.3g} "
          f"({'ok' if ok else 'FAIL'}, tol 1e-3)")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protuberseg",
        description="Protuberance-aware kidney tumor segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate the synthetic "
                       "protuberance mask dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=_cmd_gen_synth)

    p = sub.add_parser("make-phantoms", help="generate phantom images with "
                       "ground-truth masks")
    p.add_argument("--n-train", type=int, required=True)
    p.add_argument("--n-test", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=int, default=32)
    p.add_argument("--p-iso", type=float, default=0.5)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(fn=_cmd_make_phantoms)

    p = sub.add_parser("preprocess", help="resample + clip + normalize an "
                       "image volume")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--spacing", type=float, default=1.0)
    p.set_defaults(fn=_cmd_preprocess)

    for step, fn in (("1", _cmd_train_step1), ("2", _cmd_train_step2),
                     ("3", _cmd_train_step3)):
        p = sub.add_parser(f"train-step{step}")
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True)
        if step in ("1", "3"):
            p.add_argument("--manifest", required=True,
                           help="image dataset manifest.json")
        if step == "2":
            p.add_argument("--synth-dir", required=True)
        if step == "3":
            p.add_argument("--base-ckpt", required=True)
            p.add_argument("--prot-ckpt", required=True)
        p.set_defaults(fn=fn)

    p = sub.add_parser("infer", help="predict kidney and tumor masks")
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch", type=int, default=None)
    p.add_argument("--base-only", action="store_true",
                   help="ignore protuberance/fusion checkpoints")
    p.set_defaults(fn=_cmd_infer)

    p = sub.add_parser("eval", help="lesion-level evaluation of predictions")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference checks of all "
                       "differentiable ops")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
