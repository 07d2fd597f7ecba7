"""Command line entry point: ``transmrsr <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, build_config, seed_streams
from .losses import write_metrics_csv
from .model import get_profile
from .phantoms import PhantomSpec, make_phantom
from .prior import CentroidBank, DivergenceError, GanState, PretrainConfig, build_centroid_bank, pretrain
from .volume import (AXES, PLANES, Volume, VolumeError, degrade_volume, extract_pairs, pad_to,
                     read_volume, simulate_lr, take_slice, write_volume)

log = logging.getLogger("transmrsr")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class DataError(Exception):
    pass


def _root_seed(arg):
    if arg is not None:
        return arg
    env = os.environ.get("TMRSR_SEED")
    try:
        return int(env) if env else 0
    except ValueError:
        raise ConfigError(f"TMRSR_SEED must be an integer, got {env!r}") from None


def _volume_files(path, labels: bool = False) -> list[Path]:
    # directories hold images and their .labels.tmrv masks side by side
    p = Path(path)
    if p.is_dir():
        files = [f for f in sorted(p.glob("*.tmrv")) if f.name.endswith(".labels.tmrv") == labels]
    else:
        files = [p]
    if not files:
        raise DataError(f"no .tmrv volumes under {path}")
    for f in files:
        if not f.exists():
            raise DataError(f"missing volume {f}")
    return files


def _load_volumes(path):
    files = _volume_files(path)
    return files, [read_volume(f) for f in files]


def cmd_phantoms(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = PhantomSpec(dims=tuple(args.dims), n_ellipsoids=args.n_ellipsoids, seed=_root_seed(args.seed))
    for i in range(args.count):
        vol, labels = make_phantom(spec, i)
        write_volume(vol, out / f"phantom_{i:03d}.tmrv")
        if args.labels:
            write_volume(Volume(labels.astype(np.float32)), out / f"phantom_{i:03d}.labels.tmrv")
    log.info("wrote %d phantoms to %s", args.count, out)


def cmd_degrade(args):
    v = read_volume(args.input)
    if args.interpolate:
        out = simulate_lr(v, args.r, args.axis, mode=args.mode)
    else:
        out = degrade_volume(v, args.r, args.axis, mode=args.mode)
    write_volume(out, args.out)


def _hr_slices(volumes, size):
    imgs = []
    for v in volumes:
        for plane, axis in PLANES.items():
            for i in range(v.dims[AXES[axis]]):
                s = take_slice(v.data, plane, i)
                if s.max() > 0 and max(s.shape) <= size:
                    imgs.append(pad_to(s, size)[0])
    if not imgs:
        raise DataError("no usable HR slices for pretraining")
    return np.stack(imgs)


def cmd_pretrain(args):
    cfg = get_profile(args.profile)
    _, vols = _load_volumes(args.data)
    images = _hr_slices(vols, cfg.image_size)
    seed = _root_seed(args.seed)
    pcfg = PretrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr,
                          sample_every=args.sample_every, seed=seed_streams(seed)["init"])
    state = pretrain(images, cfg, pcfg, sample_dir=args.samples)
    state.save(args.out)
    log.info("pretrained %d steps on %d slices -> %s", state.step, len(images), args.out)


def cmd_cluster(args):
    gan = GanState.load(args.checkpoint)
    rng = np.random.default_rng(seed_streams(_root_seed(args.seed))["latent"])
    bank = build_centroid_bank(gan, args.m, args.n, rng)
    bank.save(args.out)
    log.info("wrote %d centers (dim %d) -> %s", bank.n_clusters, bank.latent_dim, args.out)


def _pairs(volumes, files, cfg, size):
    pairs = []
    for f, v in zip(files, volumes):
        pairs += extract_pairs(v, cfg.scale_r, cfg.plane, cfg.axis, pad_size=size, volume_id=f.stem)
    return pairs


def cmd_train(args):
    from .training import train_sr
    overrides = {k: getattr(args, k) for k in
                 ("lr", "batch_size", "max_epochs", "max_steps", "phi", "seed", "profile", "plane", "axis",
                  "use_gp", "use_sdt", "use_mref", "use_sc", "backbone_width", "freeze_prior")}
    overrides["scale_r"] = args.r
    cfg = build_config(args.config, **overrides)
    prior = GanState.load(args.prior) if args.prior else None
    bank = CentroidBank.load(args.bank) if args.bank else None
    mcfg = prior.generator.cfg if prior else get_profile(cfg.profile)
    tf, tv = _load_volumes(args.train)
    train_pairs = _pairs(tv, tf, cfg, mcfg.image_size)
    val_pairs = []
    if args.val:
        vf, vv = _load_volumes(args.val)
        val_pairs = _pairs(vv, vf, cfg, mcfg.image_size)
    try:
        result = train_sr(cfg, train_pairs, val_pairs, prior, bank, checkpoint_dir=args.out,
                          resume=args.resume, model_config=mcfg)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    log.info("best val PSNR %.3f at epoch %d -> %s", result.best_psnr, result.best_epoch, result.checkpoint)


def cmd_infer(args):
    from .training import infer, load_model
    model, tcfg = load_model(args.checkpoint)
    r = args.r or tcfg.scale_r
    v = read_volume(args.input)
    hr = read_volume(args.hr) if args.hr else None
    target = args.target_len or (hr.dims[AXES[args.axis]] if hr else None)
    infer(model, v, r, args.out, args.plane or tcfg.plane, args.axis, target, args.emit_slices, hr)


def cmd_evaluate(args):
    from .training import evaluate, load_model
    model, tcfg = load_model(args.checkpoint)
    r = args.r or tcfg.scale_r
    if r != tcfg.scale_r:
        raise ConfigError(f"checkpoint was trained for x{tcfg.scale_r}, asked to evaluate x{r}")
    files, vols = _load_volumes(args.volumes)
    masks = None
    if args.seg_sr or args.seg_hr:
        if not (args.seg_sr and args.seg_hr):
            raise DataError("Dice needs both --seg-sr and --seg-hr")
        seg_sr, seg_hr = _volume_files(args.seg_sr, True), _volume_files(args.seg_hr, True)
        if len(seg_sr) != len(files) or len(seg_hr) != len(files):
            raise DataError("need one segmentation per evaluated volume")
        masks = [(read_volume(a), read_volume(b)) for a, b in zip(seg_sr, seg_hr)]
    rows = evaluate(model, vols, r, args.plane or tcfg.plane, args.axis, [f.stem for f in files], masks)
    write_metrics_csv(rows, args.out)
    log.info("mean PSNR %.3f SSIM %.4f -> %s", rows[-1]["psnr"], rows[-1]["ssim"], args.out)


def _bool(s):
    v = s.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def build_parser():
    p = argparse.ArgumentParser(prog="transmrsr", description="Brain MRI through-plane super-resolution")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantoms", help="write synthetic head phantoms")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--dims", type=int, nargs=3, default=[64, 64, 64])
    s.add_argument("--n-ellipsoids", type=int, default=4)
    s.add_argument("--labels", action="store_true", help="also write tissue label volumes")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_phantoms)

    s = sub.add_parser("degrade", help="simulate a thick-slice acquisition")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--r", type=int, choices=(1, 4, 8), default=4)
    s.add_argument("--axis", choices=sorted(AXES), default="z")
    s.add_argument("--mode", choices=("decimate", "average"), default="decimate")
    s.add_argument("--interpolate", action="store_true", help="cubic-interpolate back to the HR grid")
    s.set_defaults(func=cmd_degrade)

    s = sub.add_parser("pretrain", help="stage one: train the generative prior")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--profile", default="toy")
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--lr", type=float, default=2e-3)
    s.add_argument("--sample-every", type=int, default=500)
    s.add_argument("--samples", help="directory for sample grids")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("cluster-latents", help="k-means centroid bank over mapped latents")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--m", type=int, default=60000)
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_cluster)

    s = sub.add_parser("train-sr", help="stage two: train the restoration network")
    s.add_argument("--train", required=True)
    s.add_argument("--val")
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--config")
    s.add_argument("--prior")
    s.add_argument("--bank")
    s.add_argument("--resume")
    s.add_argument("--r", type=int, choices=(4, 8))
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--phi", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--profile")
    s.add_argument("--plane", choices=sorted(PLANES))
    s.add_argument("--axis", choices=sorted(AXES))
    s.add_argument("--backbone-width", type=float)
    for flag in ("use-gp", "use-sdt", "use-mref", "use-sc", "freeze-prior"):
        s.add_argument(f"--{flag}", type=_bool)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="restore a thick-slice volume")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--r", type=int)
    s.add_argument("--plane", choices=sorted(PLANES))
    s.add_argument("--axis", choices=sorted(AXES), default="z")
    s.add_argument("--target-len", type=int)
    s.add_argument("--hr", help="reference volume for error maps")
    s.add_argument("--emit-slices", help="directory for per-slice PGMs")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("evaluate", help="PSNR/SSIM (and Dice) of a checkpoint on HR volumes")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--volumes", required=True)
    s.add_argument("--out", required=True, help="metrics CSV")
    s.add_argument("--r", type=int)
    s.add_argument("--plane", choices=sorted(PLANES))
    s.add_argument("--axis", choices=sorted(AXES), default="z")
    s.add_argument("--seg-sr", help="label volumes segmented from restored images")
    s.add_argument("--seg-hr", help="label volumes segmented from HR images")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, VolumeError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"numeric divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
