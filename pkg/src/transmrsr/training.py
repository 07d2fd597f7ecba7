"""Stage-two super-resolution training, checkpoints, evaluation and inference."""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, seed_streams
from .losses import LossWeights, PerceptualBackbone, psnr, ssim, tissue_dice, total_loss
from .model import AblationFlags, ModelConfig, TransMRSRNet, get_profile, restore_volume
from .prior import CentroidBank, DivergenceError, GanState
from .volume import (AXES, PLANES, SlicePair, Volume, augment, crop, degrade_volume,
                     take_slice, write_pgm, write_volume)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "transmrsr-sr-1"


def stack_pairs(pairs: list[SlicePair]):
    lr = torch.from_numpy(np.stack([p.lr for p in pairs])[:, None])
    hr = torch.from_numpy(np.stack([p.hr for p in pairs])[:, None])
    return lr, hr


def build_model(config: TrainConfig, prior: GanState | None = None, bank: CentroidBank | None = None,
                model_config: ModelConfig | None = None) -> TransMRSRNet:
    flags = config.flags
    if flags.use_gp and prior is None:
        raise ValueError("use_gp needs a pretrained prior")
    if flags.use_sdt and bank is None:
        raise ValueError("use_sdt needs a centroid bank")
    mcfg = model_config or (prior.generator.cfg if prior is not None else get_profile(config.profile))
    torch.manual_seed(seed_streams(config.seed)["init"])
    model = TransMRSRNet(mcfg, flags, config.phi, n_centroids=bank.n_clusters if bank else 8)
    if flags.use_gp:
        model.load_prior(prior.generator)
    if flags.use_sdt:
        model.set_centroids(bank.centers)
    if config.freeze_prior:
        for name, p in model.decoder.named_parameters():
            if not name.startswith("cwss."):
                p.requires_grad_(False)
    return model


def make_backbone(config: TrainConfig) -> PerceptualBackbone:
    return PerceptualBackbone(width=config.backbone_width, seed=0)


def validation_psnr(model: TransMRSRNet, pairs: list[SlicePair], batch_size: int = 16) -> float:
    """Mean PSNR over pairs, clamped SR against HR inside each slice's pad box."""
    if not pairs:
        return float("nan")
    lr, _ = stack_pairs(pairs)
    sr = model.predict(lr, batch_size=batch_size).numpy()[:, 0]
    return float(np.mean([psnr(crop(s, p.pad_box), crop(p.hr, p.pad_box)) for s, p in zip(sr, pairs)]))


def interpolation_psnr(pairs: list[SlicePair]) -> float:
    return float(np.mean([psnr(crop(p.lr, p.pad_box), crop(p.hr, p.pad_box)) for p in pairs]))


@dataclass
class TrainResult:
    model: TransMRSRNet
    history: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    best_psnr: float = float("-inf")
    best_epoch: int = -1
    stopped_early: bool = False
    checkpoint: Path | None = None


class EarlyStopping:
    """Stop once the best metric has not improved by more than ``delta`` for ``patience`` epochs."""

    def __init__(self, delta: float = 0.05, patience: int = 10):
        self.delta, self.patience = delta, patience
        self.best = float("-inf")
        self.bad_epochs = 0

    def update(self, value: float) -> bool:
        """Record one epoch's metric; returns True when training should stop."""
        if value > self.best + self.delta:
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        self.best = max(self.best, value)
        return self.bad_epochs >= self.patience

    def state(self):
        return {"best": self.best, "bad_epochs": self.bad_epochs}

    def load(self, state):
        self.best, self.bad_epochs = state["best"], state["bad_epochs"]


def save_checkpoint(path, model, config, optimizer=None, epoch=0, history=(), stopper=None,
                    best_state=None, best_epoch=-1, step=0):
    blob = {
        "format": CHECKPOINT_FORMAT,
        "model_config": asdict(model.cfg),
        "flags": asdict(model.flags),
        "phi": model.phi,
        "train_config": config.to_dict(),
        "model": model.state_dict(),
        "best_model": best_state if best_state is not None else model.state_dict(),
        "best_epoch": best_epoch,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "step": step,
        "history": list(history),
        "early_stop": stopper.state() if stopper is not None else None,
    }
    torch.save(blob, path)


def read_checkpoint(path) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    return blob


def load_model(path, which: str = "best_model") -> tuple[TransMRSRNet, TrainConfig]:
    blob = read_checkpoint(path)
    cfg = ModelConfig.from_dict(blob["model_config"])
    flags = AblationFlags(**blob["flags"])
    state = blob[which]
    n_centroids = state["centroids"].shape[0] if "centroids" in state else 8
    model = TransMRSRNet(cfg, flags, blob["phi"], n_centroids=n_centroids)
    model.load_state_dict(state)
    model.eval()
    return model, TrainConfig.from_dict(blob["train_config"])


def train_sr(config: TrainConfig, train_pairs: list[SlicePair], val_pairs: list[SlicePair] = (),
             prior: GanState | None = None, bank: CentroidBank | None = None, checkpoint_dir=None,
             resume=None, model_config: ModelConfig | None = None, backbone=None) -> TrainResult:
    """Adam with step decay and PSNR-based early stopping; keeps the best-validation weights."""
    if not train_pairs:
        raise ValueError("no training pairs")
    streams = seed_streams(config.seed)
    model = build_model(config, prior, bank, model_config)
    backbone = backbone or make_backbone(config)
    weights = LossWeights(config.lambda_recon, config.lambda_cont, config.lambda_style)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.lr, betas=(config.adam_beta1, config.adam_beta2))
    stopper = EarlyStopping(config.early_stop_delta, config.early_stop_patience)
    result = TrainResult(model)
    start_epoch, step, best_state = 0, 0, None
    if resume is not None:
        blob = read_checkpoint(resume)
        model.load_state_dict(blob["model"])
        opt.load_state_dict(blob["optimizer"])
        start_epoch, step = blob["epoch"], blob["step"]
        result.history = list(blob["history"])
        stopper.load(blob["early_stop"])
        best_state, result.best_epoch = blob["best_model"], blob["best_epoch"]
        result.best_psnr = stopper.best
    ckdir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)

    n = len(train_pairs)
    for epoch in range(start_epoch, config.max_epochs):
        for group in opt.param_groups:
            group["lr"] = config.lr_at(epoch)
        order = np.random.default_rng([streams["data"], epoch]).permutation(n)
        model.train()
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = [augment(train_pairs[i], np.random.default_rng([streams["augment"], epoch, int(i)]))
                     if config.augment else train_pairs[i] for i in idx]
            lr_img, hr_img = stack_pairs(batch)
            sr, _ = model(lr_img)
            loss, parts = total_loss(sr, hr_img, backbone, weights, normalize_gram=not config.exact_gram)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}: {parts}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            opt.step()
            step += 1
            epoch_losses.append(loss.item())
            result.step_losses.append(epoch_losses[-1])
            if config.max_steps and step >= config.max_steps:
                break
        val = validation_psnr(model, list(val_pairs)) if val_pairs else float("nan")
        entry = {"epoch": epoch, "lr": config.lr_at(epoch), "loss": float(np.mean(epoch_losses)),
                 "val_psnr": val, "steps": step}
        result.history.append(entry)
        log.info("epoch %d lr %.3g loss %.5f val_psnr %.3f", epoch, entry["lr"], entry["loss"], val)
        stop = False
        if val_pairs:
            improved = val > stopper.best
            stop = stopper.update(val)
            if improved:
                best_state = copy.deepcopy(model.state_dict())
                result.best_epoch = epoch
        else:
            best_state, result.best_epoch = copy.deepcopy(model.state_dict()), epoch
        result.best_psnr = stopper.best
        if ckdir:
            save_checkpoint(ckdir / "last.pt", model, config, opt, epoch + 1, result.history,
                            stopper, best_state, result.best_epoch, step)
        if stop:
            result.stopped_early = True
            break
        if config.max_steps and step >= config.max_steps:
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    if ckdir:
        result.checkpoint = ckdir / "best.pt"
        save_checkpoint(result.checkpoint, model, config, None, epoch + 1, result.history,
                        stopper, best_state, result.best_epoch, step)
    model.eval()
    return result


# --- evaluation / inference -----------------------------------------------------

def evaluate_volumes(sr_volumes, hr_volumes, r: int, plane: str = "x-z", ids=None, masks=None) -> list[dict]:
    """Per-volume mean slice PSNR/SSIM (+ tissue Dice) and a final ``mean`` row.

    ``masks`` is an optional list of ``(seg_of_sr, seg_of_hr)`` label volumes.
    """
    if len(sr_volumes) != len(hr_volumes):
        raise ValueError("need one restored volume per reference volume")
    if masks is not None and len(masks) != len(hr_volumes):
        raise ValueError("need one mask pair per volume")
    ids = ids or [f"vol{i:03d}" for i in range(len(hr_volumes))]
    rows = []
    for k, (sr, hr) in enumerate(zip(sr_volumes, hr_volumes)):
        if sr.dims != hr.dims:
            raise ValueError(f"{ids[k]}: restored dims {sr.dims} != reference dims {hr.dims}")
        ps, ss = [], []
        for i in range(hr.dims[AXES[PLANES[plane]]]):
            h = take_slice(hr.data, plane, i)
            if h.max() == 0:
                continue
            s = np.clip(take_slice(sr.data, plane, i), 0.0, 1.0)
            ps.append(psnr(s, h))
            ss.append(ssim(s, h))
        row = {"volume_id": ids[k], "plane": plane, "scale": r,
               "psnr": float(np.mean(ps)), "ssim": float(np.mean(ss))}
        if masks is not None:
            a, b = masks[k]
            row.update(tissue_dice(getattr(a, "data", a), getattr(b, "data", b)))
        rows.append(row)
    mean = {"volume_id": "mean", "plane": plane, "scale": r}
    for key in ("psnr", "ssim", "dice_w", "dice_g", "dice_csf", "dice_avg"):
        if rows and key in rows[0]:
            mean[key] = float(np.mean([row[key] for row in rows]))
    rows.append(mean)
    return rows


def evaluate(model: TransMRSRNet, hr_volumes, r: int, plane: str = "x-z", axis: str = "z",
             ids=None, masks=None) -> list[dict]:
    restored = [restore_volume(degrade_volume(v, r, axis), r, axis, model, plane, target_len=v.dims[AXES[axis]])
                for v in hr_volumes]
    return evaluate_volumes(restored, hr_volumes, r, plane, ids, masks)


def infer(model: TransMRSRNet, volume_in: Volume, r: int, out_path, plane: str = "x-z", axis: str = "z",
          target_len: int | None = None, emit_slices=None, hr: Volume | None = None) -> Volume:
    """Restore a thick-slice volume, write it as TMRV1 and optionally per-slice PGMs."""
    out = restore_volume(volume_in, r, axis, model, plane, target_len=target_len)
    out_path = Path(out_path)
    try:
        write_volume(out, out_path)
    except OSError as e:
        raise OSError(f"cannot write restored volume to {out_path}: {e}") from e
    if emit_slices is not None:
        d = Path(emit_slices)
        d.mkdir(parents=True, exist_ok=True)
        if hr is not None and hr.dims != out.dims:
            raise ValueError(f"reference dims {hr.dims} != restored dims {out.dims}")
        for i in range(out.dims[AXES[PLANES[plane]]]):
            sl = take_slice(out.data, plane, i)
            write_pgm(sl, d / f"slice_{i:04d}.pgm")
            if hr is not None:
                write_pgm(np.abs(sl - take_slice(hr.data, plane, i)), d / f"error_{i:04d}.pgm")
    return out
