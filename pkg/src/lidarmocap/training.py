"""End-to-end training: L1 reconstruction with forward kinematics, velocity
and KL terms over scheduled-sampling rollouts of 20 predicted frames.

The corpus is a set of SyncedClips; augmentation expands each base clip
eightfold (mirror times the four headings 0/90/180/270, rotations
re-simulated against the capsule body). Training windows start at cloud
stamps and provide 60 context frames, 21 rollout frames and the clouds the
sampling slots resolve to.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .container import CLOUD_STRIDE, SyncedClip
from .errors import InsufficientFramesError, ShapeError, TrainingDivergenceError
from .model import MotionUpsampler, kl_divergence, renorm_rot6d
from .pointcloud import N_POINTS, group_body_patches, lowest_point_index, remove_outliers, resample_fixed
from .procedural import generate_procedural_corpus
from .simulator import LidarSpec, body_for_skeleton, build_body, mirror_augment, rotate_augment, simulate_clip
from .substrate import ModelConfig, ParameterStore, save_checkpoint, seed_everything

H = 1.0 / 60.0          # frame time, Eq.-level time step


@dataclass(frozen=True)
class LossWeights:
    w_vel: float = 1.0
    w_kl: float = 1.0
    h: float = H

    def __post_init__(self):
        if self.w_vel < 0 or self.w_kl < 0:
            raise ShapeError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    epochs: int = 24
    batch_size: int = 8
    windows_per_epoch: int = 96
    rollout: int = 20               # predicted frames per window
    ramp_fraction: float = 0.5      # scheduled-sampling ramp, fraction of epochs
    val_every: int = 4
    seed: int = 0
    threads: int = 1
    weights: LossWeights = field(default_factory=LossWeights)

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# differentiable forward kinematics
# ---------------------------------------------------------------------------

def rot6d_to_matrix_torch(r6):
    r6n = renorm_rot6d(r6)
    x, y = r6n[..., 0:3], r6n[..., 3:6]
    z = torch.cross(x, y, dim=-1)
    return torch.stack([x, y, z], dim=-1)


def fk_positions_torch(skeleton, joints, roots):
    """Global joint positions, differentiable. joints (..., n_j, 15),
    roots (..., 17) -> (..., n_j, 3)."""
    pos = [roots[..., 0:3]]
    rot = [rot6d_to_matrix_torch(roots[..., 3:9])]
    for j in range(1, skeleton.n_joints):
        p = skeleton.parent_index[j]
        loc_r = rot6d_to_matrix_torch(joints[..., j, 3:9])
        loc_t = joints[..., j, 0:3]
        pos.append(pos[p] + (rot[p] @ loc_t.unsqueeze(-1)).squeeze(-1))
        rot.append(rot[p] @ loc_r)
    return torch.stack(pos, dim=-2)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_reconstruction(x_pred, x_gt, r_pred, r_gt, skeleton, frame_weights=None):
    """L1 over local joint channels, FK global positions and root channels,
    summed over the predicted frames, averaged over the batch."""
    if x_pred.shape != x_gt.shape or r_pred.shape != r_gt.shape:
        raise ShapeError("prediction/target shapes disagree")
    l_local = (x_pred - x_gt).abs().sum(dim=(-1, -2))
    l_fk = (fk_positions_torch(skeleton, x_pred, r_pred)
            - fk_positions_torch(skeleton, x_gt, r_gt)).abs().sum(dim=(-1, -2))
    l_root = (r_pred - r_gt).abs().sum(dim=-1)
    per_frame = l_local + l_fk + l_root                  # (B, F)
    if frame_weights is not None:
        per_frame = per_frame * frame_weights
    return per_frame.sum(dim=-1).mean()


def loss_velocity(x_pred, x_gt, r_pred, r_gt, x_ctx, r_ctx, skeleton,
                  h=H, frame_weights=None):
    """L1 of backward-difference velocities of local channels, FK positions
    and root channels; the first predicted frame differences against the
    context frame (the last frame the generator conditioned on)."""
    if x_pred.shape[-3] < 1:
        raise InsufficientFramesError("need at least one predicted frame")
    xp = torch.cat([x_ctx.unsqueeze(-3), x_pred], dim=-3)
    xg = torch.cat([x_ctx.unsqueeze(-3), x_gt], dim=-3)
    rp = torch.cat([r_ctx.unsqueeze(-2), r_pred], dim=-2)
    rg = torch.cat([r_ctx.unsqueeze(-2), r_gt], dim=-2)

    def vel(seq, dim):
        return (seq.narrow(dim, 1, seq.shape[dim] - 1)
                - seq.narrow(dim, 0, seq.shape[dim] - 1)) / h

    l_local = (vel(xp, -3) - vel(xg, -3)).abs().sum(dim=(-1, -2))
    fp = fk_positions_torch(skeleton, xp, rp)
    fg = fk_positions_torch(skeleton, xg, rg)
    l_fk = (vel(fp, -3) - vel(fg, -3)).abs().sum(dim=(-1, -2))
    l_root = (vel(rp, -2) - vel(rg, -2)).abs().sum(dim=-1)
    per_frame = l_local + l_fk + l_root
    if frame_weights is not None:
        per_frame = per_frame * frame_weights
    return per_frame.sum(dim=-1).mean()


def loss_kl(mu, logvar):
    if not torch.all(torch.isfinite(logvar)):
        raise ShapeError("non-finite log-variance")
    return kl_divergence(mu, logvar)


def total_loss(rec, vel, kl, weights=LossWeights()):
    return rec + weights.w_vel * vel + weights.w_kl * kl


# ---------------------------------------------------------------------------
# corpus synthesis and augmentation
# ---------------------------------------------------------------------------

def synthesize_corpus(seed, n_subjects, clips_per_subject, base_skeleton,
                      spec=None, val_subjects=1):
    """Simulated corpus with per-subject bodies; the last val_subjects
    subjects are held out. Returns (train_clips, val_clips)."""
    spec = spec or LidarSpec()
    rng = np.random.default_rng(seed)
    train, val = [], []
    for s in range(n_subjects):
        beta = rng.uniform(-2, 2, size=10)
        body = build_body(beta, base_skeleton)
        clips = generate_procedural_corpus(int(rng.integers(2 ** 31)),
                                           clips_per_subject, body.skeleton)
        bucket = val if s >= n_subjects - val_subjects else train
        for c, clip in enumerate(clips):
            synced = simulate_clip(body, clip, spec,
                                   provenance={"subject": s, "clip": c, "seed": seed})
            bucket.append(synced)
    return train, val


def augment_corpus(clips, spec=None):
    """Mirror x {0, 90, 180, 270} degrees: 8 variants per clip."""
    spec = spec or LidarSpec()
    out = []
    for synced in clips:
        body = body_for_synced(synced)
        rotations = [synced] + [rotate_augment(synced, body, spec, a)
                                for a in (90, 180, 270)]
        for r in rotations:
            out.append(r)
            out.append(mirror_augment(r))
    return out


def body_for_synced(synced):
    beta = np.array(synced.provenance.get("shape", np.zeros(10)))
    return body_for_skeleton(synced.skeleton, beta)


# ---------------------------------------------------------------------------
# training windows
# ---------------------------------------------------------------------------

def preprocess_cloud(points, seed):
    """The runtime preprocessing: outlier filter then fixed-size resample."""
    if points.shape[0] > 9:
        points = remove_outliers(points, 8, 2.0)
    return resample_fixed(points, rng_seed=seed)


class WindowDataset:
    """Precomputed patch banks plus window indexing over a clip list.

    A window at (clip, i) supplies motion frames i-59..i+21 and the clouds
    the sampling slots resolve to; i is a cloud stamp so rollout
    currents stay aligned with arrivals.
    """

    def __init__(self, clips, cfg):
        self.cfg = cfg
        self.clips = clips
        self.patches = []
        self.centers = []
        for ci, clip in enumerate(clips):
            pk, ck = [], []
            for idx, pts in clip.clouds:
                fixed = preprocess_cloud(pts.astype(np.float64), seed=hash((ci, idx)) % (2 ** 31))
                group = group_body_patches(fixed, cfg.n_groups, cfg.patch_k,
                                           lowest_point_index(fixed))
                pk.append(group.patches.astype(np.float32))
                ck.append(group.centers.astype(np.float32))
            self.patches.append(np.stack(pk))
            self.centers.append(np.stack(ck))
        self.rollout_steps = -(-cfg.rollout // cfg.horizon)     # ceil
        span = self.rollout_steps * cfg.horizon
        self.windows = []
        for ci, clip in enumerate(clips):
            last = clip.n_frames - 1 - span
            for i in range(60, last + 1, CLOUD_STRIDE):
                self.windows.append((ci, i))
        if not self.windows:
            raise InsufficientFramesError("no clip is long enough for a rollout window")

    def slot_stamps(self, current):
        """Ideal stride-s stamps and the cloud stamps they resolve to."""
        s = self.cfg.stride
        ideal = [current - m * s for m in range(5, -1, -1)]
        return [(t // CLOUD_STRIDE) * CLOUD_STRIDE for t in ideal]

    def gather(self, window_ids):
        """Batch tensors for a list of window ids."""
        cfg = self.cfg
        b = len(window_ids)
        steps = self.rollout_steps
        gt_j = np.empty((b, 60 + steps * 3, cfg.n_joints, 15), dtype=np.float32)
        gt_r = np.empty((b, 60 + steps * 3, 17), dtype=np.float32)
        slot_p = np.empty((b, steps, 6, cfg.n_groups, cfg.patch_k, 3), dtype=np.float32)
        slot_c = np.empty((b, steps, 6, cfg.n_groups, 3), dtype=np.float32)
        fut_p = np.empty((b, steps, cfg.n_groups, cfg.patch_k, 3), dtype=np.float32)
        fut_c = np.empty((b, steps, cfg.n_groups, 3), dtype=np.float32)
        for n, wid in enumerate(window_ids):
            ci, i = self.windows[wid]
            clip = self.clips[ci]
            gt_j[n] = clip.joints[i - 59:i + steps * 3 + 1]
            gt_r[n] = clip.roots[i - 59:i + steps * 3 + 1]
            for k in range(steps):
                cur = i + 3 * k
                for m, stamp in enumerate(self.slot_stamps(cur)):
                    slot_p[n, k, m] = self.patches[ci][stamp // 3]
                    slot_c[n, k, m] = self.centers[ci][stamp // 3]
                fut_p[n, k] = self.patches[ci][(cur + 3) // 3]
                fut_c[n, k] = self.centers[ci][(cur + 3) // 3]
        t = torch.from_numpy
        return dict(gt_joints=t(gt_j), gt_roots=t(gt_r),
                    slot_patches=t(slot_p), slot_centers=t(slot_c),
                    fut_patches=t(fut_p), fut_centers=t(fut_c))


# ---------------------------------------------------------------------------
# scheduled rollout
# ---------------------------------------------------------------------------

def scheduled_rollout(model, skeleton, batch, p_model, rollout=20,
                      weights=LossWeights(), generator=None, sample_noise=True):
    """Autoregressive rollout accumulating Eq.-level losses.

    With probability p_model (per sample, per step) the model's own
    (detached) predictions enter the motion history instead of ground truth.
    Returns (total, parts dict, provenance (B, steps) bool of model-fed steps).
    """
    cfg = model.cfg
    gt_j, gt_r = batch["gt_joints"], batch["gt_roots"]
    b = gt_j.shape[0]
    steps = batch["slot_patches"].shape[1]
    hist_j = gt_j[:, :60].clone()
    hist_r = gt_r[:, :60].clone()
    rec_sum = vel_sum = kl_sum = 0.0
    fed = torch.zeros(b, steps, dtype=torch.bool)
    frames_left = rollout
    for k in range(steps):
        cur = 59 + 3 * k                       # gt index of the current frame
        # prior encoder sees ground-truth motion (chunks ending at the six
        # history slots and at the future frame)
        chunk_ids = [cur - 50, cur - 40, cur - 30, cur - 20, cur - 10, cur, cur + 3]
        wins_j = torch.stack([gt_j[:, e - 9:e + 1] for e in chunk_ids], dim=1)
        wins_r = torch.stack([gt_r[:, e - 9:e + 1] for e in chunk_ids], dim=1)
        tok = model.embed_chunk(
            wins_j.reshape(b * 7, cfg.stride, cfg.n_joints, 15),
            wins_r.reshape(b * 7, cfg.stride, 17)).reshape(b, 7, cfg.n_joints + 1, -1)
        mu, logvar = model.encode_prior(tok)
        noise = None
        if sample_noise:
            noise = torch.randn(mu.shape, generator=generator)
        z = model.sample_latent(mu, logvar, noise)
        kl_sum = kl_sum + loss_kl(mu, logvar)

        x_pred, r_pred, _ = model.step_from_history(
            hist_j, hist_r, batch["slot_patches"][:, k], batch["slot_centers"][:, k],
            batch["fut_patches"][:, k], batch["fut_centers"][:, k], z)

        n_frames = min(3, frames_left)
        frames_left -= 3
        fw = torch.zeros(3)
        fw[:n_frames] = 1.0
        x_gt = gt_j[:, cur + 1:cur + 4]
        r_gt = gt_r[:, cur + 1:cur + 4]
        rec_sum = rec_sum + loss_reconstruction(x_pred, x_gt, r_pred, r_gt,
                                                skeleton, frame_weights=fw)
        vel_sum = vel_sum + loss_velocity(x_pred, x_gt, r_pred, r_gt,
                                          gt_j[:, cur], gt_r[:, cur], skeleton,
                                          h=weights.h, frame_weights=fw)

        if p_model >= 1.0:
            coin = torch.ones(b, dtype=torch.bool)
        elif p_model <= 0.0:
            coin = torch.zeros(b, dtype=torch.bool)
        else:
            coin = torch.rand(b, generator=generator) < p_model
        fed[:, k] = coin
        sel = coin.view(b, 1, 1, 1)
        next_j = torch.where(sel, x_pred.detach(), x_gt)
        next_r = torch.where(sel.squeeze(-1), r_pred.detach(), r_gt)
        hist_j = torch.cat([hist_j[:, 3:], next_j], dim=1)
        hist_r = torch.cat([hist_r[:, 3:], next_r], dim=1)

    rec = rec_sum / steps
    vel = vel_sum / steps
    kl = kl_sum / steps
    parts = {"rec": rec, "vel": vel, "kl": kl}
    return total_loss(rec, vel, kl, weights), parts, fed


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train(train_clips, val_clips, model_cfg, train_cfg, out_dir,
          log_name="training_log.csv"):
    """Train on SyncedClips; returns (model, best checkpoint path, log rows).

    Seeded and single-threaded by default so reruns reproduce the loss curve.
    Saves the best-validation checkpoint (falling back to the final one) and
    a CSV log of per-epoch losses and validation error.
    """
    from .metrics import compute_metrics
    from .streaming import replay_synced

    torch.set_num_threads(train_cfg.threads)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(train_cfg.seed)
    skeleton = train_clips[0].skeleton
    model = MotionUpsampler(model_cfg, skeleton, seed=train_cfg.seed)
    store = ParameterStore(model, lr=train_cfg.lr,
                           weight_decay=train_cfg.weight_decay)
    cfg_rollout = ModelConfig(**{**model_cfg.to_dict(), "rollout": train_cfg.rollout})
    dataset = WindowDataset(train_clips, cfg_rollout)
    gen = torch.Generator().manual_seed(train_cfg.seed + 1)

    def validate():
        errs = []
        for clip in val_clips:
            pred = replay_synced(model, clip, seed=123)
            start = pred.start_timestamp - clip.start_timestamp
            gt = clip.to_motion_clip().slice(start, start + pred.n_frames)
            report = compute_metrics(pred, gt, skeleton)
            errs.append(report.mjpe_cm)
        return float(np.mean(errs))

    ramp_epochs = max(1, int(round(train_cfg.ramp_fraction * train_cfg.epochs)))
    rows = []
    best = (float("inf"), None)
    best_path = out_dir / "best.lmck"
    manifest_extra = {"train_config": train_cfg.to_dict(),
                      "n_train_clips": len(train_clips),
                      "n_val_clips": len(val_clips)}
    val_mjpe = validate() if val_clips else float("nan")
    rows.append({"epoch": -1, "rec": float("nan"), "vel": float("nan"),
                 "kl": float("nan"), "p_model": 0.0, "val_mjpe_cm": val_mjpe,
                 "seconds": 0.0})
    if val_clips:
        best = (val_mjpe, -1)
        save_checkpoint(best_path, model, model_cfg, step=0,
                        extra={**manifest_extra, "val_mjpe_cm": val_mjpe})

    order_rng = np.random.default_rng(train_cfg.seed + 2)
    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        p_model = min(1.0, epoch / ramp_epochs)
        ids = order_rng.permutation(len(dataset.windows))
        ids = ids[:train_cfg.windows_per_epoch]
        sums = {"rec": 0.0, "vel": 0.0, "kl": 0.0}
        n_batches = 0
        for start in range(0, len(ids), train_cfg.batch_size):
            chunk = ids[start:start + train_cfg.batch_size]
            batch = dataset.gather(list(chunk))
            store.zero_grad()
            loss, parts, _ = scheduled_rollout(
                model, skeleton, batch, p_model, rollout=train_cfg.rollout,
                weights=train_cfg.weights, generator=gen)
            if not torch.isfinite(loss):
                raise TrainingDivergenceError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            store.step()
            for key in sums:
                sums[key] += parts[key].item()
            n_batches += 1
        means = {k: v / max(n_batches, 1) for k, v in sums.items()}
        is_val_epoch = val_clips and (
            (epoch + 1) % train_cfg.val_every == 0 or epoch == train_cfg.epochs - 1)
        val_mjpe = validate() if is_val_epoch else float("nan")
        rows.append({"epoch": epoch, **{k: round(v, 6) for k, v in means.items()},
                     "p_model": round(p_model, 4), "val_mjpe_cm": val_mjpe,
                     "seconds": round(time.perf_counter() - t0, 2)})
        if is_val_epoch and val_mjpe < best[0]:
            best = (val_mjpe, epoch)
            save_checkpoint(best_path, model, model_cfg, step=store.step_count,
                            extra={**manifest_extra, "val_mjpe_cm": val_mjpe})

    final_path = out_dir / "final.lmck"
    save_checkpoint(final_path, model, model_cfg, step=store.step_count,
                    extra=manifest_extra)
    if best[1] is None:
        best_path = final_path
    with open(out_dir / log_name, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    with open(out_dir / "train_config.json", "w") as fh:
        json.dump({"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}, fh, indent=2)
    return model, best_path, rows
