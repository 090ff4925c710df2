"""Conditional autoregressive transformer that upsamples 20 fps point-cloud
streams into 60 fps poses.

Per step the generator consumes six combined motion+point token chunks
covering the past second (sampling stride s frames), the point tokens of one
future cloud, and three masked chunks; it emits pose features for the three
frames between the current and the future cloud, which the expansion heads
decode into joint and root channel rows.

Token slots carry sinusoidal codes for their 60 fps window positions: the
history chunks sit at offsets 9, 19, ..., 59 inside the 60-frame window and
the future tokens at 60..62.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .errors import SequenceSchemaError, ShapeError
from .pointcloud import group_body_patches, lowest_point_index
from .substrate import (
    MLP,
    GraphConv,
    ModelConfig,
    STGraphConv,
    TemporalConv1d,
    TransformerEncoder,
    seed_everything,
    skeleton_adjacency,
)

JOINT_CH = 15
ROOT_CH = 17


def sinusoidal_encoding(positions, channels):
    """Standard sine/cosine code per integer position, (len(positions), C)."""
    pos = torch.as_tensor(positions, dtype=torch.float32).reshape(-1, 1)
    half = channels // 2
    freq = torch.exp(-np.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    ang = pos * freq
    pe = torch.zeros(pos.shape[0], channels)
    pe[:, 0::2] = torch.sin(ang)
    pe[:, 1::2] = torch.cos(ang)
    return pe


def renorm_rot6d(r6):
    """Differentiable Gram-Schmidt re-normalization of 6d rotation slices."""
    a, b = r6[..., 0:3], r6[..., 3:6]
    x = a / a.norm(dim=-1, keepdim=True).clamp_min(1e-8)
    b = b - (x * b).sum(-1, keepdim=True) * x
    y = b / b.norm(dim=-1, keepdim=True).clamp_min(1e-8)
    return torch.cat([x, y], dim=-1)


class MotionEmbed(nn.Module):
    """Joint features via a spatial-temporal graph block, root features via a
    temporal convolution; both mean-pooled over the s-frame window."""

    def __init__(self, cfg, adjacency):
        super().__init__()
        self.stride = cfg.stride
        self.joint_conv = STGraphConv(JOINT_CH, cfg.channels, adjacency, temporal_kernel=3)
        self.root_conv = TemporalConv1d(ROOT_CH, cfg.channels, kernel=3)

    def forward(self, joints_win, roots_win):
        """(B, s, n_j, 15), (B, s, 17) -> (B, n_j, C), (B, C)."""
        if joints_win.shape[1] != self.stride:
            raise ShapeError(f"window must have {self.stride} frames")
        f_x = self.joint_conv(joints_win).mean(dim=1)
        f_r = self.root_conv(roots_win).mean(dim=1)
        return f_x, f_r


class MiniPointNet(nn.Module):
    """Per-patch feature: shared MLP, max-pool, concat, second MLP, max-pool."""

    def __init__(self, cfg):
        super().__init__()
        half = cfg.channels // 2
        self.mlp1 = MLP([3, half, half], final_activation=True)
        self.mlp2 = MLP([2 * half, cfg.channels, cfg.channels])

    def forward(self, patches):
        """(B, n_g, k, 3) -> (B, n_g, C)."""
        feat = self.mlp1(patches)                               # (B, g, k, h)
        pooled = feat.max(dim=-2, keepdim=True).values
        feat = torch.cat([feat, pooled.expand_as(feat)], dim=-1)
        return self.mlp2(feat).max(dim=-2).values


class Expander(nn.Module):
    """Inverse of the embedding: per-frame graph conv back to joint channels
    and a per-frame head back to root channels, with rotation slices
    re-orthonormalized."""

    def __init__(self, cfg, adjacency):
        super().__init__()
        c = cfg.channels
        self.joint_graph = GraphConv(c, c, adjacency)
        self.joint_head = nn.Sequential(nn.ReLU(), nn.Linear(c, JOINT_CH))
        self.root_head = nn.Sequential(nn.Linear(c, c), nn.ReLU(), nn.Linear(c, ROOT_CH))

    def forward(self, pred_tokens):
        """(B, 3, n_j + 1, C) -> joints (B, 3, n_j, 15), roots (B, 3, 17)."""
        joint_tok = pred_tokens[:, :, :-1]
        root_tok = pred_tokens[:, :, -1]
        x = self.joint_head(self.joint_graph(joint_tok))
        r = self.root_head(root_tok)
        x = torch.cat([x[..., 0:3], renorm_rot6d(x[..., 3:9]), x[..., 9:15]], dim=-1)
        r = torch.cat([r[..., 0:3], renorm_rot6d(r[..., 3:9]), r[..., 9:17]], dim=-1)
        return x, r


class MotionUpsampler(nn.Module):
    """Full architecture: embeddings, tokenization, prior encoder, generator
    and expansion heads."""

    # token slot offsets within the 60-frame window (chunk ends), plus the
    # three future frames; the future cloud shares the last frame's slot
    HIST_SLOTS = (9, 19, 29, 39, 49, 59)
    FUTURE_SLOTS = (60, 61, 62)

    def __init__(self, cfg, skeleton, seed=0):
        super().__init__()
        seed_everything(seed)
        self.cfg = cfg
        if skeleton.n_joints != cfg.n_joints:
            raise ShapeError("skeleton does not match the configuration")
        adjacency = skeleton_adjacency(skeleton)
        c = cfg.channels
        self.motion_embed = MotionEmbed(cfg, adjacency)
        self.point_embed = MiniPointNet(cfg)
        self.center_encoder = MLP([3, c, c])
        self.spat_encoding = nn.Parameter(torch.randn(cfg.n_joints + 1, c) * 0.02)
        self.mask_token = nn.Parameter(torch.randn(cfg.n_joints + 1, c) * 0.02)
        self.prior_token = nn.Parameter(torch.randn(c) * 0.02)
        self.z_proj = nn.Linear(c, c)
        self.generator = TransformerEncoder(c, cfg.heads, cfg.layers)
        self.prior_encoder = TransformerEncoder(c, cfg.heads, cfg.layers)
        self.mu_head = nn.Linear(c, c)
        self.logvar_head = nn.Linear(c, c)
        self.expander = Expander(cfg, adjacency)
        pe = sinusoidal_encoding(range(63), c)
        self.register_buffer("temporal_codes", pe, persistent=False)

    # -- tokenization -------------------------------------------------------

    def prep_cloud(self, points, as_numpy=False):
        """Group a fixed-size cloud into (patches, centers) model inputs."""
        patch_set = group_body_patches(points, self.cfg.n_groups, self.cfg.patch_k,
                                       lowest_point_index(points))
        if as_numpy:
            return patch_set.patches.astype(np.float32), patch_set.centers.astype(np.float32)
        return (torch.tensor(patch_set.patches, dtype=torch.float32),
                torch.tensor(patch_set.centers, dtype=torch.float32))

    def motion_tokens(self, f_x, f_r):
        """(B, n_j, C), (B, C) -> (B, n_j + 1, C) with spatial encodings."""
        return torch.cat([f_x, f_r.unsqueeze(1)], dim=1) + self.spat_encoding

    def point_tokens(self, f_p, centers):
        """(B, n_g, C), (B, n_g, 3) -> (B, n_g, C) with center encodings."""
        return f_p + self.center_encoder(centers)

    def embed_chunk(self, joints_win, roots_win):
        return self.motion_tokens(*self.motion_embed(joints_win, roots_win))

    def embed_cloud_tokens(self, patches, centers):
        return self.point_tokens(self.point_embed(patches), centers)

    # -- generator ----------------------------------------------------------

    def assemble_sequence(self, comb_chunks, future_point):
        """[6 combined chunks, future point tokens, 3 masked chunks] + codes.

        comb_chunks: (B, 6, n_j + 1 + n_g, C); future_point: (B, n_g, C).
        """
        b, n_chunks, chunk_len, c = comb_chunks.shape
        n_tok = self.cfg.n_joints + 1
        if n_chunks != 6 or chunk_len != n_tok + self.cfg.n_groups:
            raise SequenceSchemaError("combined chunks have the wrong layout")
        if future_point.shape[1:] != (self.cfg.n_groups, c):
            raise SequenceSchemaError("future point tokens have the wrong layout")
        pe = self.temporal_codes
        parts = []
        for i, slot in enumerate(self.HIST_SLOTS):
            parts.append(comb_chunks[:, i] + pe[slot])
        parts.append(future_point + pe[self.FUTURE_SLOTS[-1]])
        masked = self.mask_token + self.spat_encoding
        for slot in self.FUTURE_SLOTS:
            parts.append((masked + pe[slot]).expand(b, -1, -1))
        return torch.cat(parts, dim=1)

    def mask_chunk_slice(self, m):
        """Token range of masked chunk m (0..2) in the generator sequence."""
        n_tok = self.cfg.n_joints + 1
        start = 6 * (n_tok + self.cfg.n_groups) + self.cfg.n_groups + m * n_tok
        return slice(start, start + n_tok)

    def future_point_slice(self):
        n_tok = self.cfg.n_joints + 1
        start = 6 * (n_tok + self.cfg.n_groups)
        return slice(start, start + self.cfg.n_groups)

    def generate_step(self, comb_chunks, future_point, z):
        """One upsampling step: predicted tokens for the 3 future frames.

        Returns (pred_tokens (B, 3, n_j + 1, C), attention (B, H, T, T)).
        """
        seq = self.assemble_sequence(comb_chunks, future_point)
        seq = seq + self.z_proj(z).unsqueeze(1)
        out, attn = self.generator(seq)
        chunks = [out[:, self.mask_chunk_slice(m)] for m in range(3)]
        return torch.stack(chunks, dim=1), attn

    def expand_poses(self, pred_tokens):
        return self.expander(pred_tokens)

    # -- prior --------------------------------------------------------------

    def encode_prior(self, motion_chunks):
        """Gaussian latent parameters from 7 motion-token chunks.

        motion_chunks: (B, 7, n_j + 1, C) for window ends at the six history
        slots plus the future frame; returns (mu, logvar), each (B, C).
        """
        b, n_chunks, n_tok, c = motion_chunks.shape
        if n_chunks != 7 or n_tok != self.cfg.n_joints + 1:
            raise SequenceSchemaError("prior encoder expects 7 motion chunks")
        pe = self.temporal_codes
        slots = list(self.HIST_SLOTS) + [self.FUTURE_SLOTS[-1]]
        parts = [motion_chunks[:, i] + pe[slot] for i, slot in enumerate(slots)]
        parts.append(self.prior_token.expand(b, 1, -1))
        out, _ = self.prior_encoder(torch.cat(parts, dim=1))
        head = out[:, -1]
        return self.mu_head(head), self.logvar_head(head)

    @staticmethod
    def sample_latent(mu, logvar, noise=None):
        """Reparameterized draw; noise=None means the mean (eps = 0)."""
        if noise is None:
            return mu
        return mu + torch.exp(0.5 * logvar) * noise

    # -- full step from raw history ----------------------------------------

    def step_from_history(self, hist_joints, hist_roots, hist_patches,
                          hist_centers, fut_patches, fut_centers, z):
        """Upsample once from raw window arrays.

        hist_joints (B, 60, n_j, 15), hist_roots (B, 60, 17): the past second
        of motion ending at the current frame. hist_patches (B, 6, n_g, k, 3)
        with hist_centers: grouped clouds for the six sampling slots.
        fut_patches/fut_centers: the newly captured future cloud. z: (B, C).

        Returns (joints (B, 3, n_j, 15), roots (B, 3, 17), attention).
        """
        b = hist_joints.shape[0]
        s = self.cfg.stride
        if hist_joints.shape[1] != 6 * s:
            raise ShapeError("motion history must cover 60 frames")
        jw = hist_joints.reshape(b * 6, s, self.cfg.n_joints, JOINT_CH)
        rw = hist_roots.reshape(b * 6, s, ROOT_CH)
        mot = self.embed_chunk(jw, rw).reshape(b, 6, self.cfg.n_joints + 1, -1)
        pts = self.embed_cloud_tokens(
            hist_patches.reshape(b * 6, self.cfg.n_groups, self.cfg.patch_k, 3),
            hist_centers.reshape(b * 6, self.cfg.n_groups, 3),
        ).reshape(b, 6, self.cfg.n_groups, -1)
        comb = torch.cat([mot, pts], dim=2)
        fut = self.embed_cloud_tokens(fut_patches, fut_centers)
        pred_tokens, attn = self.generate_step(comb, fut, z)
        joints, roots = self.expand_poses(pred_tokens)
        return joints, roots, attn

    forward = step_from_history


def attention_joint_patch_map(attn, model, joint_indices, mask_chunk=2):
    """Head-averaged attention from masked-chunk joint tokens to the future
    point tokens: (len(joint_indices), n_g)."""
    rows = model.mask_chunk_slice(mask_chunk)
    cols = model.future_point_slice()
    mean = attn.mean(dim=1)                       # (B, T, T)
    sub = mean[:, rows, cols][0]                  # (n_j + 1, n_g)
    return sub[list(joint_indices)]


def kl_divergence(mu, logvar):
    """KL(N(mu, sigma) || N(0, I)) summed over channels, averaged over batch."""
    per = 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).sum(dim=-1)
    return per.mean()
