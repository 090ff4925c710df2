"""Differentiable building blocks shared by the upsampler and the
calibration model: MLPs, attention that exposes its weights, skeleton graph
convolutions, temporal convolutions, an AdamW step that refuses NaN
gradients, an independent finite-difference gradient checker, and a
versioned binary checkpoint container.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ContainerError, ShapeError, TrainingDivergenceError

CKPT_MAGIC = b"LMCK"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Paper scale uses channels=384; the desk
    default keeps the layer/head structure at a CI-friendly width."""

    channels: int = 64
    layers: int = 3
    heads: int = 8
    stride: int = 10            # point-cloud sampling stride s, 60 fps units
    n_joints: int = 21
    n_groups: int = 32
    n_points: int = 384
    patch_k: int = 24
    horizon: int = 3            # predicted frames per step
    rollout: int = 20           # training prediction length, frames

    def __post_init__(self):
        if self.channels % self.heads != 0:
            raise ShapeError("channels must be divisible by heads")
        if 6 * self.stride != 60:
            raise ShapeError("six stride-s chunks must cover the 60-frame window")

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        return ModelConfig(**d)


def seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))


class MLP(nn.Module):
    """Plain stack of linear layers with an activation between them."""

    def __init__(self, sizes, bias=True, activation="relu", final_activation=False):
        super().__init__()
        act = {"relu": nn.ReLU, "gelu": nn.GELU}[activation]
        layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            layers.append(nn.Linear(a, b, bias=bias))
            if final_activation or i < len(sizes) - 2:
                layers.append(act())
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over head_count heads.

    Returns (output, weights) with weights shaped (..., heads, Tq, Tk); every
    weight row is a softmax distribution over the keys.
    """

    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads != 0:
            raise ShapeError("dim must be divisible by heads")
        self.heads = heads
        self.d_head = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x):
        *lead, t, _ = x.shape
        return x.view(*lead, t, self.heads, self.d_head).transpose(-3, -2)

    def forward(self, queries, keys, values, mask=None):
        q = self._split(self.q_proj(queries))
        k = self._split(self.k_proj(keys))
        v = self._split(self.v_proj(values))
        logits = q @ k.transpose(-1, -2) / self.d_head ** 0.5
        if mask is not None:
            logits = logits.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        out = weights @ v
        out = out.transpose(-3, -2).flatten(-2)
        return self.out_proj(out), weights


class TransformerLayer(nn.Module):
    """Pre-norm encoder block: self-attention then a GELU FFN."""

    def __init__(self, dim, heads, ff_mult=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ff_mult * dim), nn.GELU(), nn.Linear(ff_mult * dim, dim))

    def forward(self, x):
        a, weights = self.attn(*[self.norm1(x)] * 3)
        x = x + a
        x = x + self.ffn(self.norm2(x))
        return x, weights


class TransformerEncoder(nn.Module):
    """Stack of encoder blocks with a final norm; exposes the last layer's
    attention weights for map extraction."""

    def __init__(self, dim, heads, layers):
        super().__init__()
        self.blocks = nn.ModuleList(TransformerLayer(dim, heads) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        weights = None
        for block in self.blocks:
            x, weights = block(x)
        return self.norm(x), weights


def skeleton_adjacency(skeleton):
    """Symmetrically normalized bone adjacency with self-loops, (n_j, n_j)."""
    n = skeleton.n_joints
    a = np.eye(n)
    for j in range(1, n):
        p = skeleton.parent_index[j]
        a[j, p] = a[p, j] = 1.0
    deg = a.sum(axis=1)
    norm = a / np.sqrt(np.outer(deg, deg))
    return torch.tensor(norm, dtype=torch.float32)


class GraphConv(nn.Module):
    """One-hop neighborhood-aggregated linear map over the joint axis.

    x: (..., J, Cin) -> (..., J, Cout); output joint j only sees the graph
    neighborhood of j.
    """

    def __init__(self, in_ch, out_ch, adjacency):
        super().__init__()
        self.register_buffer("adjacency", adjacency)
        self.linear = nn.Linear(in_ch, out_ch)

    def forward(self, x):
        agg = torch.einsum("jk,...kc->...jc", self.adjacency, x)
        return self.linear(agg)


class STGraphConv(nn.Module):
    """Spatial graph convolution followed by a temporal convolution.

    x: (B, T, J, Cin) -> (B, T, J, Cout); same-length temporal padding,
    weights shared across joints.
    """

    def __init__(self, in_ch, out_ch, adjacency, temporal_kernel=3):
        super().__init__()
        if temporal_kernel % 2 != 1:
            raise ShapeError("temporal kernel must be odd")
        self.spatial = GraphConv(in_ch, out_ch, adjacency)
        self.act = nn.ReLU()
        # replicate padding: a constant window stays constant across frames
        self.temporal = nn.Conv1d(out_ch, out_ch, temporal_kernel,
                                  padding=temporal_kernel // 2,
                                  padding_mode="replicate")

    def forward(self, x):
        b, t, j, _ = x.shape
        y = self.act(self.spatial(x))                    # (B, T, J, C)
        y = y.permute(0, 2, 3, 1).reshape(b * j, -1, t)  # (B*J, C, T)
        y = self.temporal(y)
        return y.reshape(b, j, -1, t).permute(0, 3, 1, 2)


class TemporalConv1d(nn.Module):
    """1-D convolution over the frame axis, same-length padding.

    x: (B, T, Cin) -> (B, T, Cout).
    """

    def __init__(self, in_ch, out_ch, kernel=3):
        super().__init__()
        pad_mode = "replicate" if kernel > 1 else "zeros"
        self.conv = nn.Conv1d(in_ch, out_ch, kernel, padding=kernel // 2,
                              padding_mode=pad_mode)

    def forward(self, x):
        return self.conv(x.transpose(1, 2)).transpose(1, 2)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

class ParameterStore:
    """Named parameters of a module plus AdamW state and a step counter.

    The step is refused (exception, parameters untouched) when any gradient
    is non-finite.
    """

    def __init__(self, module, lr=1e-4, weight_decay=1e-2, betas=(0.9, 0.999),
                 eps=1e-8):
        self.module = module
        self.optimizer = torch.optim.AdamW(module.parameters(), lr=lr,
                                           weight_decay=weight_decay,
                                           betas=betas, eps=eps)
        self.step_count = 0

    def zero_grad(self):
        self.optimizer.zero_grad(set_to_none=True)

    def step(self):
        for name, p in self.module.named_parameters():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise TrainingDivergenceError(f"non-finite gradient in {name}")
        self.optimizer.step()
        self.step_count += 1

    def set_lr(self, lr):
        for group in self.optimizer.param_groups:
            group["lr"] = lr


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def grad_check(fn, inputs, eps=1e-3, max_coords=64, seed=0):
    """Worst relative error between autograd and central differences.

    fn maps the (double-precision, grad-enabled) input tensors to a scalar.
    Up to max_coords seeded coordinates per tensor are probed. A coordinate
    is scored only where the central difference is step-stable (estimates at
    eps and eps/8 agree): at a ReLU/max kink inside the probe window the
    numeric quotient does not estimate a derivative, so such coordinates are
    skipped rather than misreported. Coordinates where both gradients are
    below 1e-8 count as zero error.
    """
    inputs = [t.detach().double().requires_grad_(True) for t in inputs]
    out = fn(*inputs)
    analytic = torch.autograd.grad(out, inputs, allow_unused=True)
    with torch.no_grad():
        f_center = fn(*inputs).item()
    rng = np.random.default_rng(seed)
    worst = 0.0

    def probe(flat, c, orig, step):
        with torch.no_grad():
            flat[c] = orig + step
            f_plus = fn(*inputs).item()
            flat[c] = orig - step
            f_minus = fn(*inputs).item()
            flat[c] = orig
        central = (f_plus - f_minus) / (2 * step)
        # bounds the one-sided slope jump a kink inside the window can
        # contribute; O(step * f'') for smooth coordinates
        jump = abs(f_plus + f_minus - 2 * f_center) / (2 * step)
        return central, jump

    for tensor, grad in zip(inputs, analytic):
        if grad is None:
            continue
        flat = tensor.detach().reshape(-1)
        gflat = grad.reshape(-1)
        n = flat.numel()
        coords = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
        for c in coords:
            orig = flat[c].item()
            numeric, jump = probe(flat, c, orig, eps)
            refined, _ = probe(flat, c, orig, eps / 8.0)
            a = gflat[c].item()
            scale = max(abs(a), abs(numeric))
            if scale < 1e-8:
                continue
            if abs(numeric - refined) > 2e-3 * max(scale, 1e-6):
                continue        # kink inside the probe window
            if jump > 1e-3 * max(scale, 1e-6):
                continue        # curvature/jump too large to resolve at eps
            worst = max(worst, abs(a - numeric) / max(scale, 1e-6))
    return worst


def grad_check_module(module, example_inputs, eps=1e-3, max_coords=32, seed=0):
    """grad_check over a module's parameters and inputs jointly.

    The module is copied to double precision; its output (first element if a
    tuple) is reduced to a scalar through a fixed cosine projection so every
    output coordinate influences the check.
    """
    import copy

    mod = copy.deepcopy(module).double()
    names = [n for n, _ in mod.named_parameters()]
    params0 = [p.detach().clone() for _, p in mod.named_parameters()]
    inputs0 = [t.detach().double() for t in example_inputs]
    n_params = len(names)

    def fn(*tensors):
        params = dict(zip(names, tensors[:n_params]))
        out = torch.func.functional_call(mod, params, tuple(tensors[n_params:]))
        if isinstance(out, tuple):
            out = out[0]
        proj = torch.cos(0.37 * torch.arange(out.numel(), dtype=out.dtype))
        return (out.reshape(-1) * proj).sum()

    return grad_check(fn, params0 + inputs0, eps=eps, max_coords=max_coords, seed=seed)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, module, config, step, extra=None):
    """Binary checkpoint: JSON manifest + float32 LE parameter blobs + sha256."""
    state = module.state_dict()
    names = sorted(state)
    manifest = {
        "format_version": CKPT_VERSION,
        "config": config.to_dict() if isinstance(config, ModelConfig) else dict(config),
        "step": int(step),
        "params": [{"name": n, "shape": list(state[n].shape)} for n in names],
        "extra": extra or {},
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION),
             struct.pack("<Q", len(mbytes)), mbytes]
    for n in names:
        parts.append(state[n].detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())


def read_checkpoint(path):
    """(manifest, {name: float32 array}) with checksum and version checks."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 48 or raw[:4] != CKPT_MAGIC:
        raise ContainerError("not a checkpoint container")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ContainerError("checksum failure (truncated or corrupt checkpoint)")
    version, = struct.unpack_from("<I", body, 4)
    if version != CKPT_VERSION:
        raise ContainerError(f"unsupported checkpoint version {version}")
    mlen, = struct.unpack_from("<Q", body, 8)
    manifest = json.loads(body[16:16 + mlen].decode("utf-8"))
    off = 16 + mlen
    params = {}
    for entry in manifest["params"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=off)
        params[entry["name"]] = arr.reshape(entry["shape"]).copy()
        off += count * 4
    if off != len(body):
        raise ContainerError("trailing bytes after parameter blobs")
    return manifest, params


def load_checkpoint_into(path, module):
    """Load a checkpoint's parameters into a compatible module; returns manifest."""
    manifest, params = read_checkpoint(path)
    state = module.state_dict()
    if sorted(state) != sorted(params):
        raise ContainerError("checkpoint parameter names do not match the module")
    for name, arr in params.items():
        if list(state[name].shape) != list(arr.shape):
            raise ContainerError(f"shape mismatch for {name}")
        state[name] = torch.from_numpy(arr)
    module.load_state_dict(state)
    return manifest
