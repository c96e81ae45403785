"""Feature extractor: spatial graph convolutions followed by a dilated TCN.

Both stages keep the temporal resolution, so ``extract_features`` maps a
``(T, V, 3)`` sequence to a ``(T, C2)`` feature sequence. A two-layer MLP
projects temporally pooled features for the contrastive objectives.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import DEFAULT_EDGES, REST_POSE, SkeletonGraph, normalized_adjacency

CHECKPOINT_MAGIC = b"DCK1"
INIT_GAIN = 1.0


@dataclass
class EncoderConfig:
    c1: int = 64
    c2: int = 64
    c3: int = 128
    gcn_blocks: int = 3
    tcn_layers: int = 6
    tcn_kernel: int = 3
    gcn_temporal_kernel: int = 9
    center_input: bool = True
    canonical_view: bool = True
    graph_norm: bool = True
    output_norm: bool = True
    projector_norm: bool = True
    num_joints: int = 16
    edges: list = field(default_factory=lambda: [list(e) for e in DEFAULT_EDGES])

    def __post_init__(self):
        self.edges = [[int(a), int(b)] for a, b in self.edges]
        for name in ("c1", "c2", "c3", "gcn_blocks", "tcn_layers", "tcn_kernel",
                     "gcn_temporal_kernel"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"encoder.{name} must be >= 1")
        if self.tcn_kernel % 2 == 0 or self.gcn_temporal_kernel % 2 == 0:
            raise ValueError("temporal kernels must be odd for same padding")
        for a, b in self.edges:
            if not (0 <= a < self.num_joints and 0 <= b < self.num_joints):
                raise ValueError("encoder.edges reference a joint outside num_joints")
        if self.canonical_view and self.num_joints != len(REST_POSE):
            raise ValueError("encoder.canonical_view needs the default reference pose")

    @property
    def graph(self) -> SkeletonGraph:
        return SkeletonGraph(self.num_joints, tuple(tuple(e) for e in self.edges))

    def receptive_field(self) -> int:
        """Frames seen by one output frame of the temporal encoder."""
        return 1 + sum((self.tcn_kernel - 1) * 2 ** layer for layer in range(self.tcn_layers))


class GraphBlock(nn.Module):
    """Spatial graph convolution ``ReLU(A X W)`` then a per-joint temporal convolution.

    With ``norm`` each convolution output is normalized over channels at every
    (frame, joint) position. This keeps the block independent of batch
    composition and of frames outside its temporal kernel.
    """

    def __init__(self, c_in: int, c_out: int, kernel: int, norm: bool = True):
        super().__init__()
        self.spatial = nn.Conv2d(c_in, c_out, 1)
        self.temporal = nn.Conv2d(c_out, c_out, (kernel, 1), padding=(kernel // 2, 0))
        self.residual = c_in == c_out
        self.norm = norm

    def _normalize(self, y):
        return F.layer_norm(y.transpose(1, 3), y.shape[1:2]).transpose(1, 3) if self.norm else y

    def forward(self, x, adjacency):
        # x: (B, C, T, V)
        y = torch.einsum("bctv,vw->bctw", x, adjacency)
        y = F.relu(self._normalize(self.spatial(y)))
        y = self._normalize(self.temporal(y))
        if self.residual:
            y = y + x
        return F.relu(y)


class DilatedResidualLayer(nn.Module):
    def __init__(self, channels: int, kernel: int, dilation: int):
        super().__init__()
        pad = dilation * (kernel // 2)
        self.dilated = nn.Conv1d(channels, channels, kernel, padding=pad, dilation=dilation)
        self.pointwise = nn.Conv1d(channels, channels, 1)

    def forward(self, x):
        return x + self.pointwise(F.relu(self.dilated(x)))


class Encoder(nn.Module):
    """Trainable state of the feature extractor and its projection head."""

    def __init__(self, config: EncoderConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config = config or EncoderConfig()
        adj = normalized_adjacency(config.num_joints, config.edges)
        self.register_buffer("adjacency", torch.tensor(adj, dtype=torch.float32))
        widths = [3] + [config.c1] * config.gcn_blocks
        self.gcn = nn.ModuleList(
            GraphBlock(a, b, config.gcn_temporal_kernel, config.graph_norm) for a, b in zip(widths, widths[1:]))
        self.tcn_in = nn.Conv1d(config.c1, config.c2, 1)
        self.tcn = nn.ModuleList(
            DilatedResidualLayer(config.c2, config.tcn_kernel, 2 ** layer)
            for layer in range(config.tcn_layers))
        hidden = [nn.Linear(config.c2, config.c2)]
        if config.projector_norm:
            # pooled features share a large common offset; batch statistics remove it
            hidden.append(nn.BatchNorm1d(config.c2))
        self.projector = nn.Sequential(*hidden, nn.ReLU(), nn.Linear(config.c2, config.c3))
        reset_parameters(self, seed)

    # -- batched internals, x: (B, T, V, 3) -----------------------------------

    def gcn_batch(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[2] != self.config.num_joints:
            raise ValueError("graph/sequence mismatch")
        if self.config.canonical_view:
            x = canonicalize_view(x)
        if self.config.center_input:
            # static pose and camera offsets would swamp the motion signal
            x = x - x.mean(dim=1, keepdim=True)
            rms = x.square().mean(dim=(1, 2, 3), keepdim=True).sqrt()
            x = x / (rms + 1e-6)
        y = x.permute(0, 3, 1, 2)
        adj = self.adjacency.to(y.dtype)
        for block in self.gcn:
            y = block(y, adj)
        return y.mean(dim=3)  # (B, C1, T)

    def tcn_batch(self, h: torch.Tensor) -> torch.Tensor:
        y = self.tcn_in(h)
        for layer in self.tcn:
            y = layer(y)
        if self.config.output_norm:
            # per-frame channel normalization; residual sums grow with depth
            y = F.layer_norm(y.transpose(1, 2), y.shape[1:2]).transpose(1, 2)
        return y  # (B, C2, T)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.tcn_batch(self.gcn_batch(x))

    @property
    def dtype(self) -> torch.dtype:
        return self.tcn_in.weight.dtype

    def as_input(self, x) -> torch.Tensor:
        t = torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x)
        t = t.to(self.dtype)
        if t.dim() == 3:
            t = t.unsqueeze(0)
        return t


def canonicalize_view(x: torch.Tensor) -> torch.Tensor:
    """Rotate each sequence so its mean pose best matches the reference pose.

    ``x`` is ``(B, T, V, 3)``. The rotation is the closed-form orthogonal
    Procrustes fit (no reflections) of the time-averaged pose onto
    ``REST_POSE``; translation is removed, scale is left alone. The rotation
    is treated as a constant of the input, so no gradient flows through it.
    """
    with torch.no_grad():
        mean_pose = x.mean(dim=1)
        src = mean_pose - mean_pose.mean(dim=1, keepdim=True)
        ref = torch.as_tensor(REST_POSE, dtype=x.dtype)
        ref = ref - ref.mean(dim=0)
        u, _, vh = torch.linalg.svd(src.transpose(1, 2) @ ref)
        d = torch.sign(torch.linalg.det(u @ vh))
        d = torch.where(d == 0, torch.ones_like(d), d)
        fix = torch.ones(x.shape[0], 3, dtype=x.dtype)
        fix[:, 2] = d
        rot = (u * fix[:, None, :]) @ vh
        offset = mean_pose.mean(dim=1)
    return (x - offset[:, None, None, :]) @ rot[:, None]


def reset_parameters(module: nn.Module, seed: int) -> None:
    """Seeded Kaiming-uniform fan-in init for weights; zero biases."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        norms = {f"{n}.weight" for n, m in module.named_modules() if isinstance(m, nn.BatchNorm1d)}
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif name in norms:
                p.fill_(1.0)
            else:
                fan_in = p[0].numel()
                bound = INIT_GAIN * math.sqrt(3.0 / fan_in)
                p.uniform_(-bound, bound, generator=gen)


# -- single-sequence operations ---------------------------------------------------

def gcn_forward(encoder: Encoder, x) -> torch.Tensor:
    """``(T, V, 3)`` -> ``(T, C1)``."""
    return encoder.gcn_batch(encoder.as_input(x))[0].T


def tcn_forward(encoder: Encoder, h) -> torch.Tensor:
    """``(T, C1)`` -> ``(T, C2)``."""
    h = torch.as_tensor(h).to(encoder.dtype)
    return encoder.tcn_batch(h.T.unsqueeze(0))[0].T


def extract_features(encoder: Encoder, x) -> torch.Tensor:
    """``(T, V, 3)`` -> ``(T, C2)``."""
    return encoder(encoder.as_input(x))[0].T


@dataclass
class ProjectionSet:
    local: dict
    global_: torch.Tensor

    @property
    def granularity(self) -> int:
        return len(self.local)


def _check_boundaries(boundaries, length: int):
    pos = 0
    for start, end in boundaries:
        if end <= start:
            raise ValueError("empty slot")
        if start != pos:
            raise ValueError("boundaries must partition the sequence contiguously")
        pos = end
    if pos != length:
        raise ValueError("boundaries must cover every frame")


def project(encoder: Encoder, h, boundaries, slots=None) -> ProjectionSet:
    """Pool ``h`` (T, C2) per slot and over all frames, then apply the shared MLP."""
    h = torch.as_tensor(h)
    return project_batch(encoder, h.T.unsqueeze(0), [boundaries],
                         None if slots is None else [slots])[0]


def project_batch(encoder: Encoder, h: torch.Tensor, boundaries, slots=None) -> list[ProjectionSet]:
    """Batched ``project`` for features ``h`` of shape (B, C2, T)."""
    pooled = []
    for b, bounds in enumerate(boundaries):
        _check_boundaries(bounds, h.shape[2])
        for start, end in bounds:
            pooled.append(h[b, :, start:end].mean(dim=1))
        pooled.append(h[b].mean(dim=1))
    z = encoder.projector(torch.stack(pooled))
    out = []
    row = 0
    for b, bounds in enumerate(boundaries):
        keys = range(len(bounds)) if slots is None else slots[b]
        local = {k: z[row + i] for i, k in enumerate(keys)}
        row += len(bounds)
        out.append(ProjectionSet(local, z[row]))
        row += 1
    return out


def similarity(z_a, z_b, tau: float) -> torch.Tensor:
    """Cosine similarity divided by the temperature ``tau``."""
    z_a = torch.as_tensor(z_a)
    z_b = torch.as_tensor(z_b)
    if tau <= 0:
        raise ValueError("temperature must be positive")
    na = torch.linalg.vector_norm(z_a)
    nb = torch.linalg.vector_norm(z_b)
    if na == 0 or nb == 0:
        raise ValueError("zero vector has no direction")
    return torch.dot(z_a, z_b) / (na * nb * tau)


# -- momentum copy -------------------------------------------------------------------

def momentum_copy(encoder: Encoder) -> Encoder:
    """Frozen copy used as the moving-average encoder."""
    target = copy.deepcopy(encoder)
    for p in target.parameters():
        p.requires_grad_(False)
    return target


@torch.no_grad()
def momentum_update(target: Encoder, source: Encoder, m: float) -> None:
    """``p_target <- m * p_target + (1 - m) * p_source`` for every parameter."""
    if not 0 <= m < 1:
        raise ValueError("momentum must lie in [0, 1)")
    if asdict(target.config) != asdict(source.config):
        raise ValueError("momentum_update needs identical encoder configs")
    for pt, ps in zip(target.parameters(), source.parameters()):
        pt.mul_(m).add_(ps.detach(), alpha=1.0 - m)


# -- checkpoints ---------------------------------------------------------------------

def _state_arrays(encoder: Encoder):
    """Parameters, then normalization statistics; the adjacency is derived from the config."""
    yield from encoder.named_parameters()
    for name, b in encoder.named_buffers():
        if name != "adjacency":
            yield name, b


def save_checkpoint(encoder: Encoder, path, extra: dict | None = None) -> None:
    """Write named float64 little-endian arrays plus the config as one file.

    Layout: ``DCK1``, uint32 header length, UTF-8 JSON header, then the
    parameter payloads in header order.
    """
    params = [(name, t.detach().cpu().numpy()) for name, t in _state_arrays(encoder)]
    header = {
        "config": asdict(encoder.config),
        "dtype": str(encoder.dtype).replace("torch.", ""),
        "params": [{"name": n, "shape": list(a.shape)} for n, a in params],
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, a in params:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"not an encoder checkpoint: {path}")
        (n,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(n))


def load_checkpoint(path) -> Encoder:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"not an encoder checkpoint: {path}")
    (n,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + n])
    encoder = Encoder(EncoderConfig(**header["config"]))
    encoder.to(getattr(torch, header["dtype"]))
    offset = 8 + n
    named = dict(_state_arrays(encoder))
    if [p["name"] for p in header["params"]] != list(named):
        raise ValueError(f"checkpoint parameters do not match the encoder layout: {path}")
    with torch.no_grad():
        for spec in header["params"]:
            p = named[spec["name"]]
            if list(p.shape) != spec["shape"]:
                raise ValueError(f"shape mismatch for {spec['name']}")
            count = int(np.prod(spec["shape"], dtype=np.int64))
            a = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
            offset += 8 * count
            p.copy_(torch.from_numpy(a.reshape(spec["shape"]).copy()).to(p.dtype))
    if offset != len(raw):
        raise ValueError(f"corrupt checkpoint: {path}")
    return encoder


def parameter_digest(encoder: Encoder) -> str:
    """SHA-256 over the encoder state (names, shapes and float64 bytes)."""
    h = hashlib.sha256()
    for name, p in _state_arrays(encoder):
        a = np.ascontiguousarray(p.detach().cpu().numpy(), dtype="<f8")
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
