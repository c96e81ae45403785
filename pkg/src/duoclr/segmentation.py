"""Frame-wise heads on top of a pretrained encoder, and their training protocols."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import UntrimmedVideo
from .encoder import Encoder

MULTICLASS = "multiclass"
MULTILABEL = "multilabel"


def output_width(num_classes: int, task_kind: str) -> int:
    """Multiclass heads reserve one extra column (index ``num_classes``) for background."""
    if task_kind == MULTICLASS:
        return num_classes + 1
    if task_kind == MULTILABEL:
        return num_classes
    raise ValueError(f"unknown task kind {task_kind!r}")


class SegmentationHead(nn.Module):
    """1x1 temporal convolution from encoder features to per-frame class logits.

    Features are first shifted and scaled per channel by frozen statistics
    (``set_feature_statistics``). The composition is still a single 1x1
    convolution; the fixed affine map only conditions the optimisation so
    that one learning rate suits encoders with very different feature scales.
    """

    def __init__(self, c2: int, num_classes: int, task_kind: str, seed: int = 0):
        super().__init__()
        self.task_kind = task_kind
        self.num_classes = num_classes
        self.conv = nn.Conv1d(c2, output_width(num_classes, task_kind), 1)
        self.register_buffer("feature_mean", torch.zeros(1, c2, 1))
        self.register_buffer("feature_scale", torch.ones(1, c2, 1))
        gen = torch.Generator().manual_seed(int(seed))
        bound = 1.0 / math.sqrt(c2)
        with torch.no_grad():
            self.conv.weight.uniform_(-bound, bound, generator=gen)
            self.conv.bias.zero_()

    def set_feature_statistics(self, features: list) -> None:
        """Freeze the input conditioning from ``(1, C2, T)`` feature maps.

        Each channel is centred and divided by its standard deviation times
        ``sqrt(C2)``, so a standardised frame vector has about unit norm.
        """
        flat = torch.cat([f[0] for f in features], dim=1)
        c2 = flat.shape[0]
        self.feature_mean.copy_(flat.mean(dim=1).reshape(1, -1, 1))
        self.feature_scale.copy_((flat.std(dim=1).reshape(1, -1, 1) + 1e-6) * math.sqrt(c2))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.conv((h - self.feature_mean) / self.feature_scale)

    def activate(self, logits: torch.Tensor) -> torch.Tensor:
        if self.task_kind == MULTICLASS:
            return torch.softmax(logits, dim=1)
        return torch.sigmoid(logits)


@dataclass
class FramePredictions:
    scores: np.ndarray  # (T, K)
    task_kind: str = MULTICLASS

    @property
    def labels(self) -> np.ndarray:
        if self.task_kind == MULTICLASS:
            return self.scores.argmax(axis=1)
        return (self.scores >= 0.5).astype(np.int64)


def frame_labels_from_annotations(video: UntrimmedVideo, num_classes: int) -> np.ndarray:
    """``(T, K')`` indicator matrix; multiclass uses ``K' = num_classes + 1`` with background last."""
    t = len(video.frames)
    if video.task_kind == MULTICLASS:
        out = np.zeros((t, num_classes + 1), dtype=np.int64)
        out[:, num_classes] = 1
        for s in video.segments:
            out[s.start:s.end] = 0
            out[s.start:s.end, s.action_class] = 1
        return out
    out = np.zeros((t, num_classes), dtype=np.int64)
    for s in video.segments:
        out[s.start:s.end, s.action_class] = 1
    return out


def segment_forward(encoder: Encoder, head: SegmentationHead, video) -> FramePredictions:
    """Score every frame with one encoder pass over the whole sequence."""
    frames = video.frames if isinstance(video, UntrimmedVideo) else video
    encoder.eval()
    with torch.no_grad():
        h = encoder(encoder.as_input(frames))
        scores = head.activate(head(h.to(head.conv.weight.dtype)))[0].T
    return FramePredictions(scores.double().numpy(), head.task_kind)


def subsample(videos: list, fraction: float, seed: int) -> list:
    """Deterministic ``ceil(fraction * N)`` subset, kept in original order."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    n = math.ceil(fraction * len(videos))
    if n == 0:
        raise ValueError("empty training subsample")
    rng = np.random.default_rng([0xF4AC, seed])
    keep = np.sort(rng.choice(len(videos), size=n, replace=False))
    return [videos[k] for k in keep]


@dataclass
class HeadTrainingResult:
    encoder: Encoder
    head: SegmentationHead
    epoch_losses: list = field(default_factory=list)
    videos_used: list = field(default_factory=list)


def _frame_loss(logits: torch.Tensor, target: np.ndarray, task_kind: str) -> torch.Tensor:
    if task_kind == MULTICLASS:
        return F.cross_entropy(logits[0].T, torch.as_tensor(target.argmax(axis=1)))
    return F.binary_cross_entropy_with_logits(logits[0].T, torch.as_tensor(target, dtype=logits.dtype))


def train_head(encoder: Encoder, videos: list, mode: str, task_kind: str, num_classes: int,
               fraction: float = 1.0, epochs: int = 20, seed: int = 0, lr: float = 0.05,
               momentum: float = 0.9) -> HeadTrainingResult:
    """Fit a frame-wise head (linear: frozen encoder; finetune: joint), one video per step.

    The input encoder is never modified; fine-tuning works on a copy.
    """
    if mode not in ("linear", "finetune"):
        raise ValueError(f"unknown mode {mode!r}")
    videos = subsample(videos, fraction, seed)
    for v in videos:
        if v.task_kind != task_kind:
            raise ValueError(f"video {v.video_id} is {v.task_kind}, expected {task_kind}")
    torch.manual_seed(seed)
    rng = np.random.default_rng([0x4EAD, seed])
    enc = encoder if mode == "linear" else copy.deepcopy(encoder)
    head = SegmentationHead(enc.config.c2, num_classes, task_kind, seed=seed).to(enc.dtype)
    targets = [frame_labels_from_annotations(v, num_classes) for v in videos]

    params = list(head.parameters())
    enc.eval()
    with torch.no_grad():
        feats = [enc(enc.as_input(v.frames)) for v in videos]
    head.set_feature_statistics(feats)
    if mode == "finetune":
        params += list(enc.parameters())
    opt = torch.optim.SGD(params, lr=lr, momentum=momentum, nesterov=momentum > 0)

    result = HeadTrainingResult(enc, head, videos_used=[v.video_id for v in videos])
    for _ in range(epochs):
        losses = []
        for k in rng.permutation(len(videos)):
            if mode == "linear":
                h = feats[k]
            else:
                enc.train()
                h = enc(enc.as_input(videos[k].frames))
            loss = _frame_loss(head(h), targets[k], task_kind)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        result.epoch_losses.append(float(np.mean(losses)))
    return result


def write_prediction_dump(path, predictions: dict) -> None:
    """JSON lines ``{"video_id", "scores"}`` with scores rounded to 6 decimals."""
    with open(path, "w") as fh:
        for vid in sorted(predictions):
            scores = np.round(predictions[vid].scores, 6)
            fh.write(json.dumps({"video_id": int(vid), "scores": scores.tolist()}) + "\n")


def read_prediction_dump(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[int(rec["video_id"])] = np.asarray(rec["scores"], dtype=np.float64)
    return out
