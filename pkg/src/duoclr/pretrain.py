"""DuoCLR pretraining loop and the supervised recognition baseline."""

from __future__ import annotations

import json
import math
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import augment
from .cpc import BankSet, cpc_terms, update_banks
from .data import Dataset, TrimmedClip
from .encoder import Encoder, EncoderConfig, momentum_copy, momentum_update, project_batch, save_checkpoint
from .ror import MappingLabel, RORHead, mapping_index, positional_encoding, ror_loss

AUGMENTATIONS = ("shuffle", "warp", "shear", "crop")
OBJECTIVES = ("cpc", "ror")


@dataclass
class PretrainConfig:
    granularity: int = 3
    alpha: float = 0.5
    tau: float = 0.07
    class_bank_size: int = 684
    permutation_bank_size: int = 32768
    momentum: float = 0.99
    p_same: float = 0.5
    supervised: bool = True
    augmentations: tuple = ("shuffle", "warp")
    objectives: tuple = ("cpc", "ror")
    epochs: int = 60
    batch_size: int = 4
    learning_rate: float = 0.01
    sgd_momentum: float = 0.9
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.augmentations = tuple(self.augmentations)
        self.objectives = tuple(self.objectives)
        if self.granularity < 1:
            raise ValueError("pretrain.granularity must be >= 1")
        if not self.tau > 0:
            raise ValueError("pretrain.tau must be positive")
        if not 0 <= self.p_same <= 1:
            raise ValueError("pretrain.p_same must lie in [0, 1]")
        if self.alpha < 0:
            raise ValueError("pretrain.alpha must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("pretrain.momentum must lie in [0, 1)")
        if unknown := set(self.augmentations) - set(AUGMENTATIONS):
            raise ValueError(f"pretrain.augmentations: unknown {sorted(unknown)}")
        if unknown := set(self.objectives) - set(OBJECTIVES):
            raise ValueError(f"pretrain.objectives: unknown {sorted(unknown)}")
        if self.grad_clip < 0:
            raise ValueError("pretrain.grad_clip must be >= 0 (0 disables clipping)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("pretrain.epochs must be >= 0 and pretrain.batch_size >= 1")

    @property
    def effective_granularity(self) -> int:
        # without shuffling every view holds a single clip
        return self.granularity if "shuffle" in self.augmentations else 1


@dataclass
class StepReport:
    loss_cpc: float
    loss_ror: float
    loss_total: float
    lambda_used: int
    label: MappingLabel
    perm_i: tuple
    perm_j: tuple
    loss_instance: float = 0.0
    loss_permutation: float = 0.0


# -- sampling --------------------------------------------------------------------

def _clips(dataset) -> list[TrimmedClip]:
    return dataset.clips if isinstance(dataset, Dataset) else list(dataset)


def sample_clip_set(dataset, granularity: int, supervised: bool, rng: np.random.Generator) -> dict:
    """Draw ``granularity`` clips keyed by class label (supervised) or clip id."""
    clips = _clips(dataset)
    if supervised:
        by_class = defaultdict(list)
        for c in clips:
            if c.action_label is None:
                raise ValueError("supervised sampling needs labelled clips")
            by_class[c.action_label].append(c)
        classes = sorted(by_class)
        if len(classes) < granularity:
            raise ValueError(f"need {granularity} distinct classes, dataset has {len(classes)}")
        chosen = rng.choice(len(classes), size=granularity, replace=False)
        out = {}
        for k in chosen:
            pool = by_class[classes[k]]
            out[classes[k]] = pool[int(rng.integers(len(pool)))]
        return out
    if len(clips) < granularity:
        raise ValueError(f"need {granularity} clips, dataset has {len(clips)}")
    chosen = rng.choice(len(clips), size=granularity, replace=False)
    return {clips[k].clip_id: clips[k] for k in chosen}


def draw_permutations(keys, p_same: float, rng: np.random.Generator) -> tuple[tuple, tuple]:
    """Uniform ``perm_i``; ``perm_j`` equals it with probability ``p_same``, else uniform over the rest."""
    keys = list(keys)
    perm_i = tuple(keys[k] for k in rng.permutation(len(keys)))
    same = rng.random() < p_same
    if same or len(keys) == 1:
        return perm_i, perm_i
    while True:
        perm_j = tuple(keys[k] for k in rng.permutation(len(keys)))
        if perm_j != perm_i:
            return perm_i, perm_j


def build_view(clip_set: dict, perm, config: PretrainConfig, rng: np.random.Generator):
    """Per-clip shear/crop (when enabled), then shuffle and warp."""
    frames = {}
    for key, clip in clip_set.items():
        x = clip.frames if isinstance(clip, TrimmedClip) else clip
        if "shear" in config.augmentations:
            x = augment.shear(x, rng)
        if "crop" in config.augmentations:
            x = augment.crop(x, rng)
        frames[key] = x
    return augment.shuffle_and_warp(frames, perm, warp="warp" in config.augmentations)


# -- losses ----------------------------------------------------------------------

def encode_views(encoder: Encoder, views) -> list:
    """Projection sets for a list of permutations, batching views of equal shape."""
    out = [None] * len(views)
    groups = defaultdict(list)
    for idx, v in enumerate(views):
        groups[v.frames.shape].append(idx)
    for idxs in groups.values():
        x = torch.as_tensor(np.stack([views[i].frames for i in idxs])).to(encoder.dtype)
        h = encoder(x)
        projs = project_batch(encoder, h, [views[i].boundaries for i in idxs],
                              [views[i].permutation for i in idxs])
        for i, p in zip(idxs, projs):
            out[i] = p
    return out


def pair_losses(proj_i, proj_j, head: RORHead, banks: BankSet, perm_i, perm_j,
                config: PretrainConfig):
    """``(total, cpc_terms, ror, label)`` for one pair of projection sets."""
    label = mapping_index(perm_i, perm_j)
    zero = proj_i.global_.sum() * 0
    if "cpc" in config.objectives:
        terms = cpc_terms(proj_i, proj_j, banks, perm_i, perm_j, config.tau)
    else:
        terms = None
    cpc = terms.total if terms is not None else zero
    if "ror" in config.objectives:
        pe = positional_encoding(proj_i, proj_j, perm_i, perm_j)
        ror = ror_loss(head, pe, label)
    else:
        ror = zero
    return cpc + config.alpha * ror, terms, cpc, ror, label


def pair_loss(encoder: Encoder, key_encoder: Encoder, head: RORHead, banks: BankSet,
              view_i, view_j, config: PretrainConfig) -> torch.Tensor:
    """Scalar objective ``L_CPC + alpha * L_ROR`` for one pair of views.

    Gradients reach ``key_encoder`` only if its parameters require grad.
    """
    (proj_i,) = encode_views(encoder, [view_i])
    (proj_j,) = encode_views(key_encoder, [view_j])
    return pair_losses(proj_i, proj_j, head, banks, view_i.permutation, view_j.permutation, config)[0]


@dataclass
class Trainer:
    """Mutable pretraining state: query and key encoders, ROR head, banks, optimizer."""

    encoder: Encoder
    key_encoder: Encoder
    head: RORHead
    banks: BankSet
    config: PretrainConfig
    optimizer: torch.optim.Optimizer

    @classmethod
    def create(cls, config: PretrainConfig, encoder_config: EncoderConfig | None = None,
               dtype=torch.float32) -> Trainer:
        encoder = Encoder(encoder_config, seed=config.seed).to(dtype)
        key_encoder = momentum_copy(encoder)
        head = RORHead(encoder.config.c3, config.effective_granularity, seed=config.seed + 1).to(dtype)
        banks = BankSet(config.class_bank_size, config.permutation_bank_size)
        params = list(encoder.parameters()) + list(head.parameters())
        opt = torch.optim.SGD(params, lr=config.learning_rate, momentum=config.sgd_momentum,
                              nesterov=config.sgd_momentum > 0)
        return cls(encoder, key_encoder, head, banks, config, opt)

    def step(self, clip_sets: list[dict], rng: np.random.Generator) -> list[StepReport]:
        """One optimizer step over a batch of clip sets."""
        cfg = self.config
        views_i, views_j = [], []
        for clip_set in clip_sets:
            if len(clip_set) != cfg.effective_granularity:
                raise ValueError("clip set size does not match the granularity")
            perm_i, perm_j = draw_permutations(clip_set, cfg.p_same, rng)
            views_i.append(build_view(clip_set, perm_i, cfg, rng))
            views_j.append(build_view(clip_set, perm_j, cfg, rng))

        self.encoder.train()
        self.key_encoder.train()
        projs_i = encode_views(self.encoder, views_i)
        with torch.no_grad():
            projs_j = encode_views(self.key_encoder, views_j)

        if cfg.supervised:
            loss_banks = self.banks
        else:
            # clip ids never recur, so only this batch's other slots act as class negatives
            loss_banks = self.banks.with_fresh_class_banks()
            for v, p in zip(views_j, projs_j):
                for m in v.permutation:
                    loss_banks.bank(m).enqueue(p.local[m])

        reports = []
        total = 0
        for vi, vj, pi, pj in zip(views_i, views_j, projs_i, projs_j):
            loss, terms, cpc, ror, label = pair_losses(pi, pj, self.head, loss_banks,
                                                       vi.permutation, vj.permutation, cfg)
            total = total + loss
            # the reported total is summed in double precision from the reported parts
            reports.append(StepReport(
                loss_cpc=cpc.item(), loss_ror=ror.item(),
                loss_total=cpc.item() + cfg.alpha * ror.item(),
                lambda_used=int(vi.permutation != vj.permutation), label=label,
                perm_i=vi.permutation, perm_j=vj.permutation,
                loss_instance=terms.instance.item() if terms else 0.0,
                loss_permutation=terms.permutation.item() if terms else 0.0))
        total = total / len(clip_sets)

        self.optimizer.zero_grad(set_to_none=True)
        if total.requires_grad:
            total.backward()
            if cfg.grad_clip > 0:
                params = [p for group in self.optimizer.param_groups for p in group["params"]]
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            self.optimizer.step()
        momentum_update(self.key_encoder, self.encoder, cfg.momentum)
        for v, p in zip(views_j, projs_j):
            if cfg.supervised:
                update_banks(self.banks, p, v.permutation)
            else:
                self.banks.permutation_bank.enqueue(p.global_)
        return reports


def pretrain_step(trainer: Trainer, clip_set: dict, rng: np.random.Generator) -> StepReport:
    return trainer.step([clip_set], rng)[0]


@dataclass
class PretrainResult:
    encoder: Encoder
    trainer: Trainer
    log: list = field(default_factory=list)
    steps: list = field(default_factory=list)


def pretrain(dataset, config: PretrainConfig, encoder_config: EncoderConfig | None = None,
             checkpoint_path=None, log_path=None) -> PretrainResult:
    """Run DuoCLR pretraining on trimmed clips.

    Each epoch has ``len(clips) // (G * batch_size)`` steps (at least one).
    Deterministic given the dataset and ``config.seed``.
    """
    clips = _clips(dataset)
    g = config.effective_granularity
    torch.manual_seed(config.seed)
    rng = np.random.default_rng([0xD0C, config.seed])
    trainer = Trainer.create(config, encoder_config)
    steps_per_epoch = max(1, len(clips) // (g * config.batch_size))
    result = PretrainResult(trainer.encoder, trainer)
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            reports = []
            for _ in range(steps_per_epoch):
                sets = [sample_clip_set(clips, g, config.supervised, rng)
                        for _ in range(config.batch_size)]
                reports.extend(trainer.step(sets, rng))
            entry = {
                "epoch": epoch,
                "mean_cpc": float(np.mean([r.loss_cpc for r in reports])),
                "mean_ror": float(np.mean([r.loss_ror for r in reports])),
                "mean_total": float(np.mean([r.loss_total for r in reports])),
                "wall_seconds": round(time.perf_counter() - t0, 3),
            }
            result.log.append(entry)
            result.steps.extend(reports)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_path:
        save_checkpoint(trainer.encoder, checkpoint_path,
                        extra={"method": "duoclr", "pretrain": asdict(config)})
    return result


# -- Baseline-I -------------------------------------------------------------------

@dataclass
class BaselineResult:
    encoder: Encoder
    classifier: torch.nn.Linear
    train_accuracy: list = field(default_factory=list)
    log: list = field(default_factory=list)


def train_baseline_recognition(dataset, encoder_config: EncoderConfig | None = None,
                               epochs: int = 10, lr: float = 0.01, seed: int = 0,
                               batch_size: int = 8, checkpoint_path=None,
                               log_path=None) -> BaselineResult:
    """Supervised clip classification: temporal mean of the features, then an affine layer.

    No augmentation. Only the encoder is meant to be transferred.
    """
    clips = _clips(dataset)
    if not clips or any(c.action_label is None for c in clips):
        raise ValueError("baseline recognition needs labelled clips")
    num_classes = (dataset.num_classes if isinstance(dataset, Dataset)
                   else max(c.action_label for c in clips) + 1)
    torch.manual_seed(seed)
    rng = np.random.default_rng([0xBA5E, seed])
    encoder = Encoder(encoder_config, seed=seed)
    classifier = torch.nn.Linear(encoder.config.c2, num_classes)
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        b = 1.0 / math.sqrt(encoder.config.c2)
        classifier.weight.uniform_(-b, b, generator=gen)
        classifier.bias.zero_()
    params = list(encoder.parameters()) + list(classifier.parameters())
    opt = torch.optim.SGD(params, lr=lr, momentum=0.9, nesterov=True)
    result = BaselineResult(encoder, classifier)
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(epochs):
            t0 = time.perf_counter()
            order = rng.permutation(len(clips))
            correct, losses = 0, []
            for start in range(0, len(order), batch_size):
                batch = [clips[k] for k in order[start:start + batch_size]]
                groups = defaultdict(list)
                for c in batch:
                    groups[c.frames.shape].append(c)
                opt.zero_grad(set_to_none=True)
                loss_sum = 0
                for group in groups.values():
                    x = torch.as_tensor(np.stack([c.frames for c in group])).to(encoder.dtype)
                    y = torch.tensor([c.action_label for c in group])
                    logits = classifier(encoder(x).mean(dim=2))
                    loss_sum = loss_sum + F.cross_entropy(logits, y, reduction="sum")
                    correct += int((logits.argmax(dim=1) == y).sum())
                loss = loss_sum / len(batch)
                loss.backward()
                opt.step()
                losses.append(loss.item())
            acc = correct / len(clips)
            result.train_accuracy.append(acc)
            entry = {"epoch": epoch, "mean_ce": float(np.mean(losses)), "train_accuracy": acc,
                     "wall_seconds": round(time.perf_counter() - t0, 3)}
            result.log.append(entry)
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_path:
        save_checkpoint(encoder, checkpoint_path, extra={"method": "baseline"})
    return result
