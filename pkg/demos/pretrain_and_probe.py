"""Pretrain a small encoder on synthetic clips, then fit a linear segmentation probe.

The probe of a randomly initialised encoder is printed first for reference.
This is one seed of the desk-scale setting checked by the acceptance suite
and takes about three minutes on one CPU core.

    python3 demos/pretrain_and_probe.py
"""
import numpy as np

from duoclr import PretrainConfig, pretrain, synth_trimmed, synth_untrimmed
from duoclr.encoder import Encoder
from duoclr.metrics import multiclass_report
from duoclr.segmentation import segment_forward, train_head

K = 5
clips = [synth_trimmed(k, 48, 0.05, camera_seed=[k, i], motion_seed=[k, i, 1], clip_id=k * 40 + i)
         for k in range(K) for i in range(40)]
rng = np.random.default_rng(0)
videos = [synth_untrimmed(rng.choice(K, size=3, replace=False), 48, 0.05, seed=n, video_id=n,
                          split="train" if n < 50 else "test") for n in range(100)]
train = [v for v in videos if v.split == "train"]
test = {v.video_id: v for v in videos if v.split == "test"}


def probe(encoder):
    head = train_head(encoder, train, "linear", "multiclass", K, seed=0)
    scores = {vid: segment_forward(head.encoder, head.head, v).scores for vid, v in test.items()}
    return multiclass_report(scores, test, K)


def show(name, report):
    print(f"{name:>8}: " + ", ".join(f"{k} {report[k]:.3f}" for k in ("Acc", "mIoU", "mAP@0.1")))


show("random", probe(Encoder(seed=0)))
result = pretrain(clips, PretrainConfig())
print(f"ROR loss {result.log[0]['mean_ror']:.2f} in the first epoch, "
      f"{result.log[-1]['mean_ror']:.2f} in the last")
show("DuoCLR", probe(result.encoder))
