"""Small supervised predictor that plays the pseudo-ground-truth role for the
GAN/VQ recovery loops, where targets must be computed on generated images.

Trained on (renderer RGB -> exact GT) pairs with the kind's distance metric,
then frozen and evaluated on arbitrary images.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataset import Dataset
from .distances import DistanceMetric, TrainLog, distance
from .intrinsics import (
    CodecParams,
    EncodedTarget,
    Image,
    IntrinsicKind,
    IntrinsicMap,
    decode_intrinsic,
    encode_intrinsic,
)
from .sampler import _load_pairs


class _EncoderDecoder(nn.Module):
    def __init__(self, ch: int = 32):
        super().__init__()
        self.down1 = nn.Conv2d(3, ch, 4, stride=2, padding=1)
        self.down2 = nn.Conv2d(ch, ch * 2, 4, stride=2, padding=1)
        self.mid = nn.Conv2d(ch * 2, ch * 2, 3, padding=1)
        self.up1 = nn.Conv2d(ch * 2, ch, 3, padding=1)
        self.up2 = nn.Conv2d(ch + 3, ch, 3, padding=1)
        self.out = nn.Conv2d(ch, 3, 3, padding=1)

    def forward(self, x):
        h1 = F.silu(self.down1(x))
        h2 = F.silu(self.down2(h1))
        h = F.silu(self.mid(h2))
        h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
        h = F.silu(self.up1(h))
        h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
        h = F.silu(self.up2(torch.cat([h, x], dim=1)))
        return self.out(h)


class OraclePredictor:
    """Frozen rgb -> encoded-intrinsic predictor for one kind."""

    def __init__(self, kind: IntrinsicKind, net: _EncoderDecoder, codec: CodecParams, val_loss: float):
        self.kind = kind
        self.net = net
        self.codec = codec
        self.val_loss = val_loss
        for p in self.net.parameters():
            p.requires_grad_(False)

    def predict_encoded(self, rgb: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) model-space RGB -> (B, 3, H, W) encoded intrinsic."""
        with torch.no_grad():
            return self.net(rgb).clamp(-1.0, 1.0)

    def predict(self, image: Image) -> IntrinsicMap:
        x = torch.from_numpy(image.data).permute(2, 0, 1)[None]
        enc = self.predict_encoded(x)[0].permute(1, 2, 0).numpy()
        return decode_intrinsic(EncodedTarget(self.kind, enc, self.codec))


def train_oracle_predictor(
    dataset: Dataset,
    kind: IntrinsicKind,
    steps: int = 1500,
    seed: int = 0,
    batch_size: int = 8,
    lr: float = 1e-3,
    metric: DistanceMetric | None = None,
) -> tuple[OraclePredictor, TrainLog]:
    train_idx = dataset.split_indices("train")
    if len(train_idx) < 200:
        raise ValueError(f"oracle training needs >= 200 train samples, got {len(train_idx)}")
    if metric is None:
        metric = DistanceMetric.COS_PLUS_L1 if kind is IntrinsicKind.NORMAL else DistanceMetric.MSE
    codec = dataset.manifest.codec_params
    xs, ys = _load_pairs(dataset, train_idx, kind, codec)
    val_idx = dataset.split_indices("val")
    vx, vy = _load_pairs(dataset, val_idx, kind, codec)

    torch.manual_seed(seed)
    net = _EncoderDecoder()
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    rng = np.random.default_rng([0x04AC1E, seed])
    log = TrainLog()
    for step in range(1, steps + 1):
        idx = rng.integers(0, xs.shape[0], size=batch_size)
        pred = net(xs[idx])
        loss = distance(metric, pred.permute(0, 2, 3, 1), ys[idx].permute(0, 2, 3, 1))
        if not torch.isfinite(loss):
            raise RuntimeError(f"oracle training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 50 == 0 or step == 1:
            log.log(step, float(loss.detach()))

    with torch.no_grad():
        val_loss = float(
            distance(metric, net(vx).permute(0, 2, 3, 1), vy.permute(0, 2, 3, 1))
        )
    log.extras["val_loss"] = val_loss
    return OraclePredictor(kind, net, codec, val_loss), log
