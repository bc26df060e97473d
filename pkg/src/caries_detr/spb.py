"""Structure perception branch and its self-supervised pretraining.

The branch regresses the log-compressed Scharr edge map of the input image
(pooled to feature resolution) from frozen backbone features, with an L1
loss on the sigmoid output.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import AdamW, Conv2d, Module, ShapeError, Tensor, no_grad, relu, save_checkpoint, sigmoid
from .data import images_to_tensor
from .imgproc import downsample_avg, read_rgb, struct_target_from_rgb

log = logging.getLogger(__name__)


class SpbNet(Module):
    def __init__(self, c_feat: int, rng: np.random.Generator, width: int = 32):
        self.conv1 = Conv2d(c_feat, width, 3, rng, padding=1)
        self.conv2 = Conv2d(width, width, 3, rng, padding=1)
        self.conv3 = Conv2d(width, 1, 1, rng)
        self.c_feat = c_feat

    def __call__(self, feat: Tensor) -> Tensor:
        return spb_forward(self, feat)


def spb_forward(net: SpbNet, feat: Tensor) -> Tensor:
    """Raw (pre-sigmoid) structural map [.., 1, h, w] for features [.., C, h, w]."""
    if feat.shape[-3] != net.c_feat:
        raise ShapeError(f"SPB expects {net.c_feat} feature channels, got {feat.shape[-3]}")
    x = relu(net.conv1(feat))
    x = relu(net.conv2(x))
    return net.conv3(x)


@dataclass
class PretrainCorpus:
    paths: list[Path]
    seed: int = 0

    def __post_init__(self):
        if not self.paths:
            raise ValueError("pretraining corpus is empty")


@dataclass
class PretrainResult:
    losses: list[float] = field(default_factory=list)  # index 0 = before training
    skipped: list[str] = field(default_factory=list)


def load_corpus_images(corpus: PretrainCorpus) -> tuple[np.ndarray, list[str]]:
    images, skipped = [], []
    shape = None
    for p in corpus.paths:
        try:
            img = read_rgb(p)
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable image %s (%s)", p, exc)
            skipped.append(str(p))
            continue
        if shape is not None and img.shape != shape:
            log.warning("skipping %s: size %s differs from %s", p, img.shape, shape)
            skipped.append(str(p))
            continue
        shape = img.shape
        images.append(img)
    if not images:
        raise ValueError("no readable images in the pretraining corpus")
    return np.stack(images), skipped


def structural_targets(images: np.ndarray, stride: int) -> np.ndarray:
    """[N, h, w] pooled structural targets for uint8 [N, H, W, 3] images."""
    return np.stack([downsample_avg(struct_target_from_rgb(im), stride) for im in images])


def l1_loss(net: SpbNet, feats: Tensor, targets: np.ndarray) -> Tensor:
    pred = sigmoid(spb_forward(net, feats))
    return (pred - Tensor(targets[:, None])).abs().mean()


def pretrain_on_arrays(images: np.ndarray, backbone, net: SpbNet, epochs: int = 20, batch: int = 16,
                       lr: float = 1e-3, weight_decay: float = 1e-4, seed: int = 0,
                       hflip: bool = False) -> PretrainResult:
    """Fit ``net`` on frozen ``backbone`` features; returns the per-epoch corpus loss."""
    x = images_to_tensor(images)
    targets = structural_targets(images, stride=backbone.stride)
    with no_grad():
        feats = backbone(Tensor(x)).data
        if hflip:
            feats_f = backbone(Tensor(x[..., ::-1].copy())).data
            targets_f = targets[..., ::-1].copy()
    opt = AdamW(net.parameters(), lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    result = PretrainResult()

    def corpus_loss() -> float:
        with no_grad():
            return float(l1_loss(net, Tensor(feats), targets).data)

    result.losses.append(corpus_loss())
    n = len(x)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            fb, tb = feats[idx], targets[idx]
            if hflip:
                flip = rng.random(len(idx)) < 0.5
                fb = np.where(flip[:, None, None, None], feats_f[idx], fb)
                tb = np.where(flip[:, None, None], targets_f[idx], tb)
            opt.zero_grad()
            loss = l1_loss(net, Tensor(fb), tb)
            loss.backward()
            opt.step()
        result.losses.append(corpus_loss())
    return result


def pretrain(corpus: PretrainCorpus, backbone, net: SpbNet, epochs: int = 20, batch: int = 16,
             lr: float = 1e-3, weight_decay: float = 1e-4, out_dir=None, hflip: bool = False) -> PretrainResult:
    images, skipped = load_corpus_images(corpus)
    result = pretrain_on_arrays(images, backbone, net, epochs, batch, lr, weight_decay, corpus.seed, hflip)
    result.skipped = skipped
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_spb(out / "spb.ckpt", backbone, net, {"lr": lr, "weight_decay": weight_decay, "epochs": epochs,
                                                    "batch": batch})
        with open(out / "pretrain_loss.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "mean_l_pre"])
            for e, v in enumerate(result.losses):
                w.writerow([e, repr(v)])
    return result


def save_spb(path, backbone, net: SpbNet, optimizer: dict | None = None) -> None:
    arrays = {f"backbone.{k}": v for k, v in backbone.state_arrays().items()}
    arrays.update({f"spb.{k}": v for k, v in net.state_arrays().items()})
    save_checkpoint(path, arrays, optimizer=optimizer, meta={"kind": "spb"})


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.corrcoef(a, b)[0, 1])


def heldout_correlation(images: np.ndarray, backbone, net: SpbNet) -> float:
    """Pearson correlation between predicted saliency and pooled targets, pooled over images."""
    targets = structural_targets(images, backbone.stride)
    with no_grad():
        pred = sigmoid(spb_forward(net, backbone(Tensor(images_to_tensor(images))))).data[:, 0]
    return pearson(pred, targets)
