"""Toy end-to-end detector: conv backbone, structure-aware queries, attention decoder."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .autograd import (
    MLP,
    AdamW,
    Conv2d,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    Tensor,
    load_checkpoint,
    matmul,
    no_grad,
    relu,
    reshape,
    save_checkpoint,
    sigmoid,
    softmax,
    transpose,
    tsum,
)
from .data import hflip, images_to_tensor
from .ldlr import FocalConfig, LossBreakdown, SensitivityConfig, focal_terms, total_loss
from .matcher import hungarian, match_cost
from .spb import SpbNet
from .structures import Detection, GroundTruthSet
from .tsqi import (
    AnchorSet,
    QuerySet,
    anchors_from_index,
    build_queries,
    compute_saliency,
    hybrid_scores,
    positional_encoding,
    select_topk,
    semantic_logits,
    semantic_scores,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 40
    batch: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    topk: int = 12
    lambda_init: float = 1.0
    eta_cls: float = 0.5
    eta_bbox: float = 0.5
    eta_iou: float = 0.5
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    seed: int = 0
    no_tsqi: bool = False
    no_ldlr: bool = False
    freeze_spb: bool = False
    hflip: bool = True
    image_size: int = 64
    num_classes: int = 3
    d_model: int = 64
    d_pe: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ffn: int = 128
    sem_loss_weight: float = 1.0

    def validate(self, max_gts: int | None = None) -> None:
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be positive")
        if self.image_size % 8:
            raise ValueError("image size must be a multiple of 8")
        cells = (self.image_size // 8) ** 2
        if not 0 < self.topk <= cells:
            raise ValueError(f"topk={self.topk} must lie in 1..{cells}")
        if max_gts is not None and self.topk < max_gts:
            raise ValueError(f"topk={self.topk} is smaller than the largest ground-truth count {max_gts}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model != ToyBackbone.c_out:
            # the decoder attends straight over backbone features
            raise ValueError(f"d_model must equal the backbone width {ToyBackbone.c_out}")
        SensitivityConfig(self.eta_cls, self.eta_bbox, self.eta_iou)

    def sensitivity(self) -> SensitivityConfig:
        if self.no_ldlr:
            return SensitivityConfig(0.0, 0.0, 0.0)
        return SensitivityConfig(self.eta_cls, self.eta_bbox, self.eta_iou)

    def focal(self) -> FocalConfig:
        return FocalConfig(self.focal_alpha, self.focal_gamma)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class ToyBackbone(Module):
    """Three stride-2 3x3 conv + relu blocks: 3 -> 16 -> 32 -> 64 channels, stride 8."""

    stride = 8
    c_out = 64

    def __init__(self, rng: np.random.Generator, c_feat: int = 64):
        self.blocks = [Conv2d(3, 16, 3, rng, stride=2, padding=1),
                       Conv2d(16, 32, 3, rng, stride=2, padding=1),
                       Conv2d(32, c_feat, 3, rng, stride=2, padding=1)]
        self.c_feat = c_feat

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.blocks:
            x = relu(conv(x))
        return x


class DecoderLayer(Module):
    def __init__(self, d: int, n_heads: int, d_ffn: int, rng: np.random.Generator, attn_init: float = 2.0):
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)
        self.norm1 = LayerNorm(d)
        self.ffn = MLP([d, d_ffn, d], rng)
        self.norm2 = LayerNorm(d)
        self.n_heads = n_heads
        # scaled-identity query/key maps: positional terms dominate at init, so
        # each query starts out attending around its own anchor
        self.wq.weight.data[:] = np.eye(d) * attn_init
        self.wk.weight.data[:] = np.eye(d) * attn_init

    def __call__(self, x: Tensor, memory: Tensor, memory_pos: Tensor, query_pos: Tensor) -> Tensor:
        b, k, d = x.shape
        n = memory.shape[1]
        hd = d // self.n_heads
        q = transpose(reshape(self.wq(x + query_pos), (b, k, self.n_heads, hd)), (0, 2, 1, 3))
        kk = transpose(reshape(self.wk(memory + memory_pos), (b, n, self.n_heads, hd)), (0, 2, 3, 1))
        v = transpose(reshape(self.wv(memory), (b, n, self.n_heads, hd)), (0, 2, 1, 3))
        attn = softmax(matmul(q, kk) * (1.0 / math.sqrt(hd)), axis=-1)
        out = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (b, k, d))
        x = self.norm1(x + self.wo(out))
        return self.norm2(x + self.ffn(x))


class ToyDecoder(Module):
    def __init__(self, cfg: TrainConfig, rng: np.random.Generator):
        self.layers = [DecoderLayer(cfg.d_model, cfg.n_heads, cfg.d_ffn, rng) for _ in range(cfg.n_layers)]


class Heads(Module):
    def __init__(self, cfg: TrainConfig, rng: np.random.Generator):
        self.cls = Linear(cfg.d_model, cfg.num_classes, rng)
        self.box = MLP([cfg.d_model, cfg.d_model, cfg.d_model, 4], rng)
        # focal prior: start every class near probability 0.01
        self.cls.bias.data[:] = -math.log(99.0)
        # boxes start exactly at the reference
        self.box.layers[-1].weight.data[:] = 0.0

    def __call__(self, x: Tensor, ref: np.ndarray) -> tuple[Tensor, Tensor]:
        ref = np.clip(ref, 1e-4, 1 - 1e-4)
        boxes = sigmoid(self.box(x) + np.log(ref / (1.0 - ref)))
        return self.cls(x), boxes


class CariesDETR(Module):
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        streams = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(6)]
        self.backbone = ToyBackbone(streams[0])
        self.spb = SpbNet(self.backbone.c_feat, streams[1])
        self.sem_head = Conv2d(self.backbone.c_feat, cfg.num_classes, 1, streams[2])
        self.sem_head.bias.data[:] = -math.log(99.0)
        self.lam = Parameter(np.array([cfg.lambda_init]))
        self.psi = Linear(cfg.d_pe + 1, cfg.d_model, streams[3])
        self.decoder = ToyDecoder(cfg, streams[4])
        self.heads = Heads(cfg, streams[5])
        grid = cfg.image_size // ToyBackbone.stride
        gy, gx = np.divmod(np.arange(grid * grid), grid)
        self.memory_pos = positional_encoding((gx + 0.5) / grid, (gy + 0.5) / grid, cfg.d_model)

    def trainable(self) -> dict[str, Parameter]:
        params = self.parameters()
        skip = []
        if self.cfg.no_tsqi:
            skip += ["spb.", "lam"]
        elif self.cfg.freeze_spb:
            skip += ["spb."]
        return {k: p for k, p in params.items() if not any(k.startswith(s) for s in skip)}


@dataclass
class ForwardOutput:
    anchors: AnchorSet
    queries: QuerySet
    layers: list[tuple[Tensor, Tensor]]  # (logits [B, K, C], boxes [B, K, 4]) per decoder layer
    saliency: Tensor | None = None
    semantic: Tensor | None = None
    hybrid: Tensor | None = None
    sem_logits: Tensor | None = None

    @property
    def logits(self) -> Tensor:
        return self.layers[-1][0]

    @property
    def boxes(self) -> Tensor:
        return self.layers[-1][1]


def forward(model: CariesDETR, images: np.ndarray, anchor_index: np.ndarray | None = None) -> ForwardOutput:
    """Run the pipeline on float images [B, 3, H, W].

    ``anchor_index`` pins the top-K cell selection (for gradient checks).
    """
    cfg = model.cfg
    if images.ndim != 4 or images.shape[1:] != (3, cfg.image_size, cfg.image_size):
        raise ValueError(f"expected images [B, 3, {cfg.image_size}, {cfg.image_size}], got {images.shape}")
    feat = model.backbone(Tensor(images))
    sem_logits = semantic_logits(feat, model.sem_head)
    sem = semantic_scores(feat, model.sem_head, sem_logits)
    sal = hyb = None
    if cfg.no_tsqi:
        score_map = sem
    else:
        sal = compute_saliency(feat, model.spb)
        hyb = hybrid_scores(sem, sal, model.lam)
        score_map = hyb
    if anchor_index is None:
        anchors = select_topk(score_map, cfg.topk)
    else:
        anchors = anchors_from_index(score_map, anchor_index)
    queries = build_queries(anchors, model.psi, cfg.d_pe)
    b, c, h, w = feat.shape
    memory = transpose(reshape(feat, (b, c, h * w)), (0, 2, 1))
    mem_pos = Tensor(model.memory_pos)
    x = queries.embeddings
    query_pos = Tensor(positional_encoding(anchors.cx, anchors.cy, cfg.d_model))
    layers = []
    for layer in model.decoder.layers:
        x = layer(x, memory, mem_pos, query_pos)
        layers.append(model.heads(x, queries.ref_boxes))
    return ForwardOutput(anchors, queries, layers, sal, sem, hyb, sem_logits)


def detections_from_output(out: ForwardOutput, score_threshold: float = 0.0) -> list[list[Detection]]:
    probs = 1.0 / (1.0 + np.exp(-out.logits.data))
    boxes = out.boxes.data
    result = []
    for b in range(probs.shape[0]):
        cls = probs[b].argmax(axis=-1)
        score = probs[b].max(axis=-1)
        order = np.argsort(-score, kind="stable")
        result.append([Detection(boxes[b, i].copy(), int(cls[i]), float(score[i]))
                       for i in order if score[i] >= score_threshold])
    return result


@dataclass
class StepPlan:
    """Everything a training step decides discretely: anchors, matches, loss weights."""

    anchor_index: np.ndarray
    matches: list[list[tuple[int, int]]]
    weights: list[tuple[np.ndarray, np.ndarray, np.ndarray]]


def batch_loss(model: CariesDETR, images: np.ndarray, gts: list[GroundTruthSet],
               plan: StepPlan | None = None) -> tuple[Tensor, list[LossBreakdown], StepPlan]:
    """Summed per-image loss divided by the number of ground-truth boxes in the batch."""
    cfg = model.cfg
    out = forward(model, images, None if plan is None else plan.anchor_index)
    logits, boxes = out.logits, out.boxes
    if not (np.isfinite(logits.data).all() and np.isfinite(boxes.data).all()):
        raise FloatingPointError("non-finite predictions")
    probs = 1.0 / (1.0 + np.exp(-logits.data))
    sens, focal = cfg.sensitivity(), cfg.focal()
    total = None
    breakdowns = []
    matches, weights = [], []
    for b, gt in enumerate(gts):
        if plan is None:
            cost = match_cost(probs[b], boxes.data[b], gt.boxes, gt.classes)
            pairs = hungarian(cost).pairs
            w = None
        else:
            pairs, w = plan.matches[b], plan.weights[b]
        loss_b, br = total_loss(pairs, logits[b], boxes[b], gt.boxes, gt.classes, sens, focal, weights=w)
        matches.append(pairs)
        weights.append((br.w_cls, br.w_bbox, br.w_iou))
        breakdowns.append(br)
        total = loss_b if total is None else total + loss_b
    if cfg.sem_loss_weight > 0:
        total = total + proposal_loss(out.sem_logits, gts, focal) * cfg.sem_loss_weight
    norm = max(1, sum(len(g) for g in gts))
    return total * (1.0 / norm), breakdowns, StepPlan(out.anchors.flat_index.copy(), matches, weights)


def proposal_targets(gts: list[GroundTruthSet], num_classes: int, grid: int) -> np.ndarray:
    """[B, C, grid, grid] one-hot maps marking the cell holding each object's center."""
    t = np.zeros((len(gts), num_classes, grid, grid))
    for b, g in enumerate(gts):
        for box, c in zip(g.boxes, g.classes):
            gx = min(int(box[0] * grid), grid - 1)
            gy = min(int(box[1] * grid), grid - 1)
            t[b, c, gy, gx] = 1.0
    return t


def proposal_loss(sem_logits: Tensor, gts: list[GroundTruthSet], focal: FocalConfig) -> Tensor:
    """Dense focal loss supervising the semantic head that ranks anchor cells."""
    t = proposal_targets(gts, sem_logits.shape[1], sem_logits.shape[-1])
    return tsum(focal_terms(sem_logits, t, focal.alpha, focal.gamma))


@dataclass
class StepRecord:
    iteration: int
    total: float
    cls: float
    bbox: float
    giou: float
    w_cls: float
    w_bbox: float
    w_iou: float

    def row(self) -> list:
        return [self.iteration, repr(self.total), repr(self.cls), repr(self.bbox), repr(self.giou),
                repr(self.w_cls), repr(self.w_bbox), repr(self.w_iou)]


CSV_HEADER = ["iter", "total", "cls", "bbox", "giou", "mean_w_cls", "mean_w_bbox", "mean_w_iou"]


def train_step(model: CariesDETR, opt: AdamW, images: np.ndarray, gts: list[GroundTruthSet],
               iteration: int = 0) -> StepRecord:
    opt.zero_grad()
    model.zero_grad()
    try:
        loss, brs, _ = batch_loss(model, images, gts)
    except FloatingPointError as err:
        raise FloatingPointError(f"{err} at iteration {iteration} (lr={opt.state.lr})") from None
    if not np.isfinite(loss.data).all():
        raise FloatingPointError(f"non-finite loss at iteration {iteration} (lr={opt.state.lr}, "
                                 f"max|grad| before step={opt.max_abs_grad()})")
    loss.backward()
    max_grad = opt.max_abs_grad()
    if not np.isfinite(max_grad):
        raise FloatingPointError(f"non-finite gradient at iteration {iteration} (lr={opt.state.lr}, "
                                 f"max|grad|={max_grad}, loss={float(loss.data)})")
    opt.step()
    norm = max(1, sum(len(g) for g in gts))

    def mean_w(attr):
        vals = np.concatenate([getattr(b, attr) for b in brs]) if brs else np.zeros(0)
        return float(vals.mean()) if vals.size else 1.0

    return StepRecord(iteration, float(loss.data), sum(b.cls for b in brs) / norm,
                      sum(b.bbox for b in brs) / norm, sum(b.giou for b in brs) / norm,
                      mean_w("w_cls"), mean_w("w_bbox"), mean_w("w_iou"))


def build_model(cfg: TrainConfig, spb_ckpt=None) -> CariesDETR:
    model = CariesDETR(cfg)
    if spb_ckpt is not None and not cfg.no_tsqi:
        arrays, _ = load_checkpoint(spb_ckpt)
        model.backbone.load_arrays({k[len("backbone."):]: v for k, v in arrays.items() if k.startswith("backbone.")})
        model.spb.load_arrays({k[len("spb."):]: v for k, v in arrays.items() if k.startswith("spb.")})
    return model


@dataclass
class TrainResult:
    model: CariesDETR
    records: list[StepRecord] = field(default_factory=list)


def train(cfg: TrainConfig, images: np.ndarray, gts: list[GroundTruthSet], spb_ckpt=None,
          model: CariesDETR | None = None, out_dir=None, log_every: int = 0) -> TrainResult:
    """Train on uint8 images [N, H, W, 3]; deterministic in ``cfg.seed``."""
    cfg.validate(max((len(g) for g in gts), default=0))
    model = model or build_model(cfg, spb_ckpt)
    opt = AdamW(model.trainable(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(7)[6])
    x_all = images_to_tensor(images)
    n = len(x_all)
    records = []
    it = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            x = x_all[idx]
            bgts = [gts[i] for i in idx]
            if cfg.hflip:
                flip = rng.random(len(idx)) < 0.5
                fx, fboxes = hflip(x, [g.boxes for g in bgts])
                x = np.where(flip[:, None, None, None], fx, x)
                bgts = [GroundTruthSet(g.image_id, fb if f else g.boxes, g.classes)
                        for g, fb, f in zip(bgts, fboxes, flip)]
            rec = train_step(model, opt, x, bgts, it)
            records.append(rec)
            if log_every and it % log_every == 0:
                log.info("epoch %d iter %d loss %.4f", epoch, it, rec.total)
            it += 1
    if out_dir is not None:
        save_model(Path(out_dir), model, opt)
        write_loss_csv(Path(out_dir) / "loss.csv", records)
    return TrainResult(model, records)


def write_loss_csv(path: Path, records: list[StepRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow(r.row())


def save_model(out_dir: Path, model: CariesDETR, opt: AdamW | None = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "model.ckpt"
    save_checkpoint(path, model.state_arrays(), optimizer=opt.state.hyperparameters() if opt else None,
                    meta={"kind": "detector"})
    (out_dir / "config.json").write_text(json.dumps(asdict(model.cfg), indent=2, sort_keys=True) + "\n")
    return path


def load_model(path) -> CariesDETR:
    path = Path(path)
    if path.is_dir():
        path = path / "model.ckpt"
    cfg = TrainConfig.from_dict(json.loads((path.parent / "config.json").read_text()))
    model = CariesDETR(cfg)
    arrays, _ = load_checkpoint(path)
    model.load_arrays(arrays)
    return model


def infer(model: CariesDETR, images: np.ndarray, score_threshold: float = 0.0,
          batch: int = 32) -> list[list[Detection]]:
    """Detections per image (uint8 [N, H, W, 3]) with confidence >= threshold, best first."""
    x_all = images_to_tensor(images)
    result = []
    with no_grad():
        for start in range(0, len(x_all), batch):
            result.extend(detections_from_output(forward(model, x_all[start:start + batch]), score_threshold))
    return result
