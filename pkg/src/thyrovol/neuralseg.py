"""QuickNAT-lite: a small encoder-decoder network for 2-class slice segmentation.

Layout (defaults): four encoders and four decoders around a bottleneck.
Each dense block runs BN-ReLU-conv5x5, BN-ReLU-conv5x5 and BN-ReLU-conv1x1,
where every conv sees the block input concatenated with all earlier conv
outputs. Encoders end in 2x2 max pooling that hands its argmax indices to
the matching decoder, which unpools with them and concatenates the encoder
features before its own dense block. A 1x1 conv and a softmax produce
per-pixel probabilities; channel ``k`` is class ``k`` (0 background,
1 thyroid).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage
from torch import nn
from torch.nn import functional as F

from .compounder import labels_to_grid, resample_axial
from .errors import ConfigError, DataError, FormatError, ShapeError, StateError
from .grid import LabelMask, VoxelGrid

__all__ = [
    "ArchitectureSpec",
    "TrainConfig",
    "QuickNAT",
    "EpochMetrics",
    "TrainResult",
    "build_network",
    "forward",
    "loss",
    "soft_dice",
    "backward",
    "sgd_step",
    "edge_map",
    "train",
    "segment_volume",
    "make_segmenter",
    "save_checkpoint",
    "load_checkpoint",
    "write_metrics_csv",
    "read_metrics_csv",
    "SOFT_DICE_EPS",
]

SOFT_DICE_EPS = 1e-6
CHECKPOINT_MAGIC = "THYROVOL-QUICKNAT"
CHECKPOINT_VERSION = 1
METRICS_HEADER = ["epoch", "train_loss", "val_loss", "val_dice"]


@dataclass(frozen=True)
class ArchitectureSpec:
    num_encoders: int = 4
    num_decoders: int = 4
    channels: int = 16
    in_channels: int = 1
    num_classes: int = 2
    kernel_size: int = 5
    dropout: float = 0.5
    # weight of the old value in the running BN statistics
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.num_encoders != self.num_decoders:
            raise ConfigError("num_encoders must equal num_decoders")
        if self.num_encoders < 1 or self.channels < 1 or self.in_channels < 1:
            raise ConfigError("encoder count and channel widths must be positive")
        if self.num_classes != 2:
            raise ConfigError(f"the classifier has exactly 2 outputs, got num_classes={self.num_classes}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 <= self.bn_momentum < 1.0:
            raise ConfigError(f"bn_momentum must be in [0, 1), got {self.bn_momentum}")

    @property
    def divisor(self) -> int:
        return 2 ** self.num_encoders


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings.

    The effective step size is ``learning_rate * lr_scale``; the base rate
    stays at 1e-5 and ``lr_scale`` records how far a narrow network has to
    move it.
    """

    epochs: int = 20
    batch_size: int = 4
    learning_rate: float = 1e-5
    lr_scale: float = 1.0
    dice_weight: float = 1.0
    ce_weight: float = 1.0
    edge_weight_gain: float = 2.0
    optimizer: str = "sgd"
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if not (self.learning_rate > 0 and self.lr_scale > 0):
            raise ConfigError("learning_rate and lr_scale must be positive")
        if min(self.dice_weight, self.ce_weight, self.edge_weight_gain) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")

    @property
    def step_size(self) -> float:
        return self.learning_rate * self.lr_scale


# --------------------------------------------------------------------------
# network

class _DenseBlock(nn.Module):
    def __init__(self, cin: int, spec: ArchitectureSpec):
        super().__init__()
        c, k = spec.channels, spec.kernel_size
        mom = 1.0 - spec.bn_momentum
        self.bn1 = nn.BatchNorm2d(cin, eps=spec.bn_eps, momentum=mom)
        self.conv1 = nn.Conv2d(cin, c, k, padding=k // 2)
        self.bn2 = nn.BatchNorm2d(cin + c, eps=spec.bn_eps, momentum=mom)
        self.conv2 = nn.Conv2d(cin + c, c, k, padding=k // 2)
        self.bn3 = nn.BatchNorm2d(cin + 2 * c, eps=spec.bn_eps, momentum=mom)
        self.conv3 = nn.Conv2d(cin + 2 * c, c, 1)

    def forward(self, x):
        o1 = self.conv1(F.relu(self.bn1(x)))
        x1 = torch.cat([x, o1], dim=1)
        o2 = self.conv2(F.relu(self.bn2(x1)))
        x2 = torch.cat([x1, o2], dim=1)
        return self.conv3(F.relu(self.bn3(x2)))


class QuickNAT(nn.Module):
    def __init__(self, spec: ArchitectureSpec = ArchitectureSpec()):
        super().__init__()
        self.spec = spec
        c = spec.channels
        self.encoders = nn.ModuleList(
            [_DenseBlock(spec.in_channels if i == 0 else c, spec) for i in range(spec.num_encoders)])
        self.bottleneck = nn.Conv2d(c, c, spec.kernel_size, padding=spec.kernel_size // 2)
        self.bottleneck_bn = nn.BatchNorm2d(c, eps=spec.bn_eps, momentum=1.0 - spec.bn_momentum)
        self.decoders = nn.ModuleList([_DenseBlock(2 * c, spec) for _ in range(spec.num_decoders)])
        self.classifier = nn.Conv2d(c, spec.num_classes, 1)
        self.drop = nn.Dropout2d(spec.dropout)

    def forward(self, x):
        skips = []
        for enc in self.encoders:
            feat = self.drop(enc(x))
            x, idx = F.max_pool2d(feat, 2, 2, return_indices=True)
            skips.append((feat, idx))
        x = self.bottleneck_bn(self.bottleneck(x))
        for dec, (feat, idx) in zip(self.decoders, reversed(skips)):
            x = F.max_unpool2d(x, idx, 2, 2, output_size=feat.shape[-2:])
            x = self.drop(dec(torch.cat([x, feat], dim=1)))
        return torch.softmax(self.classifier(x), dim=1)


def build_network(spec: ArchitectureSpec = ArchitectureSpec(), seed: int = 0,
                  dtype=torch.float32) -> QuickNAT:
    """Fresh network with seeded default initialization."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        net = QuickNAT(spec)
    finally:
        torch.random.set_rng_state(gen_state)
    return net.to(dtype)


def _as_tensor(x, net: QuickNAT):
    dtype = next(net.parameters()).dtype
    return torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x).to(dtype)


def forward(net: QuickNAT, x, training: bool = False) -> torch.Tensor:
    """Class probabilities of shape ``(batch, 2, H, W)``.

    ``training`` switches batch statistics and dropout on. Gradients are
    tracked only in training mode.
    """
    spec = net.spec
    x = _as_tensor(x, net)
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"expected input (batch, {spec.in_channels}, H, W), got {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % spec.divisor or w % spec.divisor or h == 0 or w == 0:
        raise ShapeError(f"height and width must be positive multiples of {spec.divisor}, got {h}x{w}")
    net.train(training)
    if training:
        return net(x)
    with torch.no_grad():
        return net(x)


# --------------------------------------------------------------------------
# loss

def edge_map(mask) -> np.ndarray:
    """1.0 where the pixel and its 4-neighbors hold both classes, else 0.0."""
    m = np.asarray(mask.data if isinstance(mask, LabelMask) else mask)
    if m.ndim != 2:
        raise ShapeError(f"edge_map expects a 2D mask, got {m.ndim}D")
    cross = ndimage.generate_binary_structure(2, 1)
    hi = ndimage.maximum_filter(m, footprint=cross, mode="nearest")
    lo = ndimage.minimum_filter(m, footprint=cross, mode="nearest")
    return (hi != lo).astype(np.float64)


def soft_dice(probs: torch.Tensor, target: torch.Tensor, eps: float = SOFT_DICE_EPS) -> torch.Tensor:
    """Per-sample soft dice on the thyroid channel, shape ``(batch,)``."""
    p = probs[:, 1]
    g = target.to(p.dtype)
    num = 2.0 * (p * g).sum(dim=(-2, -1))
    return num / (p.sum(dim=(-2, -1)) + g.sum(dim=(-2, -1)) + eps)


def loss(probs: torch.Tensor, target, edges=None, cfg: TrainConfig = TrainConfig(),
         reduction: str = "mean", parts: bool = False):
    """``dice_w * (1 - soft dice) + ce_w * mean((1 + gain * edge) * CE)`` per sample.

    ``target`` and ``edges`` are ``(batch, H, W)``. ``reduction`` combines
    samples by mean or sum. With ``parts`` the dice and CE terms are
    returned too, already reduced.
    """
    if probs.ndim != 4 or probs.shape[1] != 2:
        raise ShapeError(f"probabilities must be (batch, 2, H, W), got {tuple(probs.shape)}")
    target = torch.as_tensor(np.asarray(target) if not torch.is_tensor(target) else target).long()
    if target.shape != probs.shape[:1] + probs.shape[2:]:
        raise ShapeError(f"target shape {tuple(target.shape)} does not match {tuple(probs.shape)}")
    if edges is None:
        edges = torch.zeros(target.shape, dtype=probs.dtype)
    edges = torch.as_tensor(np.asarray(edges) if not torch.is_tensor(edges) else edges).to(probs.dtype)
    if edges.shape != target.shape:
        raise ShapeError(f"edge map shape {tuple(edges.shape)} does not match target {tuple(target.shape)}")
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    dice_term = 1.0 - soft_dice(probs, target)
    p_true = probs.gather(1, target.unsqueeze(1)).squeeze(1)
    # a floor keeps log finite for exactly one-hot predictions
    ce = -torch.log(torch.clamp(p_true, min=torch.finfo(probs.dtype).tiny))
    ce_term = ((1.0 + cfg.edge_weight_gain * edges) * ce).mean(dim=(-2, -1))
    per_sample = cfg.dice_weight * dice_term + cfg.ce_weight * ce_term
    red = torch.mean if reduction == "mean" else torch.sum
    if parts:
        return red(per_sample), red(dice_term), red(ce_term)
    return red(per_sample)


def backward(net: QuickNAT, value: torch.Tensor) -> dict:
    """Backpropagate ``value``; returns ``{parameter name: gradient}``.

    Raises StateError when ``value`` was not produced by a training-mode
    forward pass (no recorded activations).
    """
    if not torch.is_tensor(value) or value.grad_fn is None:
        raise StateError("no stored activations: run forward(..., training=True) before backward")
    net.zero_grad(set_to_none=True)
    value.backward()
    return {name: (p.grad.clone() if p.grad is not None else torch.zeros_like(p))
            for name, p in net.named_parameters()}


def sgd_step(net: QuickNAT, lr: float):
    """Plain gradient descent on the current ``.grad`` fields."""
    with torch.no_grad():
        for p in net.parameters():
            if p.grad is not None:
                p.add_(p.grad, alpha=-lr)


# --------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    val_dice: float


@dataclass(frozen=True, eq=False)
class TrainResult:
    net: QuickNAT
    history: tuple
    best_epoch: int
    steps: tuple = ()

    @property
    def best(self) -> EpochMetrics:
        return self.history[self.best_epoch - 1]


def _stack_dataset(pairs, spec: ArchitectureSpec, what: str):
    if not pairs:
        raise DataError(f"{what} set is empty")
    images, masks = [], []
    shape = None
    for i, (img, mask) in enumerate(pairs):
        img = np.asarray(img, dtype=np.float64)
        m = np.asarray(mask.data if isinstance(mask, LabelMask) else mask)
        if img.ndim != 2 or m.shape != img.shape:
            raise DataError(f"{what} item {i}: image {img.shape} and mask {m.shape} must be equal 2D shapes")
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise DataError(f"{what} item {i}: shape {img.shape} differs from {shape}")
        if shape[0] % spec.divisor or shape[1] % spec.divisor:
            raise DataError(f"{what} item {i}: shape {shape} not divisible by {spec.divisor}")
        images.append(img)
        masks.append(m.astype(np.int64))
    x = np.stack(images)[:, None]
    y = np.stack(masks)
    e = np.stack([edge_map(m) for m in masks])
    return x, y, e


def _evaluate(net, x, y, e, cfg, batch=8):
    losses, inter, total = [], 0.0, 0.0
    for s in range(0, len(x), batch):
        probs = forward(net, x[s : s + batch], training=False)
        lv = loss(probs, y[s : s + batch], e[s : s + batch], cfg, reduction="sum")
        losses.append(float(lv))
        pred = probs.argmax(dim=1).numpy()
        truth = y[s : s + batch]
        inter += float(np.sum((pred == 1) & (truth == 1)))
        total += float(np.sum(pred == 1) + np.sum(truth == 1))
    dice = 1.0 if total == 0 else 2.0 * inter / total
    return sum(losses) / len(x), dice


def train(net: QuickNAT, dataset: Sequence, config: TrainConfig = TrainConfig(),
          validation: Sequence | None = None, log=None) -> TrainResult:
    """Mini-batch training; returns the network restored to its best epoch.

    ``dataset``/``validation`` hold ``(image, mask)`` pairs of equal 2D
    shape. Without a validation set the training pairs are scored. The
    shuffle order and dropout masks derive from ``config.seed`` only.
    """
    spec = net.spec
    x, y, e = _stack_dataset(list(dataset), spec, "training")
    if validation is not None:
        vx, vy, ve = _stack_dataset(list(validation), spec, "validation")
        if vx.shape[-2:] != x.shape[-2:]:
            raise DataError(f"validation shape {vx.shape[-2:]} differs from training {x.shape[-2:]}")
    else:
        vx, vy, ve = x, y, e
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    dtype = next(net.parameters()).dtype
    if config.optimizer == "adam":
        opt = torch.optim.Adam(net.parameters(), lr=config.step_size)
    else:
        opt = torch.optim.SGD(net.parameters(), lr=config.step_size, momentum=config.momentum)
    history, steps = [], []
    best_state, best_dice, best_epoch = None, -1.0, 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(x))
        epoch_losses = []
        for s in range(0, len(order), config.batch_size):
            idx = order[s : s + config.batch_size]
            probs = forward(net, torch.as_tensor(x[idx], dtype=dtype), training=True)
            value = loss(probs, y[idx], e[idx], config)
            opt.zero_grad(set_to_none=True)
            value.backward()
            opt.step()
            epoch_losses.append(value.item())
            steps.append(epoch_losses[-1])
        val_loss, val_dice = _evaluate(net, vx, vy, ve, config)
        m = EpochMetrics(epoch, float(np.mean(epoch_losses)), val_loss, val_dice)
        history.append(m)
        if log is not None:
            log(m)
        if val_dice > best_dice:
            best_dice, best_epoch = val_dice, epoch
            best_state = {k: v.clone() for k, v in net.state_dict().items()}
    net.load_state_dict(best_state)
    net.eval()
    return TrainResult(net, tuple(history), best_epoch, tuple(steps))


# --------------------------------------------------------------------------
# inference

def _predict_slices(net: QuickNAT, slices: np.ndarray, batch: int = 8) -> np.ndarray:
    out = np.empty(slices.shape, dtype=np.uint8)
    for s in range(0, len(slices), batch):
        probs = forward(net, slices[s : s + batch, None], training=False)
        out[s : s + batch] = probs.argmax(dim=1).numpy().astype(np.uint8)
    return out


def segment_volume(net: QuickNAT, grid: VoxelGrid, target_size=(256, 256), side: str | None = None) -> LabelMask:
    """Slice-wise segmentation of a compounded volume, mapped back to ``grid``.

    Left lobes are mirrored into right-lobe orientation before the network
    sees them and mirrored back afterwards.
    """
    stack = resample_axial(grid, target_size)
    slices = stack.slices[:, :, ::-1] if side == "left" else stack.slices
    labels = _predict_slices(net, np.ascontiguousarray(slices))
    if side == "left":
        labels = labels[:, :, ::-1]
    return labels_to_grid(labels, stack, grid)


def make_segmenter(net: QuickNAT, target_size=(256, 256)):
    """Adapter for the study runner's ``segmenter(grid, side)`` hook."""
    net.eval()

    def segmenter(grid: VoxelGrid, side: str) -> LabelMask:
        return segment_volume(net, grid, target_size, side)

    return segmenter


# --------------------------------------------------------------------------
# checkpoint and metrics files

def _blob_entries(net: QuickNAT):
    """Parameters and BN running statistics in ``state_dict`` order."""
    return [(k, v) for k, v in net.state_dict().items() if not k.endswith("num_batches_tracked")]


def save_checkpoint(net: QuickNAT, path) -> None:
    """Text header (``key=value`` lines, ending in ``end``) then a float64 LE blob.

    The blob concatenates every parameter and running statistic in the
    order listed by the header's ``tensor`` lines, each flattened C-order.
    """
    entries = _blob_entries(net)
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    for f in fields(ArchitectureSpec):
        lines.append(f"{f.name}={getattr(net.spec, f.name)!r}")
    for name, t in entries:
        lines.append(f"tensor={name}:{'x'.join(str(d) for d in t.shape) or '1'}")
    lines.append("end")
    blob = b"".join(t.detach().cpu().to(torch.float64).numpy().astype("<f8").tobytes() for _, t in entries)
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("ascii") + blob)


def load_checkpoint(path, dtype=torch.float32) -> QuickNAT:
    raw = Path(path).read_bytes()
    end = raw.find(b"\nend\n")
    if end < 0:
        raise FormatError(f"{path}: checkpoint header has no 'end' line")
    header = raw[:end].decode("ascii", errors="replace").split("\n")
    magic = header[0].split()
    if len(magic) != 2 or magic[0] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path} line 1: not a {CHECKPOINT_MAGIC} checkpoint")
    if magic[1] != str(CHECKPOINT_VERSION):
        raise FormatError(f"{path} line 1: unsupported checkpoint version {magic[1]}")
    kinds = {f.name: f.type for f in fields(ArchitectureSpec)}
    values, tensors = {}, []
    for lineno, line in enumerate(header[1:], start=2):
        key, sep, val = line.partition("=")
        if not sep:
            raise FormatError(f"{path} line {lineno}: expected key=value")
        if key == "tensor":
            name, _, shape = val.partition(":")
            tensors.append((name, shape))
        elif key in kinds:
            values[key] = float(val) if kinds[key] in ("float", float) else int(val)
        else:
            raise FormatError(f"{path} line {lineno}: unknown field '{key}'")
    missing = [k for k in kinds if k not in values]
    if missing:
        raise FormatError(f"{path}: missing field '{missing[0]}'")
    try:
        spec = ArchitectureSpec(**values)
    except ConfigError as exc:
        raise FormatError(f"{path}: {exc}") from None
    net = build_network(spec, dtype=torch.float64)
    entries = _blob_entries(net)
    if [n for n, _ in entries] != [n for n, _ in tensors]:
        raise FormatError(f"{path}: tensor list does not match the architecture")
    blob = np.frombuffer(raw[end + len(b"\nend\n"):], dtype="<f8")
    need = sum(t.numel() for _, t in entries)
    if blob.size != need:
        raise FormatError(f"{path}: parameter blob holds {blob.size} values, architecture needs {need}")
    state, pos = {}, 0
    for name, t in entries:
        n = t.numel()
        state[name] = torch.from_numpy(blob[pos : pos + n].copy()).reshape(t.shape)
        pos += n
    net.load_state_dict(state, strict=False)
    net = net.to(dtype)
    net.eval()
    return net


def write_metrics_csv(history: Sequence[EpochMetrics], path) -> None:
    rows = [",".join(METRICS_HEADER)]
    for m in history:
        rows.append(f"{m.epoch},{m.train_loss!r},{m.val_loss!r},{m.val_dice!r}")
    Path(path).write_text("\n".join(rows) + "\n")


def read_metrics_csv(path) -> list:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split(",") != METRICS_HEADER:
        raise FormatError(f"{path} line 1: expected header {','.join(METRICS_HEADER)}")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 4:
            raise FormatError(f"{path} line {lineno}: expected 4 fields, got {len(parts)}")
        out.append(EpochMetrics(int(parts[0]), float(parts[1]), float(parts[2]), float(parts[3])))
    return out
