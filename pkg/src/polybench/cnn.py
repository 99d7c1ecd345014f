"""ResNet-18 classifiers: trained from scratch or fine-tuned from pretrained weights.

Weights files are safetensors containers. Backbone tensors carry the torchvision
ResNet-18 names (``conv1.weight``, ``layer1.0.bn1.running_mean``, ...); the
classification head ``fc.*`` is never read from a weights file. The string
metadata block holds ``regime``, ``seed``, ``source_checksum`` (see
:func:`backbone_checksum`), ``input_mean``/``input_std`` (JSON lists) and
``image_size``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DigestMismatchError, MissingArtifactError, TrainingError
from .phantom_synth import CLASSES, IMAGE_SIZE, PolypClass

log = logging.getLogger(__name__)

NUM_CLASSES = len(CLASSES)
HEAD_PREFIX = "fc."
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class CNNConfig:
    regime: str = "scratch"
    learning_rate: float = 0.001
    max_epochs: int = 50
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 0.0
    patience: int = 10
    seed: int = 0
    image_size: int = IMAGE_SIZE
    input_norm: tuple | None = None  # ((mean r, g, b), (std r, g, b)); None = derive

    def __post_init__(self):
        if self.regime not in ("scratch", "pretrained"):
            raise ValueError(f"regime must be 'scratch' or 'pretrained', got {self.regime!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("max_epochs, patience and batch_size must be >= 1")
        if not 32 <= self.image_size <= IMAGE_SIZE:
            raise ValueError(f"image_size must be in [32, {IMAGE_SIZE}]")

    @classmethod
    def for_regime(cls, regime: str, **kw) -> "CNNConfig":
        base = {
            "scratch": dict(learning_rate=0.001, max_epochs=50, patience=10),
            "pretrained": dict(learning_rate=0.0001, max_epochs=20, patience=5),
        }[regime]
        base.update(kw)
        return cls(regime=regime, **base)


@dataclass
class CNNModel:
    net: nn.Module
    regime: str
    input_mean: tuple[float, float, float]
    input_std: tuple[float, float, float]
    image_size: int = IMAGE_SIZE
    meta: dict = field(default_factory=dict)


@dataclass
class TrainingHistory:
    epochs: list[dict]
    stopped_epoch: int
    best_epoch: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingHistory":
        return cls(list(d["epochs"]), int(d["stopped_epoch"]), int(d["best_epoch"]))


def _resnet18(num_classes: int) -> nn.Module:
    from torchvision.models import resnet18

    return resnet18(weights=None, num_classes=num_classes)


def backbone_state(net: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v for k, v in net.state_dict().items() if not k.startswith(HEAD_PREFIX)}


def backbone_checksum(state: dict[str, torch.Tensor]) -> str:
    """SHA-256 over backbone tensors in sorted-name order (name, dtype, shape, little-endian bytes)."""
    h = hashlib.sha256()
    for name in sorted(state):
        if name.startswith(HEAD_PREFIX):
            continue
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def read_weights(path) -> tuple[dict[str, torch.Tensor], dict]:
    from safetensors import SafetensorError
    from safetensors.torch import load_file, safe_open

    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"weights file not found: {path}")
    try:
        with safe_open(str(path), framework="pt") as fh:
            meta = dict(fh.metadata() or {})
        tensors = load_file(str(path))
    except (SafetensorError, OSError, ValueError) as exc:
        raise DigestMismatchError(f"corrupt weights file {path}: {exc}") from None
    return tensors, meta


def write_weights(path, tensors: dict[str, torch.Tensor], meta: dict) -> None:
    from safetensors.torch import save_file

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    save_file({k: v.detach().cpu().contiguous() for k, v in tensors.items()}, str(tmp),
              metadata={k: str(v) for k, v in meta.items()})
    tmp.replace(path)


def build_resnet18(num_classes: int = NUM_CLASSES, regime: str = "scratch", seed: int = 0,
                   weights_path=None) -> CNNModel:
    """ResNet-18 with a seeded head; the pretrained regime loads every backbone tensor from ``weights_path``."""
    torch.manual_seed(seed)
    net = _resnet18(num_classes)
    if regime == "scratch":
        return CNNModel(net, "scratch", IMAGENET_MEAN, IMAGENET_STD, meta={"seed": seed})
    if regime != "pretrained":
        raise ValueError(f"unknown regime {regime!r}")
    if weights_path is None:
        raise MissingArtifactError("pretrained regime needs a weights file")
    tensors, meta = read_weights(weights_path)
    expected = set(backbone_state(net))
    got = {k for k in tensors if not k.startswith(HEAD_PREFIX)}
    if got != expected:
        missing, extra = sorted(expected - got)[:5], sorted(got - expected)[:5]
        raise DigestMismatchError(f"{weights_path}: tensor names do not match ResNet-18 (missing {missing}, extra {extra})")
    backbone = {k: tensors[k] for k in expected}
    recorded = meta.get("source_checksum")
    if recorded and backbone_checksum(backbone) != recorded:
        raise DigestMismatchError(f"{weights_path}: backbone checksum does not match recorded source_checksum")
    net.load_state_dict(backbone, strict=False)
    # fresh seeded head
    gen = torch.Generator().manual_seed(seed)
    bound = 1.0 / math.sqrt(net.fc.in_features)
    with torch.no_grad():
        net.fc.weight.copy_(torch.empty_like(net.fc.weight).uniform_(-bound, bound, generator=gen))
        net.fc.bias.copy_(torch.empty_like(net.fc.bias).uniform_(-bound, bound, generator=gen))
    mean = tuple(json.loads(meta["input_mean"])) if "input_mean" in meta else IMAGENET_MEAN
    std = tuple(json.loads(meta["input_std"])) if "input_std" in meta else IMAGENET_STD
    return CNNModel(net, "pretrained", mean, std,
                    meta={"seed": seed, "weights_regime": meta.get("regime", "unknown"),
                          "source_checksum": backbone_checksum(backbone)})


def import_torchvision_weights(pth_path, out_path) -> str:
    """Convert a torchvision ResNet-18 ``.pth`` state dict into the weights container."""
    state = torch.load(pth_path, map_location="cpu", weights_only=True)
    backbone = {k: v for k, v in state.items() if not k.startswith(HEAD_PREFIX)}
    checksum = backbone_checksum(backbone)
    write_weights(out_path, backbone, {
        "regime": "imagenet", "seed": "", "source_checksum": checksum,
        "input_mean": json.dumps(IMAGENET_MEAN), "input_std": json.dumps(IMAGENET_STD),
        "image_size": IMAGE_SIZE})
    return checksum


# --------------------------------------------------------------------------
# data plumbing

def images_to_tensor(images, image_size: int = IMAGE_SIZE, mean=None, std=None) -> torch.Tensor:
    """uint8 (N, H, W, 3) -> normalised float32 (N, 3, image_size, image_size)."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected (N, H, W, 3) images, got {arr.shape}")
    x = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2).float().div_(255.0)
    if x.shape[-1] != image_size or x.shape[-2] != image_size:
        x = F.interpolate(x, size=(image_size, image_size), mode="bilinear", antialias=True, align_corners=False)
    if mean is not None:
        m = torch.tensor(mean, dtype=x.dtype).view(1, 3, 1, 1)
        s = torch.tensor(std, dtype=x.dtype).view(1, 3, 1, 1)
        x = (x - m) / s
    return x.contiguous()


def channel_stats(images, image_size: int = IMAGE_SIZE) -> tuple[tuple, tuple]:
    x = images_to_tensor(images, image_size)
    mean = x.mean(dim=(0, 2, 3)).double()
    std = x.std(dim=(0, 2, 3)).double().clamp_min(1e-6)
    return tuple(round(float(v), 6) for v in mean), tuple(round(float(v), 6) for v in std)


def _label_tensor(labels) -> torch.Tensor:
    idx = []
    for lab in labels:
        if isinstance(lab, PolypClass):
            idx.append(lab.index)
        elif isinstance(lab, (int, np.integer)):
            idx.append(int(lab))
        else:
            idx.append(PolypClass.parse(lab).index)
    return torch.tensor(idx, dtype=torch.long)


def _batches(n: int, batch_size: int, order: torch.Tensor):
    bounds = list(range(0, n, batch_size))
    # a trailing batch of one breaks batch norm in train mode
    if len(bounds) > 1 and n - bounds[-1] == 1:
        bounds.pop()
    for k, start in enumerate(bounds):
        stop = bounds[k + 1] if k + 1 < len(bounds) else n
        yield order[start:stop]


@torch.no_grad()
def _evaluate(net: nn.Module, x: torch.Tensor, y: torch.Tensor, batch_size: int) -> tuple[float, float]:
    net.eval()
    total, correct = 0.0, 0
    for start in range(0, len(x), batch_size):
        logits = net(x[start:start + batch_size])
        total += float(F.cross_entropy(logits, y[start:start + batch_size], reduction="sum"))
        correct += int((logits.argmax(1) == y[start:start + batch_size]).sum())
    return total / len(x), correct / len(x)


def train(model: CNNModel, train_images, train_labels, val_images, val_labels,
          cfg: CNNConfig) -> tuple[CNNModel, TrainingHistory]:
    """SGD on cross-entropy with early stopping on validation loss.

    Stops once validation loss has not improved for ``cfg.patience`` epochs
    in a row (or at ``cfg.max_epochs``) and returns the parameters of the
    best-validation epoch.
    """
    if len(train_labels) == 0 or len(val_labels) == 0:
        raise ValueError("train and validation sets must be non-empty")
    if cfg.regime == "scratch" and cfg.input_norm is None:
        mean, std = channel_stats(train_images, cfg.image_size)
    elif cfg.input_norm is not None:
        mean, std = (tuple(v) for v in cfg.input_norm)
    else:
        mean, std = model.input_mean, model.input_std
    model.input_mean, model.input_std, model.image_size = tuple(mean), tuple(std), cfg.image_size

    x_tr = images_to_tensor(train_images, cfg.image_size, mean, std)
    y_tr = _label_tensor(train_labels)
    x_va = images_to_tensor(val_images, cfg.image_size, mean, std)
    y_va = _label_tensor(val_labels)

    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    net = model.net
    params = [p for p in net.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay) if params else None
    if opt is None:
        log.warning("no trainable parameters; running evaluation-only epochs")

    records = []
    best_loss, best_epoch, best_state, stale = math.inf, 0, None, 0
    for epoch in range(1, cfg.max_epochs + 1):
        net.train()
        order = torch.randperm(len(x_tr), generator=gen)
        loss_sum, correct = 0.0, 0
        for idx in _batches(len(x_tr), cfg.batch_size, order):
            logits = net(x_tr[idx])
            loss = F.cross_entropy(logits, y_tr[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            if opt is not None:
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
            loss_sum += float(loss.detach()) * len(idx)
            correct += int((logits.detach().argmax(1) == y_tr[idx]).sum())
        seen = sum(len(i) for i in _batches(len(x_tr), cfg.batch_size, order))
        val_loss, val_acc = _evaluate(net, x_va, y_va, cfg.batch_size)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        records.append({"epoch": epoch, "train_loss": loss_sum / seen, "train_accuracy": correct / seen,
                        "val_loss": val_loss, "val_accuracy": val_acc})
        log.debug("epoch %d train_loss %.4f val_loss %.4f val_acc %.3f",
                  epoch, loss_sum / seen, val_loss, val_acc)
        if val_loss < best_loss:
            best_loss, best_epoch, stale = val_loss, epoch, 0
            best_state = copy.deepcopy(net.state_dict())
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    net.load_state_dict(best_state)
    net.eval()
    model.meta.update({"best_epoch": best_epoch, "train_seed": cfg.seed})
    return model, TrainingHistory(records, records[-1]["epoch"], best_epoch)


@torch.no_grad()
def predict_logits(model: CNNModel, images, batch_size: int = 32) -> np.ndarray:
    arr = np.asarray(images)
    if arr.size == 0:
        return np.zeros((0, NUM_CLASSES), dtype=np.float32)
    x = images_to_tensor(arr, model.image_size, model.input_mean, model.input_std)
    model.net.eval()
    out = [model.net(x[s:s + batch_size]) for s in range(0, len(x), batch_size)]
    return torch.cat(out).numpy()


def logits_to_labels(logits) -> list[PolypClass]:
    return [CLASSES[int(i)] for i in np.argmax(np.asarray(logits), axis=1)]


def cnn_predict(model: CNNModel, images, batch_size: int = 32) -> tuple[list[PolypClass], np.ndarray]:
    logits = predict_logits(model, images, batch_size)
    return logits_to_labels(logits), logits


def save_cnn(model: CNNModel, path) -> None:
    meta = {"regime": model.regime, "input_mean": json.dumps(list(model.input_mean)),
            "input_std": json.dumps(list(model.input_std)), "image_size": model.image_size,
            "extra": json.dumps(model.meta, sort_keys=True)}
    write_weights(path, model.net.state_dict(), meta)


def load_cnn(path) -> CNNModel:
    tensors, meta = read_weights(path)
    net = _resnet18(NUM_CLASSES)
    net.load_state_dict(tensors)
    net.eval()
    return CNNModel(net, meta.get("regime", "scratch"), tuple(json.loads(meta["input_mean"])),
                    tuple(json.loads(meta["input_std"])), int(meta.get("image_size", IMAGE_SIZE)),
                    json.loads(meta.get("extra", "{}")))


def tiny_subnetwork(seed: int = 0) -> nn.Module:
    """Conv(3->1, 3x3) + ReLU + global pool + Linear(1->4): 36 parameters, float64."""
    torch.manual_seed(seed)
    return nn.Sequential(
        nn.Conv2d(3, 1, 3, padding=1), nn.ReLU(), nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(1, NUM_CLASSES),
    ).double()


def finite_difference_check(net: nn.Module, x: torch.Tensor, y: torch.Tensor, eps: float = 1e-6) -> float:
    """Max relative error between autograd and central-difference gradients of the CE loss."""
    params = [p for p in net.parameters()]
    net.zero_grad()
    F.cross_entropy(net(x), y).backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in params]).clone()
    numeric = torch.zeros_like(analytic)
    k = 0
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + eps
                up = float(F.cross_entropy(net(x), y))
                flat[i] = orig - eps
                down = float(F.cross_entropy(net(x), y))
                flat[i] = orig
                numeric[k] = (up - down) / (2 * eps)
                k += 1
    denom = torch.clamp(torch.maximum(analytic.abs(), numeric.abs()), min=1e-6)
    return float(((analytic - numeric).abs() / denom).max())
