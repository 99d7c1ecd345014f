"""Offline substitute for ImageNet weights.

Trains ResNet-18 on a procedurally generated corpus of generic surface
textures (stripes, checkers, rings, bumps, ridges, ...) rendered with the
same three-light shading as the phantom images, then stores the backbone in
the standard weights container tagged ``regime="proxy"``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from ._util import stable_seed
from .cnn import _batches, _evaluate, _resnet18, backbone_checksum, backbone_state, images_to_tensor, write_weights
from .phantom_synth import IMAGE_SIZE, _shade

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProxyPretrainConfig:
    n_per_class: int = 128
    epochs: int = 15
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    image_size: int = 64
    seed: int = 20221
    holdout: float = 0.1

    def digest(self) -> str:
        return f"{stable_seed(json.dumps(asdict(self), sort_keys=True)):016x}"


def _xy():
    ax = np.linspace(-1.0, 1.0, IMAGE_SIZE)
    return np.meshgrid(ax, ax)


def _bump(x, y, cx, cy, s):
    return np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s))


def _rotated(x, y, theta):
    c, s = np.cos(theta), np.sin(theta)
    return c * x + s * y, -s * x + c * y


def _stripes(r, x, y):
    u, _ = _rotated(x, y, r.uniform(0, np.pi))
    return 0.25 * np.sin(2 * np.pi * r.uniform(2, 7) * u / 2)


def _checker(r, x, y):
    u, v = _rotated(x, y, r.uniform(0, np.pi / 2))
    f = r.uniform(2, 6)
    return 0.2 * np.tanh(4 * np.sin(np.pi * f * u) * np.sin(np.pi * f * v))


def _lattice(r, x, y):
    step = r.uniform(0.25, 0.5)
    ox, oy = r.uniform(0, step, 2)
    gx = (x - ox) / step - np.round((x - ox) / step)
    gy = (y - oy) / step - np.round((y - oy) / step)
    return 0.4 * np.exp(-(gx**2 + gy**2) / (2 * 0.18**2))


def _rings(r, x, y):
    cx, cy = r.uniform(-0.3, 0.3, 2)
    return 0.25 * np.cos(2 * np.pi * r.uniform(2, 6) * np.hypot(x - cx, y - cy))


def _big_bump(r, x, y):
    return r.uniform(0.5, 1.0) * _bump(x, y, *r.uniform(-0.4, 0.4, 2), r.uniform(0.15, 0.35))


def _pit(r, x, y):
    return -r.uniform(0.5, 1.0) * _bump(x, y, *r.uniform(-0.4, 0.4, 2), r.uniform(0.15, 0.35))


def _scatter(r, x, y):
    h = np.zeros_like(x)
    for _ in range(r.integers(10, 30)):
        h += r.uniform(0.2, 0.5) * _bump(x, y, *r.uniform(-0.9, 0.9, 2), r.uniform(0.03, 0.07))
    return h


def _ridge(r, x, y):
    u, _ = _rotated(x, y, r.uniform(0, np.pi))
    return 0.6 * np.exp(-((u - r.uniform(-0.4, 0.4)) ** 2) / (2 * r.uniform(0.04, 0.1) ** 2))


def _cross(r, x, y):
    theta = r.uniform(0, np.pi)
    u, v = _rotated(x, y, theta)
    w = r.uniform(0.04, 0.08)
    cu, cv = r.uniform(-0.3, 0.3, 2)
    return 0.5 * np.maximum(np.exp(-((u - cu) ** 2) / (2 * w * w)), np.exp(-((v - cv) ** 2) / (2 * w * w)))


def _smooth_noise(r, x, y):
    h = ndimage.gaussian_filter(r.standard_normal(x.shape), r.uniform(8, 20), mode="wrap")
    return 0.35 * h / (h.std() + 1e-12)


def _granular(r, x, y):
    h = ndimage.gaussian_filter(r.standard_normal(x.shape), r.uniform(1.0, 2.5))
    return 0.08 * h / (h.std() + 1e-12)


def _square(r, x, y):
    u, v = _rotated(x - r.uniform(-0.3, 0.3), y - r.uniform(-0.3, 0.3), r.uniform(0, np.pi / 2))
    half = r.uniform(0.2, 0.45)
    return 0.35 / (1 + np.exp((np.maximum(abs(u), abs(v)) - half) / 0.03))


def _groove(r, x, y):
    cx, cy = r.uniform(-0.3, 0.3, 2)
    rad = r.uniform(0.2, 0.5)
    return -0.5 * np.exp(-((np.hypot(x - cx, y - cy) - rad) ** 2) / (2 * 0.05**2))


def _ellipse(r, x, y):
    u, v = _rotated(x - r.uniform(-0.3, 0.3), y - r.uniform(-0.3, 0.3), r.uniform(0, np.pi))
    a, b = r.uniform(0.3, 0.6), r.uniform(0.06, 0.15)
    return 0.7 * np.exp(-(u**2 / (2 * a * a) + v**2 / (2 * b * b)))


def _step(r, x, y):
    u, _ = _rotated(x, y, r.uniform(0, 2 * np.pi))
    return 0.3 * np.tanh((u - r.uniform(-0.5, 0.5)) / 0.05)


def _waves(r, x, y):
    cx, cy = r.uniform(-0.5, 0.5, 2)
    ang = np.arctan2(y - cy, x - cx)
    return 0.25 * np.sin(r.integers(3, 9) * ang) * np.exp(-np.hypot(x - cx, y - cy))


TEXTURE_FAMILIES = (
    _stripes, _checker, _lattice, _rings, _big_bump, _pit, _scatter, _ridge,
    _cross, _smooth_noise, _granular, _square, _groove, _ellipse, _step, _waves,
)


def render_texture(family: int, seed: int) -> np.ndarray:
    r = np.random.default_rng(seed)
    x, y = _xy()
    h = TEXTURE_FAMILIES[family](r, x, y)
    # nuisance: smooth undulation and a few stray bumps at random strength
    amp = r.uniform(0.0, 1.0)
    low = ndimage.gaussian_filter(r.standard_normal(x.shape), 12.0, mode="wrap")
    h = h + amp * 0.2 * low / (low.std() + 1e-12)
    for _ in range(r.integers(0, 5)):
        h = h + amp * r.uniform(-0.3, 0.4) * _bump(x, y, *r.uniform(-0.9, 0.9, 2), r.uniform(0.04, 0.15))
    rgb = _shade(h, r.uniform(0.5, 1.2))
    rgb = rgb * (1 + 0.1 * r.standard_normal(3)) + 10 * r.standard_normal(3) + 4 * r.standard_normal(rgb.shape)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def texture_corpus(cfg: ProxyPretrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Images already downsampled to ``cfg.image_size`` as uint8 (N, s, s, 3), plus family labels."""
    imgs, labels = [], []
    for fam in range(len(TEXTURE_FAMILIES)):
        for k in range(cfg.n_per_class):
            img = render_texture(fam, stable_seed("proxy", cfg.seed, fam, k))
            if cfg.image_size != IMAGE_SIZE:
                t = images_to_tensor(img, cfg.image_size)
                img = np.clip(np.rint(t[0].permute(1, 2, 0).numpy() * 255), 0, 255).astype(np.uint8)
            imgs.append(img)
            labels.append(fam)
    return np.stack(imgs), np.asarray(labels)


def proxy_pretrain(cfg: ProxyPretrainConfig, out_path) -> Path:
    """Train on the texture corpus and write the backbone weights to ``out_path``."""
    images, labels = texture_corpus(cfg)
    x = images_to_tensor(images, cfg.image_size)
    mean = x.mean(dim=(0, 2, 3))
    std = x.std(dim=(0, 2, 3)).clamp_min(1e-6)
    x = (x - mean.view(1, 3, 1, 1)) / std.view(1, 3, 1, 1)
    y = torch.as_tensor(labels, dtype=torch.long)

    gen = torch.Generator().manual_seed(cfg.seed)
    perm = torch.randperm(len(x), generator=gen)
    n_hold = int(round(cfg.holdout * len(x)))
    hold, fit = perm[:n_hold], perm[n_hold:]

    torch.manual_seed(cfg.seed)
    net = _resnet18(len(TEXTURE_FAMILIES))
    opt = torch.optim.SGD(net.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=1e-4)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs)
    hold_acc = float("nan")
    for epoch in range(1, cfg.epochs + 1):
        net.train()
        order = fit[torch.randperm(len(fit), generator=gen)]
        for idx in _batches(len(order), cfg.batch_size, torch.arange(len(order))):
            b = order[idx]
            loss = F.cross_entropy(net(x[b]), y[b])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        sched.step()
        if n_hold:
            _, hold_acc = _evaluate(net, x[hold], y[hold], 64)
        log.info("proxy pretrain epoch %d/%d holdout acc %.3f", epoch, cfg.epochs, hold_acc)

    backbone = backbone_state(net)
    meta = {
        "regime": "proxy",
        "seed": cfg.seed,
        "source_checksum": backbone_checksum(backbone),
        "input_mean": json.dumps([round(float(v), 6) for v in mean]),
        "input_std": json.dumps([round(float(v), 6) for v in std]),
        "image_size": cfg.image_size,
        "holdout_accuracy": f"{hold_acc:.4f}",
        "config": json.dumps(asdict(cfg), sort_keys=True),
    }
    out_path = Path(out_path)
    write_weights(out_path, backbone, meta)
    return out_path
