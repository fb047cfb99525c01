"""CAM and Grad-CAM heatmaps from a small residual classifier.

The classifier ends in global average pooling followed by one linear unit
(the lesion logit), which is what CAM's weight transfer needs.  Grad-CAM taps
the last convolutional stage.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .evaluation import minmax_rescale


@dataclass(frozen=True)
class ClassifierConfig:
    width: int = 16
    steps: int = 600
    batch_size: int = 32
    learning_rate: float = 3e-4
    holdout_fraction: float = 0.2
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False),
                                      nn.BatchNorm2d(cout))

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(y + (x if self.skip is None else self.skip(x)))


class ClassifierBundle(nn.Module):
    """Compact ResNet-style binary classifier: features -> GAP -> linear."""

    def __init__(self, width: int = 16, in_channels: int = 1):
        super().__init__()
        w = width
        self.stem = nn.Sequential(nn.Conv2d(in_channels, w, 3, padding=1, bias=False),
                                  nn.BatchNorm2d(w), nn.ReLU())
        self.stages = nn.Sequential(ResBlock(w, w), ResBlock(w, 2 * w, 2), ResBlock(2 * w, 4 * w, 2))
        self.fc = nn.Linear(4 * w, 1)

    def features(self, x):
        return self.stages(self.stem(x))

    def head(self, feats):
        return self.fc(feats.mean(dim=(2, 3))).squeeze(1)

    def forward(self, x):
        return self.head(self.features(x))

    @property
    def class_weights(self) -> torch.Tensor:
        return self.fc.weight[0]


def _split(labels: np.ndarray, fraction: float, rng: np.random.Generator):
    train_idx, hold_idx = [], []
    for cls in (0, 1):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        k = int(round(len(idx) * fraction))
        hold_idx.extend(idx[:k])
        train_idx.extend(idx[k:])
    return np.sort(np.asarray(train_idx, dtype=int)), np.sort(np.asarray(hold_idx, dtype=int))


@torch.no_grad()
def accuracy(clf: ClassifierBundle, images: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    clf.eval()
    logits = torch.cat([clf(torch.from_numpy(images[i:i + 64])) for i in range(0, len(images), 64)])
    return float(((logits > 0).long().numpy() == labels).mean())


def train_classifier(train_set, config: ClassifierConfig = ClassifierConfig()) -> Tuple[ClassifierBundle, float]:
    """Fit the classifier with binary cross-entropy.

    A stratified ``holdout_fraction`` of ``train_set`` is kept aside; its
    accuracy is returned alongside the model.
    """
    labels = np.asarray(train_set.labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("classifier training needs both classes")
    rng = np.random.default_rng(config.seed)
    tr, ho = _split(labels, config.holdout_fraction, rng)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        clf = ClassifierBundle(config.width)
    images = np.ascontiguousarray(train_set.images, dtype=np.float32)
    opt = torch.optim.Adam(clf.parameters(), lr=config.learning_rate)
    for _ in range(config.steps):
        idx = rng.choice(tr, size=config.batch_size, replace=len(tr) < config.batch_size)
        clf.train()
        logits = clf(torch.from_numpy(images[idx]))
        loss = F.binary_cross_entropy_with_logits(logits, torch.from_numpy(labels[idx]).float())
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    clf.eval()
    return clf, accuracy(clf, images[ho], labels[ho])


def _upsample(cam: torch.Tensor, size) -> np.ndarray:
    up = F.interpolate(cam[None, None], size=size, mode="bilinear", align_corners=False)
    return up[0, 0].double().numpy()


def _as_input(image) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(image, dtype=np.float32))
    while x.dim() < 4:
        x = x.unsqueeze(0)
    return x


def cam_from_features(feats: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Class-weighted sum of feature maps, ``(C, h, w) -> (h, w)``."""
    return torch.einsum("c,chw->hw", weights, feats)


@torch.no_grad()
def cam_heatmap(clf: ClassifierBundle, image, roi=None) -> np.ndarray:
    clf.eval()
    x = _as_input(image)
    cam = cam_from_features(clf.features(x)[0], clf.class_weights)
    return minmax_rescale(_upsample(cam, x.shape[2:]), roi)


def gradcam_weights(clf: ClassifierBundle, feats: torch.Tensor) -> torch.Tensor:
    """Spatial mean of d(lesion logit)/d(feature map), one weight per channel."""
    feats = feats.detach().requires_grad_(True)
    logit = clf.head(feats).sum()
    grad, = torch.autograd.grad(logit, feats)
    return grad.mean(dim=(2, 3))


def gradcam_heatmap(clf: ClassifierBundle, image, roi=None) -> np.ndarray:
    clf.eval()
    x = _as_input(image)
    with torch.no_grad():
        feats = clf.features(x)
    weights = gradcam_weights(clf, feats)[0]
    cam = F.relu(cam_from_features(feats[0], weights))
    return minmax_rescale(_upsample(cam.detach(), x.shape[2:]), roi)


def baseline_heatmaps(clf: ClassifierBundle, images: np.ndarray, rois: np.ndarray, method: str) -> np.ndarray:
    fn = {"cam": cam_heatmap, "gradcam": gradcam_heatmap}.get(method)
    if fn is None:
        raise ValueError(f"unknown baseline method {method!r}")
    return np.asarray([fn(clf, img[0], roi[0]) for img, roi in zip(images, rois)])
