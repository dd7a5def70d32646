"""Post-training comparison of co-trained networks.

Feature-map similarity (per-element L1/L2 distance and cosine) quantifies
how far two networks' representations collapsed onto each other; Grad-CAM
heatmaps show which spatial regions drive a class score. Both operate on
frozen networks in eval mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ContractError, DataError, UsageError
from .tensor import Tensor, backward, mean_all, no_grad, take_rows


@dataclass
class SimilarityReport:
    """Mean per-sample distances between two networks' flattened feature maps."""

    l1: float
    l2: float
    cosine: float
    count: int


def _paired_vectors(fa: np.ndarray, fb: np.ndarray):
    """Flatten per-sample features into comparable equal-length vectors.

    Matching shapes compare element-wise. A pure channel mismatch falls back
    to spatial-mean per-channel vectors truncated to the smaller width.
    """
    if fa.shape == fb.shape:
        return fa.reshape(fa.shape[0], -1), fb.reshape(fb.shape[0], -1)
    if fa.shape[2:] == fb.shape[2:]:
        c = min(fa.shape[1], fb.shape[1])
        return fa.mean(axis=(2, 3))[:, :c], fb.mean(axis=(2, 3))[:, :c]
    raise UsageError(
        f"feature shapes {fa.shape} and {fb.shape} are not comparable "
        "(spatial extents differ)"
    )


def feature_similarity(net_a, net_b, dataset: Dataset, batch_size: int = 256) -> SimilarityReport:
    """Average L1/L2/cosine between the two nets' features over a dataset."""
    if dataset.n == 0:
        raise DataError("cannot compute similarity on an empty dataset")
    saved = [net_a.training, net_b.training]
    net_a.eval()
    net_b.eval()
    l1_sum = l2_sum = cos_sum = 0.0
    with no_grad():
        for i in range(0, dataset.n, batch_size):
            xt = Tensor(dataset.images[i:i + batch_size])
            fa = net_a.extract(xt).data.astype(np.float64)
            fb = net_b.extract(xt).data.astype(np.float64)
            va, vb = _paired_vectors(fa, fb)
            diff = va - vb
            l1_sum += float(np.abs(diff).mean(axis=1).sum())
            l2_sum += float(np.sqrt((diff * diff).mean(axis=1)).sum())
            na = np.linalg.norm(va, axis=1)
            nb = np.linalg.norm(vb, axis=1)
            denom = na * nb
            dots = (va * vb).sum(axis=1)
            cos = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
            cos_sum += float(np.clip(cos, -1.0, 1.0).sum())
    net_a.training, net_b.training = saved
    n = dataset.n
    return SimilarityReport(l1=l1_sum / n, l2=l2_sum / n, cosine=cos_sum / n, count=n)


def grad_cam(net, image, target_class: int) -> Tensor:
    """Class-activation heatmap at feature-map resolution, values in [0, 1].

    Channel weights are the spatial mean of d(logit[target])/d(feature);
    the map is the ReLU of the weighted channel sum, normalized by its max
    (an all-zero map stays all-zero).
    """
    if not 0 <= target_class < net.num_classes:
        raise DataError(
            f"target_class {target_class} out of range [0, {net.num_classes})"
        )
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    was_training = net.training
    net.eval()
    feature, logit = net.forward(Tensor(arr))
    score = mean_all(take_rows(logit, np.asarray([target_class])))
    backward(score)
    net.training = was_training
    grads = feature.grad[0] if feature.grad is not None else np.zeros_like(feature.data[0])
    for p in net.params().values():
        p.grad = None
    weights = grads.mean(axis=(1, 2))
    cam = np.maximum(np.einsum("c,chw->hw", weights, feature.data[0]), 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return Tensor(cam.astype(np.float32))


def export_pgm(heatmap, path):
    """Write a [0,1] heatmap as binary PGM (P5, maxval 255)."""
    arr = heatmap.data if isinstance(heatmap, Tensor) else np.asarray(heatmap)
    if arr.ndim != 2:
        raise ContractError(f"heatmap must be 2-D, got shape {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ContractError(
            f"heatmap values must lie in [0, 1], got range [{arr.min()}, {arr.max()}]"
        )
    h, w = arr.shape
    payload = np.rint(arr * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(payload.tobytes())
