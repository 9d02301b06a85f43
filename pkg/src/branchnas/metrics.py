"""Heatmap loss, keypoint decoding, OKS-based AP/AR, PCK, flip averaging and MAC counting."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

HEATMAP_STRIDE = 4
HEATMAP_SIGMA = 2.0

# COCO keypoint falloff constants k_i = 2 * sigma_i, nose .. right ankle.
COCO_SIGMAS = np.array([.26, .25, .25, .35, .35, .79, .79, .72, .72, .62, .62,
                        1.07, 1.07, .87, .87, .89, .89]) / 10.0
COCO_K = 2 * COCO_SIGMAS

OKS_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_THRESHOLDS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {"all": (0.0, 1e10), "medium": (32.0 ** 2, 96.0 ** 2), "large": (96.0 ** 2, 1e10)}
MAX_DETS = 20


def heatmap_mse(pred: torch.Tensor, target: torch.Tensor,
                visibility: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error over the channels of visible keypoints."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    sq = (pred - target) ** 2
    if visibility is None:
        return sq.mean()
    mask = (visibility > 0).to(pred.dtype)
    mask = mask.reshape(*mask.shape, 1, 1)
    denom = mask.sum() * pred.shape[-1] * pred.shape[-2]
    return (sq * mask).sum() / denom.clamp_min(1)


def gaussian_heatmaps(keypoints: np.ndarray, visibility: np.ndarray, size: tuple[int, int],
                      stride: int = HEATMAP_STRIDE, sigma: float = HEATMAP_SIGMA) -> np.ndarray:
    """(K, h, w) targets: unit-amplitude Gaussians at keypoint / stride; zero if invisible."""
    h, w = size
    ys = np.arange(h, dtype=np.float32)[:, None]
    xs = np.arange(w, dtype=np.float32)[None, :]
    out = np.zeros((len(keypoints), h, w), dtype=np.float32)
    for k, ((x, y), v) in enumerate(zip(keypoints, visibility)):
        if v <= 0:
            continue
        cx, cy = x / stride, y / stride
        out[k] = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma ** 2))
    return out


def decode_keypoints(heatmaps, refine: bool = True, stride: int = HEATMAP_STRIDE):
    """Argmax decode of (..., K, h, w) heatmaps to input-pixel coordinates.

    Ties go to the first index in row-major order. With ``refine`` the peak moves a
    quarter grid cell toward the higher horizontal and vertical neighbour (interior
    peaks only). Returns ``(coords[..., K, 2], maxvals[..., K])``.
    """
    hm = heatmaps.detach().cpu().numpy() if isinstance(heatmaps, torch.Tensor) else \
        np.asarray(heatmaps)
    lead, (h, w) = hm.shape[:-2], hm.shape[-2:]
    flat = hm.reshape(-1, h * w)
    idx = flat.argmax(axis=1)
    maxvals = flat[np.arange(len(flat)), idx]
    px = (idx % w).astype(np.float64)
    py = (idx // w).astype(np.float64)
    if refine:
        grid = hm.reshape(-1, h, w)
        for n in range(len(flat)):
            x, y = int(px[n]), int(py[n])
            if 0 < x < w - 1:
                px[n] += 0.25 * np.sign(grid[n, y, x + 1] - grid[n, y, x - 1])
            if 0 < y < h - 1:
                py[n] += 0.25 * np.sign(grid[n, y + 1, x] - grid[n, y - 1, x])
    coords = np.stack([px, py], axis=-1) * stride
    return coords.reshape(*lead, 2), maxvals.reshape(lead)


def oks(pred: np.ndarray, gt: np.ndarray, visibility: np.ndarray, scale: float,
        k: np.ndarray | float) -> float | None:
    """Object keypoint similarity; ``None`` when no ground-truth keypoint is visible."""
    vis = np.asarray(visibility) > 0
    if not vis.any():
        return None
    d2 = np.sum((np.asarray(pred, np.float64) - np.asarray(gt, np.float64)) ** 2, axis=-1)
    k = np.broadcast_to(np.asarray(k, np.float64), d2.shape)
    e = np.exp(-d2 / (2.0 * scale ** 2 * k ** 2))
    return float(e[vis].sum() / vis.sum())


@dataclass
class Instance:
    """One person: keypoints (K, 2), visibility flags, area (s = sqrt(area)); score for detections."""

    keypoints: np.ndarray
    visibility: np.ndarray | None = None
    area: float = 1.0
    score: float = 1.0


@dataclass
class APResult:
    AP: float
    AP50: float
    AP75: float
    AP_M: float
    AP_L: float
    AR: float
    extras: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"AP": self.AP, "AP50": self.AP50, "AP75": self.AP75,
                "AP_M": self.AP_M, "AP_L": self.AP_L, "AR": self.AR}


def _evaluate_image(dets: list[Instance], gts: list[Instance], k, area_rng):
    """COCO-style greedy matching of one image for every OKS threshold."""
    dets = sorted(dets, key=lambda d: -d.score)[:MAX_DETS]
    gt_ignore = np.array([
        not (np.asarray(g.visibility) > 0).any() or not (area_rng[0] <= g.area <= area_rng[1])
        for g in gts], dtype=bool)
    order = np.argsort(gt_ignore, kind="stable")
    gts = [gts[i] for i in order]
    gt_ignore = gt_ignore[order]
    ious = np.zeros((len(dets), len(gts)))
    for i, d in enumerate(dets):
        for j, g in enumerate(gts):
            o = oks(d.keypoints, g.keypoints, g.visibility, np.sqrt(g.area), k)
            ious[i, j] = 0.0 if o is None else o
    T = len(OKS_THRESHOLDS)
    dt_match = np.zeros((T, len(dets)), dtype=bool)
    dt_ignore = np.zeros((T, len(dets)), dtype=bool)
    for t, thr in enumerate(OKS_THRESHOLDS):
        gt_taken = np.zeros(len(gts), dtype=bool)
        for i in range(len(dets)):
            best, best_j = min(thr, 1 - 1e-10), -1
            for j in range(len(gts)):
                if gt_taken[j]:
                    continue
                if best_j > -1 and not gt_ignore[best_j] and gt_ignore[j]:
                    break
                if ious[i, j] < best:
                    continue
                best, best_j = ious[i, j], j
            if best_j == -1:
                continue
            gt_taken[best_j] = True
            dt_match[t, i] = True
            dt_ignore[t, i] = gt_ignore[best_j]
    out_of_range = np.array([not (area_rng[0] <= d.area <= area_rng[1]) for d in dets],
                            dtype=bool)
    dt_ignore |= (~dt_match) & out_of_range[None, :]
    return {
        "scores": np.array([d.score for d in dets]),
        "match": dt_match,
        "ignore": dt_ignore,
        "num_gt": int((~gt_ignore).sum()),
    }


def _accumulate(per_image):
    num_gt = sum(r["num_gt"] for r in per_image)
    T, R = len(OKS_THRESHOLDS), len(RECALL_THRESHOLDS)
    if num_gt == 0:
        return -np.ones(T), -np.ones(T)
    scores = np.concatenate([r["scores"] for r in per_image]) if per_image else np.zeros(0)
    order = np.argsort(-scores, kind="mergesort")
    match = np.concatenate([r["match"] for r in per_image], axis=1)[:, order]
    ignore = np.concatenate([r["ignore"] for r in per_image], axis=1)[:, order]
    precision = np.zeros(T)
    recall = np.zeros(T)
    for t in range(T):
        tps = np.cumsum(match[t] & ~ignore[t]).astype(float)
        fps = np.cumsum(~match[t] & ~ignore[t]).astype(float)
        if len(tps) == 0:
            continue
        rc = tps / num_gt
        pr = tps / np.maximum(tps + fps, np.spacing(1))
        recall[t] = rc[-1]
        pr = np.maximum.accumulate(pr[::-1])[::-1]
        inds = np.searchsorted(rc, RECALL_THRESHOLDS, side="left")
        q = np.zeros(R)
        valid = inds < len(pr)
        q[valid] = pr[inds[valid]]
        precision[t] = q.mean()
    return precision, recall


def average_precision(predictions: Sequence[Sequence[Instance]],
                      ground_truths: Sequence[Sequence[Instance]],
                      k: np.ndarray | float) -> APResult:
    """AP/AR over OKS thresholds 0.50:0.05:0.95, one list of instances per image.

    Area splits with no ground truth report -1, as the COCO evaluator does.
    """
    if len(predictions) != len(ground_truths):
        raise ValueError("predictions and ground truths must cover the same images")
    if sum(len(g) for g in ground_truths) == 0:
        raise ValueError("empty ground-truth set")
    summary = {}
    for name, rng in AREA_RANGES.items():
        per_image = [_evaluate_image(list(d), list(g), k, rng)
                     for d, g in zip(predictions, ground_truths)]
        summary[name] = _accumulate(per_image)
    prec, rec = summary["all"]

    def mean_valid(v):
        v = v[v > -1]
        return float(v.mean()) if len(v) else -1.0

    return APResult(
        AP=mean_valid(prec),
        AP50=float(prec[0]),
        AP75=float(prec[5]),
        AP_M=mean_valid(summary["medium"][0]),
        AP_L=mean_valid(summary["large"][0]),
        AR=mean_valid(rec),
        extras={"AR50": float(rec[0]), "AR75": float(rec[5]),
                "AR_M": mean_valid(summary["medium"][1]),
                "AR_L": mean_valid(summary["large"][1])},
    )


def single_instance_ap(pred_coords: np.ndarray, scores: np.ndarray, gt_coords: np.ndarray,
                       visibility: np.ndarray, areas: np.ndarray, k) -> APResult:
    """AP for one-person-per-image data (every image pairs one prediction with one truth)."""
    preds = [[Instance(p, None, float(a), float(s))]
             for p, s, a in zip(pred_coords, scores, areas)]
    gts = [[Instance(g, v, float(a))] for g, v, a in zip(gt_coords, visibility, areas)]
    return average_precision(preds, gts, k)


def pck(pred: np.ndarray, gt: np.ndarray, visibility: np.ndarray, normalizer: np.ndarray,
        threshold: float = 0.5, joint_names: Sequence[str] | None = None) -> dict:
    """Percent of visible keypoints with distance <= threshold * normalizer (inclusive).

    Arrays are (N, K, 2) / (N, K) / (N,). Returns per-joint percentages and ``total``.
    Joints sharing a name (e.g. left and right elbow both named ``elbow``) are pooled.
    """
    pred, gt = np.asarray(pred, np.float64), np.asarray(gt, np.float64)
    vis = np.asarray(visibility) > 0
    norm = np.asarray(normalizer, np.float64)
    if np.any(norm <= 0):
        raise ValueError("normalizer must be positive")
    d = np.linalg.norm(pred - gt, axis=-1)
    correct = (d <= threshold * norm[:, None]) & vis
    names = list(joint_names) if joint_names is not None else [str(i) for i in range(gt.shape[1])]
    table = {}
    for name in dict.fromkeys(names):
        cols = [i for i, n in enumerate(names) if n == name]
        n_vis = vis[:, cols].sum()
        table[name] = 100.0 * correct[:, cols].sum() / n_vis if n_vis else float("nan")
    table["total"] = 100.0 * correct.sum() / vis.sum() if vis.sum() else float("nan")
    return table


def check_flip_pairs(flip_pairs, num_channels: int) -> None:
    seen = set()
    for pair in flip_pairs:
        if len(pair) != 2:
            raise ValueError(f"flip pair {pair!r} must have two entries")
        for c in pair:
            if not 0 <= c < num_channels:
                raise ValueError(f"flip pair {pair!r} out of range for {num_channels} channels")
            if c in seen:
                raise ValueError(f"channel {c} appears in more than one flip pair")
            seen.add(c)
        if pair[0] == pair[1]:
            raise ValueError(f"flip pair {pair!r} maps a channel to itself")


def swap_channels(x: torch.Tensor, flip_pairs) -> torch.Tensor:
    perm = list(range(x.shape[1]))
    for a, b in flip_pairs:
        perm[a], perm[b] = b, a
    return x[:, perm]


def flip_average_inference(network, image: torch.Tensor, flip_pairs) -> torch.Tensor:
    """Average of the plain output and the un-mirrored, channel-swapped mirror output."""
    out = network(image)
    check_flip_pairs(flip_pairs, out.shape[1])
    mirrored = network(torch.flip(image, dims=[-1]))
    mirrored = swap_channels(torch.flip(mirrored, dims=[-1]), flip_pairs)
    return 0.5 * (out + mirrored)


@dataclass
class FlopsReport:
    macs: int
    per_layer: list = field(default_factory=list)

    @property
    def flops(self) -> int:
        return 2 * self.macs

    def as_dict(self) -> dict:
        return {"macs": self.macs, "flops": self.flops, "gmacs": self.macs / 1e9,
                "gflops": self.flops / 1e9,
                "convention": "MACs count conv/linear multiply-accumulates; FLOPs = 2 x MACs; "
                              "pooling, skip, upsampling and normalization count as 0"}


def count_flops(network: nn.Module, input_size: tuple[int, int], forward=None) -> FlopsReport:
    """MACs of every conv (k_h*k_w*C_in/groups*C_out*H_out*W_out) and linear layer.

    Layer output shapes come from one forward pass on a zero image; ``forward`` can
    override how the network is called (e.g. to pass scale vectors to a supernet).
    """
    per_layer = []

    def hook(module, inputs, output):
        if isinstance(module, nn.Conv2d):
            kh, kw = module.kernel_size
            macs = kh * kw * (module.in_channels // module.groups) * module.out_channels \
                * output.shape[-2] * output.shape[-1]
        else:
            macs = module.in_features * module.out_features
        per_layer.append((names[module], int(macs)))

    names = {m: n for n, m in network.named_modules()}
    handles = [m.register_forward_hook(hook) for m in network.modules()
               if isinstance(m, (nn.Conv2d, nn.Linear))]
    was_training = network.training
    network.eval()
    try:
        with torch.no_grad():
            x = torch.zeros(1, 3, *input_size)
            forward(x) if forward is not None else network(x)
    finally:
        for h in handles:
            h.remove()
        network.train(was_training)
    return FlopsReport(sum(m for _, m in per_layer), per_layer)
