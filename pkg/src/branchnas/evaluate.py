"""Run a heatmap model over a dataset and score it."""
from __future__ import annotations

import numpy as np
import torch

from .data import KeypointDataset
from .metrics import APResult, decode_keypoints, flip_average_inference, pck, single_instance_ap


def predict(forward, ds: KeypointDataset, idx=None, batch_size: int = 32,
            flip_pairs=None):
    """Decoded keypoints ``(N, K, 2)`` and per-instance scores for ``ds[idx]``.

    ``forward`` maps an image batch to heatmaps. With ``flip_pairs`` the heatmaps
    are flip-averaged.
    """
    idx = np.arange(len(ds)) if idx is None else np.asarray(idx)
    coords, scores = [], []
    with torch.no_grad():
        for start in range(0, len(idx), batch_size):
            chunk = idx[start:start + batch_size]
            images = torch.from_numpy(np.stack([ds.images[i] for i in chunk]))
            if flip_pairs is not None:
                heatmaps = flip_average_inference(forward, images, flip_pairs)
            else:
                heatmaps = forward(images)
            c, maxvals = decode_keypoints(heatmaps.float())
            coords.append(c)
            scores.append(maxvals.mean(axis=1))
    return np.concatenate(coords), np.concatenate(scores)


def evaluate_ap(forward, ds: KeypointDataset, idx=None, batch_size: int = 32,
                flip_pairs=None) -> APResult:
    idx = np.arange(len(ds)) if idx is None else np.asarray(idx)
    coords, scores = predict(forward, ds, idx, batch_size, flip_pairs)
    return single_instance_ap(coords, scores, ds.keypoints[idx], ds.visibility[idx],
                              ds.areas[idx], ds.k)


def evaluate_report(forward, ds: KeypointDataset, batch_size: int = 32,
                    flip_pairs=None, pck_threshold: float = 0.5) -> dict:
    """AP/AR summary plus a PCK table normalized by instance scale sqrt(area)."""
    coords, scores = predict(forward, ds, None, batch_size, flip_pairs)
    ap = single_instance_ap(coords, scores, ds.keypoints, ds.visibility, ds.areas, ds.k)
    table = pck(coords, ds.keypoints, ds.visibility, np.sqrt(ds.areas) * 0.6, pck_threshold,
                ds.joint_names or None)
    return {"ap": ap.as_dict(), "ap_extras": ap.extras, "pck": table,
            "pck_threshold": pck_threshold, "num_samples": len(ds)}
