"""Interpretability exports: learned connectivity and hub ranking, temporal
saliency via gradient-weighted activations, basis-group importance of the
mapping layer, and per-class channel activation profiles.

All exports are numeric (CSV); rendering is left to external tools. Hub
strength excludes the diagonal so self-loops never dominate the ranking.
The saliency target layer is the block output H (B, C, S, D): weights
alpha[c, d] are the gradient of the target logit pooled over the window
axis, and saliency(s) = relu(sum_{c,d} alpha[c, d] * H[c, s, d]), shifted
and scaled to [0, 1]; the per-channel variant skips the sum over channels.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import UsageError, ValidationError
from .graph import normalize_adjacency
from .kan import BASIS_NAMES, KanLayer
from .model import MscgcKanModel
from .tensor import Tensor, as_tensor, reduce_sum


@dataclass
class HubReport:
    """Channels ranked by off-diagonal connection strength (descending,
    ties broken by ascending channel index)."""

    ranking: np.ndarray
    strengths: np.ndarray
    adjacency: np.ndarray


@dataclass
class SaliencyMap:
    temporal: np.ndarray
    per_channel: np.ndarray


def export_adjacency(model: MscgcKanModel):
    """Normalized adjacency plus the hub ranking derived from it."""
    if model.block is None:
        raise UsageError("model has no graph block to export")
    a_hat = normalize_adjacency(model.block.adjacency).data
    off_diag = np.abs(a_hat) - np.diag(np.diag(np.abs(a_hat)))
    strengths = off_diag.sum(axis=1)
    order = np.lexsort((np.arange(strengths.size), -strengths))
    return a_hat, HubReport(order, strengths, a_hat)


def gradcam_temporal(model: MscgcKanModel, sample, target_class: int) -> SaliencyMap:
    """Gradient-weighted temporal saliency of one sample for one class."""
    x = as_tensor(sample)
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    if x.shape[0] != 1:
        raise ValidationError(f"gradcam expects a single sample, got batch {x.shape[0]}")
    if not 0 <= target_class < model.cfg.M:
        raise ValidationError(f"target class {target_class} outside [0, {model.cfg.M})")
    prior = model.mode
    model.set_mode("eval")
    try:
        model.zero_grads()
        logits = model.forward(x)
        h = model.last_block_output
        mask = np.zeros(logits.shape)
        mask[0, target_class] = 1.0
        target = reduce_sum(logits * Tensor(mask))
        target.backward()
    finally:
        model.set_mode(prior)
    grad = h.grad if h.grad is not None else np.zeros_like(h.data)
    act = h.data[0]          # (C, S, D)
    alpha = grad[0].mean(axis=1)                          # (C, D), pooled over windows
    per_channel = _rescale(np.maximum(np.einsum("cd,csd->cs", alpha, act), 0.0))
    temporal = _rescale(np.maximum(np.einsum("cd,csd->s", alpha, act), 0.0))
    return SaliencyMap(temporal, per_channel)


def _rescale(cam: np.ndarray) -> np.ndarray:
    # shift-and-scale to [0, 1]: removes the position-constant attribution
    # offset so the map highlights relative salience; all-zero maps stay zero
    cam = cam - cam.min()
    peak = cam.max()
    return cam / peak if peak > 0 else cam


def kan_basis_importance(model: MscgcKanModel, probe_batch=None, bins: int = 20):
    """Mean |weight| of the output projection per basis group, plus response
    histograms of each basis over an optional probe batch."""
    kan = model.kan
    if not isinstance(kan, KanLayer):
        raise UsageError("model uses an affine mapping; no basis groups to analyze")
    w = np.abs(kan.out_proj.weight.data)
    hidden = kan.hidden
    importance = np.array([w[:, g * hidden:(g + 1) * hidden].mean() for g in range(4)])
    histograms = None
    if probe_batch is not None:
        x = as_tensor(probe_batch)
        if x.ndim == 4:
            # raw samples: run them through provider and block first
            prior = model.mode
            model.set_mode("eval")
            try:
                model.forward(x)
            finally:
                model.set_mode(prior)
            flat = model.last_block_output.reshape(
                x.shape[0], model.cfg.C * model.cfg.S * model.cfg.D)
        else:
            flat = x
        h = kan.hidden_activations(flat).data
        responses = {"h": h, "h2": h * h, "sin": np.sin(h), "tanh": np.tanh(h)}
        histograms = {name: np.histogram(vals.ravel(), bins=bins) for name, vals in responses.items()}
    return importance, histograms


def channel_activation(model: MscgcKanModel, samples, labels, batch_size: int = 256):
    """Per class, mean |H| per channel over samples and (S, D).

    Returns an (M, C) array; classes without samples get a zero row and a
    warning, and are omitted from the CSV export.
    """
    samples = np.asarray(samples)
    labels = np.asarray(labels)
    m, c = model.cfg.M, model.cfg.C
    sums = np.zeros((m, c))
    counts = np.zeros(m, dtype=np.int64)
    prior = model.mode
    model.set_mode("eval")
    try:
        for start in range(0, len(samples), batch_size):
            batch = samples[start:start + batch_size]
            model.forward(batch)
            h = np.abs(model.last_block_output.data)      # (B, C, S, D)
            per_sample = h.mean(axis=(2, 3))
            for cls, row in zip(labels[start:start + batch_size], per_sample):
                sums[cls] += row
                counts[cls] += 1
    finally:
        model.set_mode(prior)
    empty = [cls for cls in range(m) if counts[cls] == 0]
    for cls in empty:
        warnings.warn(f"class {cls} has no samples; activation row omitted")
    activation = np.zeros((m, c))
    present = counts > 0
    activation[present] = sums[present] / counts[present, None]
    return activation, empty


# -- CSV writers --------------------------------------------------------------


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if header:
            writer.writerow(header)
        writer.writerows(rows)


def export_all(model: MscgcKanModel, samples, labels, out_dir, max_saliency_samples: int = 16):
    """Write the five interpretability CSVs into `out_dir`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    a_hat, hubs = export_adjacency(model)
    _write_csv(out_dir / "adjacency.csv", None, [[repr(v) for v in row] for row in a_hat])
    _write_csv(out_dir / "hubs.csv", ["rank", "channel", "strength"],
               [[rank, int(ch), repr(float(hubs.strengths[ch]))]
                for rank, ch in enumerate(hubs.ranking)])

    saliency_rows = []
    n = min(max_saliency_samples, len(samples))
    for sid in range(n):
        sal = gradcam_temporal(model, samples[sid], int(labels[sid]))
        for s, value in enumerate(sal.temporal):
            saliency_rows.append([sid, s, repr(float(value))])
    _write_csv(out_dir / "saliency.csv", ["sample", "s", "value"], saliency_rows)

    importance, _ = kan_basis_importance(model)
    _write_csv(out_dir / "kan_importance.csv", ["basis", "importance"],
               [[name, repr(float(importance[g]))] for g, name in enumerate(BASIS_NAMES)])

    activation, empty = channel_activation(model, samples, labels)
    rows = [[cls, ch, repr(float(activation[cls, ch]))]
            for cls in range(model.cfg.M) if cls not in empty
            for ch in range(model.cfg.C)]
    _write_csv(out_dir / "activation.csv", ["class", "channel", "value"], rows)

    return ["adjacency.csv", "hubs.csv", "saliency.csv", "kan_importance.csv", "activation.csv"]
