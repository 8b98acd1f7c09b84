"""Evaluation: FID, character-presence metrics and source-frame correlation.

The feature extractor is the penultimate layer of a small character
classifier trained on the synthetic dataset, so FID values are only
meaningful as orderings between models evaluated with the same extractor.
"""

from __future__ import annotations

import json
import warnings
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import StorySample


class UntrainedClassifierError(RuntimeError):
    pass


class CharClassifier(nn.Module):
    """Multi-label character-presence classifier over synthetic frames.

    Also doubles as the evaluation feature extractor: features() returns the
    pooled penultimate activations.
    """

    FEATURE_DIM = 64

    def __init__(self, n_classes: int):
        super().__init__()
        self.n_classes = n_classes
        self.conv = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, self.FEATURE_DIM, 3, stride=2, padding=1), nn.ReLU(),
        )
        self.head = nn.Linear(self.FEATURE_DIM, n_classes)
        self.register_buffer("trained", torch.tensor(False))

    def features(self, frames: torch.Tensor) -> torch.Tensor:
        """frames (N, 3, h, w) -> (N, FEATURE_DIM)."""
        return self.conv(frames).mean(dim=(2, 3))

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(frames))


def _to_batch(frames: np.ndarray) -> torch.Tensor:
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim == 3:
        frames = frames[None]
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ValueError(f"expected (n, h, w, 3) frames, got {frames.shape}")
    return torch.from_numpy(frames).permute(0, 3, 1, 2)


def _multi_hot(labels: list[set[int]], n_classes: int) -> torch.Tensor:
    out = torch.zeros(len(labels), n_classes)
    for i, s in enumerate(labels):
        for c in s:
            if not 0 <= c < n_classes:
                raise ValueError(f"label {c} outside [0, {n_classes})")
            out[i, c] = 1.0
    return out


def train_char_classifier(frames: np.ndarray, labels: list[set[int]], n_classes: int,
                          epochs: int = 120, batch_size: int = 64, lr: float = 2e-3,
                          val_fraction: float = 0.2,
                          seed: int = 0) -> tuple[CharClassifier, dict]:
    """Train the presence classifier; returns it plus held-out metrics.

    The hold-out split gates whether downstream character metrics can be
    trusted at all, so it is always computed and reported.
    """
    if len(frames) != len(labels):
        raise ValueError("frames/labels length mismatch")
    torch.manual_seed(seed)
    clf = CharClassifier(n_classes)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(frames))
    n_val = max(1, int(len(frames) * val_fraction))
    val_idx, train_idx = order[:n_val], order[n_val:]
    x = _to_batch(frames)
    y = _multi_hot(labels, n_classes)
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    clf.train()
    for _ in range(epochs):
        perm = rng.permutation(len(train_idx))
        for start in range(0, len(train_idx), batch_size):
            idx = train_idx[perm[start:start + batch_size]]
            opt.zero_grad(set_to_none=True)
            loss = F.binary_cross_entropy_with_logits(clf(x[idx]), y[idx])
            loss.backward()
            opt.step()
    clf.trained.fill_(True)
    clf.eval()
    preds = classify_characters(clf, frames[val_idx])
    report = char_metrics(preds, [labels[i] for i in val_idx])
    return clf, {"val_char_f1": report["char_f1"], "val_frame_acc": report["frame_acc"],
                 "n_train": len(train_idx), "n_val": len(val_idx)}


def extract_features(clf: CharClassifier, frames: np.ndarray) -> np.ndarray:
    """Deterministic per-image features (n, FEATURE_DIM) for FID/correlation."""
    if not bool(clf.trained):
        raise UntrainedClassifierError("feature extractor has not been trained")
    clf.eval()
    with torch.no_grad():
        return clf.features(_to_batch(frames)).numpy()


def classify_characters(clf: CharClassifier, frames: np.ndarray,
                        threshold: float = 0.5) -> list[set[int]]:
    """Thresholded multi-label prediction per frame."""
    if not bool(clf.trained):
        raise UntrainedClassifierError("classifier has not been trained")
    clf.eval()
    with torch.no_grad():
        probs = torch.sigmoid(clf(_to_batch(frames)))
    return [set(np.flatnonzero(row >= threshold).tolist()) for row in probs.numpy()]


def char_metrics(pred_labels: list[set[int]], gt_labels: list[set[int]]) -> dict[str, float]:
    """Micro-F1 over character presence plus exact-set frame accuracy."""
    if len(pred_labels) != len(gt_labels):
        raise ValueError(f"length mismatch: {len(pred_labels)} vs {len(gt_labels)}")
    if not gt_labels:
        raise ValueError("empty label lists")
    tp = fp = fn = 0
    exact = 0
    for pred, gt in zip(pred_labels, gt_labels):
        tp += len(pred & gt)
        fp += len(pred - gt)
        fn += len(gt - pred)
        exact += pred == gt
    denom = 2 * tp + fp + fn
    f1 = 2 * tp / denom if denom else 1.0
    return {"char_f1": f1, "frame_acc": exact / len(gt_labels)}


def _sqrt_psd(matrix: np.ndarray, label: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh(matrix)
    if vals.min() < -1e-8:
        warnings.warn(f"clamping negative eigenvalues in {label}: min {vals.min():.3e}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(real: np.ndarray, gen: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    ||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r S_g)^(1/2)); the matrix square
    root is taken through eigendecompositions of symmetric matrices, clamping
    slightly negative eigenvalues (with a warning) rather than failing.
    """
    real, gen = np.asarray(real, dtype=np.float64), np.asarray(gen, dtype=np.float64)
    if real.ndim != 2 or gen.ndim != 2 or real.shape[1] != gen.shape[1]:
        raise ValueError(f"feature sets must be (n, d) with equal d: "
                         f"{real.shape} vs {gen.shape}")
    if real.shape[0] < 2 or gen.shape[0] < 2:
        raise ValueError("need at least 2 samples per set for a covariance")
    if not (np.isfinite(real).all() and np.isfinite(gen).all()):
        raise ValueError("non-finite feature values")
    mu_r, mu_g = real.mean(axis=0), gen.mean(axis=0)
    sig_r = np.atleast_2d(np.cov(real, rowvar=False))
    sig_g = np.atleast_2d(np.cov(gen, rowvar=False))
    root_r = _sqrt_psd(sig_r, "real covariance")
    inner = root_r @ sig_g @ root_r
    inner = (inner + inner.T) / 2
    vals = np.linalg.eigvalsh(inner)
    if vals.min() < -1e-8:
        warnings.warn(f"clamping negative eigenvalues in covariance product: "
                      f"min {vals.min():.3e}")
    vals = np.clip(vals, 0.0, None)
    trace_sqrt = 2.0 * np.sqrt(vals).sum()
    value = float(np.sum((mu_r - mu_g) ** 2) + np.trace(sig_r) + np.trace(sig_g) - trace_sqrt)
    return max(value, 0.0)


def source_correlation(source_frames: np.ndarray, generated_frames: np.ndarray,
                       clf: CharClassifier) -> dict[str, float]:
    """Cosine similarity between source and generated frames in feature space.

    Pairs with a zero-norm feature on either side are skipped with a warning.
    """
    if len(source_frames) != len(generated_frames):
        raise ValueError("source/generated pair count mismatch")
    f_src = extract_features(clf, source_frames)
    f_gen = extract_features(clf, generated_frames)
    sims = []
    for i, (a, b) in enumerate(zip(f_src, f_gen)):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            warnings.warn(f"skipping pair {i}: zero-norm feature")
            continue
        sims.append(float(a @ b / (na * nb)))
    if not sims:
        raise ValueError("all pairs skipped: no non-zero features")
    return {"mean": float(np.mean(sims)), "std": float(np.std(sims))}


def evaluate_stories(clf: CharClassifier, samples: list[StorySample],
                     generated: list[np.ndarray]) -> dict:
    """Full metric set for generated continuations of the given stories.

    generated[i] holds the target frames (T-1, h, w, 3) for samples[i].
    Everything is computed on target frames only; sources enter only as the
    correlation reference.
    """
    if len(samples) != len(generated):
        raise ValueError("samples/generated length mismatch")
    real = np.concatenate([s.target_frames for s in samples])
    fake = np.concatenate(list(generated))
    gt_labels = [lab for s in samples for lab in s.char_labels[1:]]
    sources = np.concatenate([
        np.repeat(s.source_frame[None], s.n_frames - 1, axis=0) for s in samples])
    preds = classify_characters(clf, fake)
    metrics = char_metrics(preds, gt_labels)
    return {
        "fid": fid(extract_features(clf, real), extract_features(clf, fake)),
        "char_f1": metrics["char_f1"],
        "frame_acc": metrics["frame_acc"],
        "correlation": source_correlation(sources, fake, clf),
    }


def write_eval_report(path: str | Path, dataset: str, checkpoint: str,
                      metrics: dict, seeds: list[int]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    record = {"dataset": dataset, "checkpoint": checkpoint, "seeds": seeds, **metrics}
    path.write_text(json.dumps(record, indent=2))
    return path
