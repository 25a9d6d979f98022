"""Open-world prediction and the seen/unseen calibration-bias sweep (S, U, HM, AUC).

A calibration bias ``b`` is added to the score of every composition outside
the seen set, then each sample is predicted by an argmax over the full
attribute x object grid. Sweeping ``b`` trades seen accuracy for unseen
accuracy; the curve is summarized by best seen/unseen accuracy, best
harmonic mean and the area under the unseen-vs-seen curve.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .scores import ScoreTable
from .space import Composition, CompositionSpace


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsCurve:
    bias: np.ndarray
    seen: np.ndarray
    unseen: np.ndarray

    def __len__(self) -> int:
        return len(self.bias)

    def points(self):
        return list(zip(self.bias.tolist(), self.seen.tolist(), self.unseen.tolist()))

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["bias", "seen", "unseen"])
            for b, s, u in self.points():
                w.writerow([repr(b), repr(s), repr(u)])


@dataclass(frozen=True)
class MetricsSummary:
    S: float
    U: float
    HM: float
    AUC: float

    def to_dict(self) -> dict:
        return asdict(self)


def _grid(row) -> np.ndarray:
    if isinstance(row, tuple):
        rho_a, rho_o = (np.asarray(r, dtype=np.float64) for r in row)
        return np.outer(rho_a, rho_o)
    return np.asarray(row, dtype=np.float64)


def predict_open_world(row, space: CompositionSpace | None = None) -> Composition:
    """Argmax of rho_a(a) * rho_o(o) over the full grid, lowest attribute-major index on ties.

    ``row`` is either a (rho_a, rho_o) pair or a dense |A| x |O| score grid.
    """
    grid = _grid(row)
    if grid.size == 0:
        raise MetricsError("cannot predict over an empty composition space")
    if space is not None and grid.shape != (space.n_attributes, space.n_objects):
        raise MetricsError(f"score grid {grid.shape} does not match space {(space.n_attributes, space.n_objects)}")
    a, o = divmod(int(np.argmax(grid)), grid.shape[1])
    return Composition(a, o)


def predict_open_world_batch(scores: np.ndarray) -> np.ndarray:
    """(n, |A|, |O|) scores -> (n, 2) predicted (attribute, object) indices."""
    n, na, no = scores.shape
    flat = np.argmax(scores.reshape(n, -1), axis=1)
    return np.stack([flat // no, flat % no], axis=1)


def _prepare(scores, labels, space: CompositionSpace):
    if isinstance(scores, ScoreTable):
        if labels is None:
            labels = scores.labels
        scores = scores.composition_scores()
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 3 or scores.shape[1:] != (space.n_attributes, space.n_objects):
        raise MetricsError(f"scores must be (n, {space.n_attributes}, {space.n_objects}), got {scores.shape}")
    if labels is None:
        raise MetricsError("bias sweep needs ground-truth labels")
    labels = np.asarray([c.as_tuple() if isinstance(c, Composition) else c for c in labels], dtype=np.int64)
    labels = labels.reshape(-1, 2)
    if len(labels) != len(scores):
        raise MetricsError(f"{len(labels)} labels for {len(scores)} score rows")
    if not np.all(np.isfinite(scores)):
        raise MetricsError("scores contain non-finite values")
    seen_mask = space.seen_mask()
    is_seen = seen_mask[labels[:, 0], labels[:, 1]]
    unseen_labels = {c.as_tuple() for c in space.unseen}
    stray = [tuple(l) for l, s in zip(labels.tolist(), is_seen) if not s and tuple(l) not in unseen_labels]
    if stray:
        raise MetricsError(f"labels outside the seen and unseen splits: {stray[:5]}")
    return scores, labels, seen_mask, is_seen


def bias_sweep(scores, labels, space: CompositionSpace) -> MetricsCurve:
    """Seen/unseen accuracy at every bias where some prediction flips.

    Candidate biases are the sorted unique per-sample gaps (best seen score minus
    best unseen score) plus sentinels -M and +M. A sample switches to its best
    unseen composition once the bias strictly exceeds its gap, so an exact
    seen/unseen tie stays on the seen side.
    """
    scores, labels, seen_mask, is_seen = _prepare(scores, labels, space)
    if not np.any(~is_seen):
        raise MetricsError("bias sweep is undefined without unseen-labeled samples")
    if not np.any(is_seen):
        raise MetricsError("bias sweep is undefined without seen-labeled samples")
    n = len(scores)
    flat = scores.reshape(n, -1)
    mask = seen_mask.ravel()
    label_flat = labels[:, 0] * space.n_objects + labels[:, 1]

    seen_scores = np.where(mask, flat, -np.inf)
    unseen_scores = np.where(mask, -np.inf, flat)
    best_seen = np.argmax(seen_scores, axis=1)
    best_unseen = np.argmax(unseen_scores, axis=1)
    gap = seen_scores[np.arange(n), best_seen] - unseen_scores[np.arange(n), best_unseen]

    big = 2.0 * float(np.max(np.abs(flat))) + 1.0
    biases = np.concatenate([[-big], np.unique(gap), [big]])

    # seen-labeled: correct while bias <= gap; unseen-labeled: correct once bias > gap
    seen_ok = np.sort(gap[is_seen & (best_seen == label_flat)])
    unseen_ok = np.sort(gap[~is_seen & (best_unseen == label_flat)])
    n_seen, n_unseen = int(is_seen.sum()), int((~is_seen).sum())
    seen_acc = (len(seen_ok) - np.searchsorted(seen_ok, biases, side="left")) / n_seen
    unseen_acc = np.searchsorted(unseen_ok, biases, side="left") / n_unseen
    return MetricsCurve(biases, seen_acc.astype(np.float64), unseen_acc.astype(np.float64))


def auc(curve: MetricsCurve) -> float:
    """Trapezoidal area under unseen accuracy as a function of seen accuracy, x100."""
    if len(curve) == 0:
        raise MetricsError("empty curve")
    xs, inv = np.unique(curve.seen, return_inverse=True)
    ys = np.full(len(xs), -np.inf)
    np.maximum.at(ys, inv, curve.unseen)
    if len(xs) < 2:
        warnings.warn("curve has a single distinct seen-accuracy value; AUC is 0", RuntimeWarning, stacklevel=2)
        return 0.0
    area = float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))
    return 100.0 * area


def check_curve(curve: MetricsCurve) -> None:
    if np.any(np.diff(curve.bias) < 0):
        raise MetricsError("curve biases are not sorted")
    if np.any(np.diff(curve.seen) > 0):
        raise MetricsError("seen accuracy increases with bias")
    if np.any(np.diff(curve.unseen) < 0):
        raise MetricsError("unseen accuracy decreases with bias")
    for name, v in (("seen", curve.seen), ("unseen", curve.unseen)):
        if np.any((v < 0) | (v > 1)):
            raise MetricsError(f"{name} accuracy outside [0, 1]")


def summarize(curve: MetricsCurve) -> MetricsSummary:
    s, u = curve.seen, curve.unseen
    denom = s + u
    hm = np.where(denom > 0, 2 * s * u / np.where(denom > 0, denom, 1.0), 0.0)
    S = 100.0 * float(np.max(s)) if len(s) else 0.0
    U = 100.0 * float(np.max(u)) if len(u) else 0.0
    HM = 100.0 * float(np.max(hm)) if len(hm) else 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        A = auc(curve) if len(curve) else 0.0
    if A > S * U / 100.0 + 1e-9 or A > 100.0 + 1e-9:
        raise MetricsError(f"AUC {A} violates the bound AUC <= S*U/100 = {S * U / 100.0}")
    return MetricsSummary(S, U, HM, A)


def evaluate_scores(table_or_scores, space: CompositionSpace, labels=None):
    curve = bias_sweep(table_or_scores, labels, space)
    check_curve(curve)
    return curve, summarize(curve)


def open_world_accuracy(scores, labels, space: CompositionSpace) -> dict:
    """Plain (bias 0) top-1 accuracy split by seen/unseen labels."""
    scores, labels, _, is_seen = _prepare(scores, labels, space)
    pred = predict_open_world_batch(scores)
    hit = np.all(pred == labels, axis=1)
    out = {"all": float(hit.mean())}
    out["seen"] = float(hit[is_seen].mean()) if is_seen.any() else float("nan")
    out["unseen"] = float(hit[~is_seen].mean()) if (~is_seen).any() else float("nan")
    return out


def save_summary(summary: MetricsSummary, path, **extra) -> None:
    record = {**extra, **summary.to_dict()}
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
