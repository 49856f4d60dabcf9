"""F-measure scoring of predicted masks and heatmap rendering.

Cancer (CA) images are scored by overlapping the predicted-positive
pixels H against the annotated region G:

    precision = |H n G| / |H|,  recall = |H n G| / |G|,
    F = 2 * precision * recall / (precision + recall).

Non-cancer (NC) images invert the convention: H is the set of pixels
predicted negative and G is the entire image, so a perfect all-negative
prediction scores F = 1.  Group results are unweighted means of the
per-image F values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .backbone import NetworkState, forward
from .tensor import ShapeError


class EvaluationError(ValueError):
    """Raised when ground truth needed for scoring is unavailable."""


def f_measure(prediction_mask: np.ndarray,
              truth_mask: np.ndarray) -> tuple[float, float, float]:
    """Precision, recall and F between two binary masks.

    Empty-set conventions: an empty side scores 0 against a nonempty one;
    two empty masks count as a vacuously perfect match (1, 1, 1).
    """
    pred = np.asarray(prediction_mask, dtype=bool)
    truth = np.asarray(truth_mask, dtype=bool)
    if pred.shape != truth.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    inter = int(np.logical_and(pred, truth).sum())
    n_pred = int(pred.sum())
    n_truth = int(truth.sum())
    precision = inter / n_pred if n_pred else (1.0 if n_truth == 0 else 0.0)
    recall = inter / n_truth if n_truth else (1.0 if n_pred == 0 else 0.0)
    if precision + recall == 0.0:
        return precision, recall, 0.0
    return precision, recall, 2.0 * precision * recall / (precision + recall)


@dataclass
class ImageScore:
    name: str
    label: int
    precision: float
    recall: float
    f: float


@dataclass
class EvalReport:
    threshold: float
    rows: list[ImageScore] = field(default_factory=list)

    @property
    def mean_f_ca(self) -> float:
        scores = [r.f for r in self.rows if r.label == 1]
        return float(np.mean(scores)) if scores else float("nan")

    @property
    def mean_f_nc(self) -> float:
        scores = [r.f for r in self.rows if r.label == 0]
        return float(np.mean(scores)) if scores else float("nan")

    def write_tsv(self, path) -> None:
        lines = ["image\tlabel\tprecision\trecall\tf_measure"]
        for r in self.rows:
            lines.append(f"{r.name}\t{r.label}\t{r.precision!r}\t{r.recall!r}\t{r.f!r}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    def summary(self) -> str:
        n_ca = sum(1 for r in self.rows if r.label == 1)
        n_nc = len(self.rows) - n_ca
        return (
            f"threshold {self.threshold}\n"
            f"CA images: {n_ca}  mean F = {self.mean_f_ca:.4f}\n"
            f"NC images: {n_nc}  mean F = {self.mean_f_nc:.4f}"
        )


def evaluate(network: NetworkState, bags: Sequence, threshold: float = 0.5,
             map_index: Optional[int] = None, names: Optional[Sequence[str]] = None,
             ) -> EvalReport:
    """Score every bag against its ground-truth mask.

    ``map_index`` selects an individual side output; None scores the
    fused map.  Each bag must carry a ``mask`` attribute; CA bags are
    scored prediction-vs-annotation, NC bags are scored
    predicted-negative-vs-entire-image.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    report = EvalReport(threshold=threshold)
    for i, bag in enumerate(bags):
        name = names[i] if names is not None else f"image_{i:04d}"
        mask = getattr(bag, "mask", None)
        if mask is None:
            raise EvaluationError(f"no ground-truth mask available for {name}")
        out = forward(network, bag.image)
        prob = out.fused.data if map_index is None else out.side_maps[map_index].data
        pred = prob.reshape(prob.shape[-2:]) > threshold
        if bag.label == 1:
            p, r, f = f_measure(pred, mask)
        else:
            p, r, f = f_measure(~pred, np.ones_like(pred, dtype=bool))
        report.rows.append(ImageScore(name, bag.label, p, r, f))
    return report


def render_heatmap(prob_map: np.ndarray, out_path, image: Optional[np.ndarray] = None,
                   mask: Optional[np.ndarray] = None) -> None:
    """Write a probability map as a PNG, blue (0) through red (1).

    When ``image`` (C,H,W in [0,1]) or ``mask`` are given they are laid
    out side by side with the heatmap.
    """
    from PIL import Image

    prob = np.asarray(prob_map, dtype=np.float64)
    prob = prob.reshape(prob.shape[-2:])
    if prob.min() < 0.0 or prob.max() > 1.0:
        raise ValueError("heatmap values must lie in [0, 1]")
    heat = np.zeros(prob.shape + (3,), dtype=np.uint8)
    heat[..., 0] = np.round(prob * 255.0)
    heat[..., 2] = np.round((1.0 - prob) * 255.0)

    panels = []
    if image is not None:
        panels.append(np.round(np.asarray(image).transpose(1, 2, 0) * 255.0).astype(np.uint8))
    panels.append(heat)
    if mask is not None:
        m = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
        panels.append(np.stack([m] * 3, axis=-1))
    Image.fromarray(np.concatenate(panels, axis=1), mode="RGB").save(out_path)
