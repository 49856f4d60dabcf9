"""MIL cross-entropy and area-constraint losses and their composition.

A training example is a bag: an image, a binary image-level label, and a
coarse estimate of the cancerous-area fraction (only meaningful for
positive bags).  Every side output and the fused output contributes

    l_side = l_mil + eta * l_ac

where l_mil is the negative log-likelihood of the bag label under the
GM-pooled bag probability, and l_ac penalizes the squared gap between the
mean predicted positiveness and the area estimate on positive bags.  The
total objective is the sum over side layers plus the fused term; all
pieces are assembled from tape operations so one backward pass yields
gradients for every network parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import pooling
from . import tensor as T
from .backbone import SideOutputs
from .superpixels import SuperpixelMap
from .tensor import Tensor


@dataclass
class Bag:
    """One weakly-labeled training image.

    ``area`` is the coarse relative size of the positive region, stored as
    0 for negative bags.
    """

    image: np.ndarray
    label: int
    area: float = 0.0

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"bag label must be 0 or 1, got {self.label!r}")
        if not 0.0 <= self.area <= 1.0:
            raise ValueError(f"area estimate must lie in [0, 1], got {self.area}")
        if self.label == 0 and self.area != 0.0:
            raise ValueError("negative bags must carry area = 0")


@dataclass(frozen=True)
class LossWeights:
    """Balance factors for the area-constraint terms."""

    eta_side: tuple[float, ...] = (2.5, 5.0, 10.0)
    eta_fuse: float = 10.0

    def __post_init__(self):
        if any(e < 0 for e in self.eta_side) or self.eta_fuse < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    """All objective terms of one evaluation (or one accumulated batch).

    Raw per-layer terms are stored; the weighted sums are derived
    properties so the identities  side_sum = sum_t (mil_t + eta_t * ac_t)
    and  total = side_sum + fuse_sum  hold exactly by construction.
    """

    mil_side: tuple[float, ...]
    ac_side: tuple[float, ...]
    mil_fuse: float
    ac_fuse: float
    weights: LossWeights
    loss: Optional[Tensor] = None  # tape scalar, present when built by total_loss

    @property
    def side_terms(self) -> tuple[float, ...]:
        return tuple(
            m + eta * a
            for m, a, eta in zip(self.mil_side, self.ac_side, self.weights.eta_side)
        )

    @property
    def side_sum(self) -> float:
        return sum(self.side_terms)

    @property
    def fuse_sum(self) -> float:
        return self.mil_fuse + self.weights.eta_fuse * self.ac_fuse

    @property
    def total(self) -> float:
        return self.side_sum + self.fuse_sum

    @staticmethod
    def accumulate(parts: Sequence["LossBreakdown"]) -> "LossBreakdown":
        """Sum raw terms over per-bag breakdowns (fixed order)."""
        if not parts:
            raise ValueError("nothing to accumulate")
        weights = parts[0].weights
        t = len(parts[0].mil_side)
        return LossBreakdown(
            mil_side=tuple(sum(p.mil_side[i] for p in parts) for i in range(t)),
            ac_side=tuple(sum(p.ac_side[i] for p in parts) for i in range(t)),
            mil_fuse=sum(p.mil_fuse for p in parts),
            ac_fuse=sum(p.ac_fuse for p in parts),
            weights=weights,
        )


def mil_loss(bag_label: int, bag_prob: float) -> float:
    """Cross-entropy of the bag label given the pooled bag probability.

    Returns -log(p) for positive bags and -log(1 - p) for negative ones;
    the probability is assumed to be clamped into (0, 1) upstream.
    """
    if bag_label not in (0, 1):
        raise ValueError(f"bag label must be 0 or 1, got {bag_label!r}")
    return -math.log(bag_prob) if bag_label == 1 else -math.log(1.0 - bag_prob)


def area_constraint_loss(bag: Bag, positiveness: float) -> float:
    """Squared gap between positiveness and the area estimate, positives only."""
    if bag.label == 0:
        return 0.0
    return (positiveness - bag.area) ** 2


def side_loss(t: int, bags: Sequence[Bag], side_probs: Sequence[float],
              positiveness: Sequence[float], weights: LossWeights) -> float:
    """One side layer's term: summed MIL loss plus eta_t times summed AC loss."""
    if not (len(bags) == len(side_probs) == len(positiveness)):
        raise ValueError(
            f"side_loss needs aligned lists, got {len(bags)} bags, "
            f"{len(side_probs)} probabilities, {len(positiveness)} positiveness values"
        )
    l_mil = sum(mil_loss(b.label, p) for b, p in zip(bags, side_probs))
    l_ac = sum(area_constraint_loss(b, v) for b, v in zip(bags, positiveness))
    return l_mil + weights.eta_side[t] * l_ac


# ---------------------------------------------------------------------------
# tape nodes


def gm_pool_node(prob_map: Tensor, r: float) -> Tensor:
    """Generalized-mean pooling over all elements of a map, on the tape."""
    value = pooling.gm_pool(prob_map.data, r)

    def bwd(g):
        grad = pooling.gm_pool_grad(prob_map.data, r, pooled=value)
        prob_map.accumulate_grad(float(g.reshape(())) * grad.reshape(prob_map.dims))

    return T.wrap_op(np.float64(value).reshape(()), (prob_map,), bwd)


def mean_pool_node(prob_map: Tensor) -> Tensor:
    """Positiveness (mean instance probability) of a map, on the tape."""
    value = pooling.positiveness(prob_map.data)
    n = prob_map.size

    def bwd(g):
        prob_map.accumulate_grad(
            np.full(prob_map.dims, float(g.reshape(())) / n, dtype=prob_map.dtype)
        )

    return T.wrap_op(np.float64(value).reshape(()), (prob_map,), bwd)


def superpixel_pool_node(prob_map: Tensor, sp: SuperpixelMap) -> Tensor:
    """Average a (B,1,H,W) map over superpixel regions, on the tape.

    Produces one instance value per region; the gradient is distributed
    uniformly back to the member pixels.
    """
    flat_map = prob_map.data.reshape(prob_map.dims[-2:])
    if flat_map.shape != sp.labels.shape:
        raise T.ShapeError(
            f"probability map {flat_map.shape} does not match superpixel "
            f"labels {sp.labels.shape}"
        )
    values = sp.pool(flat_map)

    def bwd(g):
        per_pixel = (g / sp.region_sizes)[sp.labels]
        prob_map.accumulate_grad(per_pixel.reshape(prob_map.dims).astype(prob_map.dtype))

    return T.wrap_op(values, (prob_map,), bwd)


def _bag_terms(bag: Bag, prob_map: Tensor, r: float,
               sp: Optional[SuperpixelMap]) -> tuple[Tensor, Optional[Tensor]]:
    """MIL term and (for positives) AC term of one bag under one map."""
    instances = prob_map if sp is None else superpixel_pool_node(prob_map, sp)
    bag_prob = gm_pool_node(instances, r)
    if bag.label == 1:
        mil = T.neg(T.log(bag_prob))
        gap = T.add_scalar(mean_pool_node(instances), -bag.area)
        return mil, T.mul(gap, gap)
    mil = T.neg(T.log(T.add_scalar(T.neg(bag_prob), 1.0)))
    return mil, None


def total_loss(bags: Sequence[Bag], outputs: Sequence[SideOutputs],
               weights: LossWeights, r: float = 4.0,
               superpixel_maps: Optional[Sequence[Optional[SuperpixelMap]]] = None,
               ) -> LossBreakdown:
    """Assemble the full objective over a batch of bags.

    Per bag and per map (each side output plus the fused one) the bag
    probability is GM-pooled over all instances and the positiveness is
    their mean; terms are summed over bags in the given order.  The
    returned breakdown carries the scalar loss tensor, so calling
    ``backward`` on it fills parameter gradients.
    """
    if len(bags) != len(outputs):
        raise ValueError(f"{len(bags)} bags but {len(outputs)} network outputs")
    if not bags:
        raise ValueError("total_loss needs at least one bag")
    t_layers = len(outputs[0].side_maps)
    if len(weights.eta_side) != t_layers:
        raise ValueError(
            f"{len(weights.eta_side)} side loss weights for {t_layers} side outputs"
        )
    if superpixel_maps is None:
        superpixel_maps = [None] * len(bags)

    mil_side: list[list[Tensor]] = [[] for _ in range(t_layers)]
    ac_side: list[list[Tensor]] = [[] for _ in range(t_layers)]
    mil_fuse: list[Tensor] = []
    ac_fuse: list[Tensor] = []
    for bag, out, sp in zip(bags, outputs, superpixel_maps):
        if out.fused is None:
            raise ValueError("network output is missing the fused map")
        if len(out.side_maps) != t_layers:
            raise ValueError("network outputs disagree on the number of side maps")
        for t in range(t_layers):
            mil, ac = _bag_terms(bag, out.side_maps[t], r, sp)
            mil_side[t].append(mil)
            if ac is not None:
                ac_side[t].append(ac)
        mil, ac = _bag_terms(bag, out.fused, r, sp)
        mil_fuse.append(mil)
        if ac is not None:
            ac_fuse.append(ac)

    def chain_sum(terms: list[Tensor]) -> Optional[Tensor]:
        if not terms:
            return None
        acc = terms[0]
        for term in terms[1:]:
            acc = T.add(acc, term)
        return acc

    mil_side_sum = [chain_sum(terms) for terms in mil_side]
    ac_side_sum = [chain_sum(terms) for terms in ac_side]
    mil_fuse_sum = chain_sum(mil_fuse)
    ac_fuse_sum = chain_sum(ac_fuse)

    total = None
    for t in range(t_layers):
        term = mil_side_sum[t]
        if ac_side_sum[t] is not None:
            term = T.add(term, T.scale(ac_side_sum[t], weights.eta_side[t]))
        total = term if total is None else T.add(total, term)
    fuse_term = mil_fuse_sum
    if ac_fuse_sum is not None:
        fuse_term = T.add(fuse_term, T.scale(ac_fuse_sum, weights.eta_fuse))
    total = T.add(total, fuse_term)

    return LossBreakdown(
        mil_side=tuple(s.item() for s in mil_side_sum),
        ac_side=tuple(0.0 if s is None else s.item() for s in ac_side_sum),
        mil_fuse=mil_fuse_sum.item(),
        ac_fuse=0.0 if ac_fuse_sum is None else ac_fuse_sum.item(),
        weights=weights,
        loss=total,
    )


def predict_mask(outputs: SideOutputs, threshold: float = 0.5) -> np.ndarray:
    """Threshold the fused map into a binary (H, W) mask.

    Pixels with probability strictly above the threshold are positive;
    ties classify as negative.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    fused = outputs.fused.data
    if fused.size != fused.shape[-2] * fused.shape[-1]:
        raise T.ShapeError(f"predict_mask expects a single map, got dims {fused.shape}")
    return fused.reshape(fused.shape[-2:]) > threshold
