"""SLIC over-segmentation and regrouping of pixels into superpixels.

Superpixels let small perceptually-uniform regions act as the instances
of a bag instead of raw pixels, which respects tissue boundaries while
the bag-level formulation stays unchanged.  The clustering is k-means in
(L, a, b, x, y) space with grid-initialized centers at spacing
S = sqrt(H*W/k), a 2S x 2S search window per center, and the distance

    D = sqrt(d_color^2 + (d_xy / S)^2 * m^2)

with compactness m.  After the iterations, fragments disconnected from
their cluster's main component are merged into the largest adjacent
region, so regions always form a 4-connected partition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .tensor import ShapeError

_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)

# sRGB -> XYZ (D65 white point), rows scaled so Y(white) = 1.
_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_D65_WHITE = np.array([0.95047, 1.0, 1.08883])


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """Convert (H, W, 3) sRGB values in [0, 1] to CIELAB (D65)."""
    rgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    linear = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _RGB_TO_XYZ.T / _D65_WHITE
    delta = 6.0 / 29.0
    f = np.where(xyz > delta ** 3, np.cbrt(xyz), xyz / (3 * delta ** 2) + 4.0 / 29.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


@dataclass
class SuperpixelMap:
    """A partition of the image plane into connected regions.

    ``labels`` assigns every pixel a region id in [0, region_count);
    ``region_sizes[j]`` is the pixel count of region j.
    """

    labels: np.ndarray
    region_count: int
    region_sizes: np.ndarray

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "SuperpixelMap":
        labels = np.ascontiguousarray(labels, dtype=np.int32)
        count = int(labels.max()) + 1
        sizes = np.bincount(labels.ravel(), minlength=count).astype(np.int64)
        if (sizes == 0).any():
            raise ValueError("region ids must be contiguous from 0")
        return cls(labels, count, sizes)

    def pool(self, values: np.ndarray) -> np.ndarray:
        """Mean of ``values`` over each region (float64, one entry per region)."""
        if values.shape != self.labels.shape:
            raise ShapeError(
                f"value map {values.shape} does not match labels {self.labels.shape}"
            )
        sums = np.bincount(self.labels.ravel(),
                           weights=values.ravel().astype(np.float64),
                           minlength=self.region_count)
        return sums / self.region_sizes


def _image_as_hwc(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    elif arr.ndim == 3 and arr.shape[0] in (1, 3) and arr.shape[0] < arr.shape[-1]:
        arr = np.moveaxis(arr, 0, -1)
        if arr.shape[-1] == 1:
            arr = np.repeat(arr, 3, axis=-1)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ShapeError(f"expected an RGB or grayscale image, got shape {image.shape}")
    return arr


def slic(image: np.ndarray, k: int, compactness: float = 10.0,
         iterations: int = 10) -> SuperpixelMap:
    """Cluster an image into about k connected superpixels.

    Accepts (H, W), (C, H, W) or (H, W, C) arrays with values in [0, 1].
    Deterministic for fixed inputs: centers start on a regular grid and
    there is no random perturbation.
    """
    rgb = _image_as_hwc(image)
    h, w = rgb.shape[:2]
    if not 1 <= k <= h * w:
        raise ValueError(f"k must lie in [1, {h * w}], got {k}")
    lab = rgb_to_lab(rgb)

    s = np.sqrt(h * w / k)
    ny = max(1, round(h / s))
    nx = max(1, round(w / s))
    # pixel centers sit on integer coordinates, so shift the grid by half
    # a pixel to keep midlines tie-free
    cy = (np.arange(ny) + 0.5) * h / ny - 0.5
    cx = (np.arange(nx) + 0.5) * w / nx - 0.5
    centers_yx = np.array([(y, x) for y in cy for x in cx])
    centers_lab = lab[np.minimum(centers_yx[:, 0].astype(int), h - 1),
                      np.minimum(centers_yx[:, 1].astype(int), w - 1)]

    ys = np.arange(h, dtype=np.float64)
    xs = np.arange(w, dtype=np.float64)
    m2_s2 = (compactness / s) ** 2

    labels = np.full((h, w), -1, dtype=np.int32)
    for _ in range(max(1, iterations)):
        best = np.full((h, w), np.inf)
        labels.fill(-1)
        for j in range(len(centers_yx)):
            yc, xc = centers_yx[j]
            y0, y1 = max(0, int(yc - s)), min(h, int(yc + s) + 1)
            x0, x1 = max(0, int(xc - s)), min(w, int(xc + s) + 1)
            if y0 >= y1 or x0 >= x1:
                continue
            d_lab = lab[y0:y1, x0:x1] - centers_lab[j]
            d_color2 = np.einsum("ijk,ijk->ij", d_lab, d_lab)
            dy = ys[y0:y1, None] - yc
            dx = xs[None, x0:x1] - xc
            dist = d_color2 + (dy * dy + dx * dx) * m2_s2
            win_best = best[y0:y1, x0:x1]
            closer = dist < win_best
            win_best[closer] = dist[closer]
            labels[y0:y1, x0:x1][closer] = j

        _assign_orphans(labels, best, centers_yx)
        for j in range(len(centers_yx)):
            mask = labels == j
            if not mask.any():
                continue
            yy, xx = np.nonzero(mask)
            centers_yx[j] = (yy.mean(), xx.mean())
            centers_lab[j] = lab[yy, xx].mean(axis=0)

    labels = _enforce_connectivity(labels)
    return SuperpixelMap.from_labels(labels)


def _assign_orphans(labels: np.ndarray, best: np.ndarray, centers_yx: np.ndarray) -> None:
    """Attach pixels outside every search window to the nearest center."""
    orphan = labels < 0
    if not orphan.any():
        return
    yy, xx = np.nonzero(orphan)
    d = (yy[:, None] - centers_yx[None, :, 0]) ** 2 + \
        (xx[:, None] - centers_yx[None, :, 1]) ** 2
    labels[yy, xx] = d.argmin(axis=1)


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Merge fragments disconnected from their region's main component.

    For each cluster id the largest 4-connected component keeps the
    label; every other fragment is merged into the adjacent region with
    the largest current pixel count (ties resolve to the lowest id).
    """
    out = labels.copy()
    for region in np.unique(labels):
        comp, n_comp = ndimage.label(out == region, structure=_FOUR_CONNECTED)
        if n_comp <= 1:
            continue
        sizes = np.bincount(comp.ravel())[1:]
        keep = int(sizes.argmax()) + 1
        for frag in range(1, n_comp + 1):
            if frag == keep:
                continue
            mask = comp == frag
            neighbors = _adjacent_labels(out, mask)
            neighbors = neighbors[neighbors != region]
            if neighbors.size == 0:
                continue  # fragment only touches its own region; already connected
            counts = np.bincount(out.ravel(), minlength=int(out.max()) + 1)
            out[mask] = neighbors[counts[neighbors].argmax()]

    # Compact ids in raster order of first appearance.
    flat = out.ravel()
    _, first_idx = np.unique(flat, return_index=True)
    order = flat[np.sort(first_idx)]
    remap = np.full(int(flat.max()) + 1, -1, dtype=np.int32)
    remap[order] = np.arange(len(order), dtype=np.int32)
    return remap[out]


def _adjacent_labels(labels: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Sorted unique labels of pixels 4-adjacent to (but outside) the mask."""
    border = ndimage.binary_dilation(mask, structure=_FOUR_CONNECTED) & ~mask
    return np.unique(labels[border])


def pool_to_superpixels(prob_map: np.ndarray, sp: SuperpixelMap) -> np.ndarray:
    """Instance probabilities: mean pixel probability per region."""
    return sp.pool(np.asarray(prob_map))


def paint_instances(instance_values, sp: SuperpixelMap) -> np.ndarray:
    """Render per-region values back to an (H, W) map."""
    values = np.asarray(instance_values, dtype=np.float64).ravel()
    if values.size != sp.region_count:
        raise ValueError(
            f"{values.size} instance values for {sp.region_count} regions"
        )
    return values[sp.labels]


def save_label_png(sp: SuperpixelMap, path) -> None:
    """Export the label map as a 16-bit grayscale PNG (pixel = region id)."""
    from PIL import Image

    if sp.region_count > 65536:
        raise ValueError("label export supports at most 65536 regions")
    image = Image.new("I;16", (sp.labels.shape[1], sp.labels.shape[0]))
    image.frombytes(sp.labels.astype("<u2").tobytes())
    image.save(path)
