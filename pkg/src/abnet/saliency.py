"""Salient patch extraction: region proposals, MBD salience, selection.

Images are ``H x W x 3`` arrays with values in ``[0, 1]`` (uint8 input is
rescaled). Everything here is pure and deterministic.
"""

from __future__ import annotations

import collections
import heapq
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

LUMA = np.array([0.299, 0.587, 0.114])
MBD_MAX_ITER = 8

# counters for conditions that are reported rather than raised
DIAGNOSTICS: collections.Counter = collections.Counter()


@dataclass(frozen=True, order=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.x < 0 or self.y < 0 or self.w <= 0 or self.h <= 0:
            raise ValueError(f"invalid box {self}")

    @property
    def area(self) -> int:
        return self.w * self.h

    def fits(self, height: int, width: int) -> bool:
        return self.x + self.w <= width and self.y + self.h <= height

    def iou(self, other: "BoundingBox") -> float:
        ix = max(0, min(self.x + self.w, other.x + other.w) - max(self.x, other.x))
        iy = max(0, min(self.y + self.h, other.y + other.h) - max(self.y, other.y))
        inter = ix * iy
        return inter / float(self.area + other.area - inter)


@dataclass(frozen=True)
class PatchConfig:
    area_min_frac: float = 0.01
    area_max_frac: float = 0.50
    aspect_min: float = 1.0 / 3.0
    aspect_max: float = 3.0
    nms_threshold: float = 0.5
    n_patches: int = 5
    # proposal segmentation
    seg_scale: float = 1.0
    seg_min_size: int = 4
    seg_sigma: float = 0.8

    def __post_init__(self):
        if not 0 < self.area_min_frac < self.area_max_frac <= 1:
            raise ValueError("need 0 < area_min_frac < area_max_frac <= 1")
        if not self.aspect_min < self.aspect_max:
            raise ValueError("need aspect_min < aspect_max")
        if not 0 < self.nms_threshold < 1:
            raise ValueError("nms_threshold must lie in (0, 1)")
        if self.n_patches < 1:
            raise ValueError("n_patches must be positive")


@dataclass(frozen=True)
class SaliencyMap:
    values: np.ndarray
    iterations: int
    converged: bool


@dataclass(frozen=True)
class PatchSet:
    """Exactly ``n_patches`` boxes; the first ``n_unique`` are distinct survivors."""

    boxes: tuple[BoundingBox, ...]
    scores: tuple[float, ...]
    n_unique: int

    def __len__(self) -> int:
        return len(self.boxes)


def as_float_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        image = image / 255.0
    image = image.astype(np.float64)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")
    return image


def to_gray(image: np.ndarray) -> np.ndarray:
    return as_float_image(image) @ LUMA


# ---------------------------------------------------------------- proposals


def _gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return image
    radius = max(1, int(np.ceil(2 * sigma)))
    k = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    k /= k.sum()
    out = image
    for axis in (0, 1):
        padded = np.pad(out, [(radius, radius) if a == axis else (0, 0) for a in range(out.ndim)], mode="edge")
        out = sum(
            k[i] * np.take(padded, np.arange(i, i + out.shape[axis]), axis=axis)
            for i in range(len(k))
        )
    return out


class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n
        self.internal = [0.0] * n

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a: int, b: int, weight: float) -> None:
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        self.internal[a] = weight


def segment_graph(image: np.ndarray, scale: float = 1.0, min_size: int = 4, sigma: float = 0.8) -> np.ndarray:
    """Graph-based over-segmentation on the 4-neighbour grid.

    Adjacent pixels are joined when their colour distance does not exceed
    either component's internal difference plus ``scale / size``. Returns an
    ``H x W`` array of labels numbered in raster order of first appearance.
    """
    img = _gaussian_blur(as_float_image(image), sigma)
    H, W, _ = img.shape
    idx = np.arange(H * W).reshape(H, W)
    a = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    b = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    flat = img.reshape(-1, 3)
    weights = np.sqrt(((flat[a] - flat[b]) ** 2).sum(axis=1))
    order = np.argsort(weights, kind="stable")

    ds = _DisjointSet(H * W)
    for e in order:
        ra, rb = ds.find(int(a[e])), ds.find(int(b[e]))
        if ra == rb:
            continue
        w = float(weights[e])
        if w <= min(ds.internal[ra] + scale / ds.size[ra], ds.internal[rb] + scale / ds.size[rb]):
            ds.union(ra, rb, w)
    for e in order:
        ra, rb = ds.find(int(a[e])), ds.find(int(b[e]))
        if ra != rb and (ds.size[ra] < min_size or ds.size[rb] < min_size):
            ds.union(ra, rb, max(ds.internal[ra], ds.internal[rb]))

    roots = np.array([ds.find(i) for i in range(H * W)])
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    return rank[inverse].reshape(H, W)


def _box_of(bounds: tuple[int, int, int, int]) -> BoundingBox:
    y0, x0, y1, x1 = bounds
    return BoundingBox(x0, y0, x1 - x0 + 1, y1 - y0 + 1)


def propose_regions(image: np.ndarray, scale: float = 1.0, min_size: int = 4, sigma: float = 0.8) -> list[BoundingBox]:
    """Candidate boxes from segmentation plus bottom-up greedy merging.

    Every segment contributes its box; then the most similar adjacent pair
    (mean-colour distance plus a size term favouring small regions) is merged
    repeatedly until one region is left, each merge contributing a box.
    """
    img = as_float_image(image)
    H, W, _ = img.shape
    if H < 16 or W < 16:
        raise ValueError(f"propose_regions needs at least 16x16 pixels, got {H}x{W}")
    labels = segment_graph(img, scale, min_size, sigma)
    n = int(labels.max()) + 1

    sizes = np.bincount(labels.ravel(), minlength=n).astype(float)
    color_sum = np.stack([np.bincount(labels.ravel(), weights=img[..., c].ravel(), minlength=n) for c in range(3)], axis=1)
    ys, xs = np.indices((H, W))
    bounds = {}
    for r in range(n):
        m = labels == r
        bounds[r] = (int(ys[m].min()), int(xs[m].min()), int(ys[m].max()), int(xs[m].max()))
    neighbours: dict[int, set[int]] = {r: set() for r in range(n)}
    for la, lb in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        diff = la != lb
        for p, q in set(zip(la[diff].tolist(), lb[diff].tolist())):
            neighbours[p].add(q)
            neighbours[q].add(p)

    sizes_d = {r: sizes[r] for r in range(n)}
    colors = {r: color_sum[r] for r in range(n)}
    total = float(H * W)

    def cost(p: int, q: int) -> float:
        dist = np.linalg.norm(colors[p] / sizes_d[p] - colors[q] / sizes_d[q])
        return float(dist + (sizes_d[p] + sizes_d[q]) / total)

    boxes = [_box_of(bounds[r]) for r in range(n)]
    heap = [(cost(p, q), p, q) for p in range(n) for q in neighbours[p] if p < q]
    heapq.heapify(heap)
    alive = set(range(n))
    next_id = n
    while heap and len(alive) > 1:
        _, p, q = heapq.heappop(heap)
        if p not in alive or q not in alive:
            continue
        r = next_id
        next_id += 1
        sizes_d[r] = sizes_d[p] + sizes_d[q]
        colors[r] = colors[p] + colors[q]
        bp, bq = bounds[p], bounds[q]
        bounds[r] = (min(bp[0], bq[0]), min(bp[1], bq[1]), max(bp[2], bq[2]), max(bp[3], bq[3]))
        neighbours[r] = (neighbours[p] | neighbours[q]) - {p, q}
        alive -= {p, q}
        for s in neighbours[r]:
            neighbours[s] -= {p, q}
            neighbours[s].add(r)
            heapq.heappush(heap, (cost(s, r), s, r))
        alive.add(r)
        boxes.append(_box_of(bounds[r]))

    return list(dict.fromkeys(boxes))


# ---------------------------------------------------------------- scoring


def geometry_filter(box: BoundingBox, image_dims: tuple[int, int], cfg: PatchConfig) -> bool:
    """Area fraction and aspect ratio (w/h) both inside their inclusive bands."""
    H, W = image_dims
    frac = box.area / float(H * W)
    aspect = box.w / float(box.h)
    return (cfg.area_min_frac <= frac <= cfg.area_max_frac) and (cfg.aspect_min <= aspect <= cfg.aspect_max)


def _pick(cand_cost, cand_u, cand_l, alt_cost, alt_u, alt_l):
    # lower cost wins; equal costs prefer the lower barrier pair so the choice
    # does not depend on which neighbour was listed first
    better = (alt_cost < cand_cost) | ((alt_cost == cand_cost) & (alt_u < cand_u))
    return (
        np.where(better, alt_cost, cand_cost),
        np.where(better, alt_u, cand_u),
        np.where(better, alt_l, cand_l),
    )


def mbd_from_gray(gray: np.ndarray, max_iter: int = MBD_MAX_ITER, trace: Optional[list] = None) -> SaliencyMap:
    """Raster-scan minimum barrier distance to the image border.

    Alternates a forward pass (up/left neighbours) and a backward pass
    (down/right neighbours) until a pass changes nothing or ``max_iter``
    forward+backward rounds have run. Each pass is evaluated one
    anti-diagonal at a time, which is equivalent to the row-major scan because
    every pixel depends only on its already-visited neighbours.
    """
    I = np.asarray(gray, dtype=np.float64)
    H, W = I.shape
    D = np.full((H, W), np.inf)
    U = I.copy()
    L = I.copy()
    D[0, :] = D[-1, :] = D[:, 0] = D[:, -1] = 0.0
    interior = np.zeros((H, W), dtype=bool)
    interior[1:-1, 1:-1] = True

    diagonals = []
    for d in range(H + W - 1):
        r = np.arange(max(0, d - W + 1), min(H, d + 1))
        c = d - r
        keep = interior[r, c]
        diagonals.append((r[keep], c[keep]))

    def sweep(order, dr, dc) -> bool:
        changed = False
        for d in order:
            r, c = diagonals[d]
            if r.size == 0:
                continue
            v = I[r, c]
            best = np.full(r.size, np.inf)
            bu = np.zeros(r.size)
            bl = np.zeros(r.size)
            for nr, nc in ((r + dr, c), (r, c + dc)):
                nu, nl = U[nr, nc], L[nr, nc]
                hi = np.maximum(nu, v)
                lo = np.minimum(nl, v)
                valid = np.isfinite(D[nr, nc])
                cost = np.where(valid, hi - lo, np.inf)
                best, bu, bl = _pick(best, bu, bl, cost, hi, lo)
            upd = best < D[r, c]
            if upd.any():
                changed = True
                rr, cc = r[upd], c[upd]
                D[rr, cc] = best[upd]
                U[rr, cc] = bu[upd]
                L[rr, cc] = bl[upd]
        return changed

    iterations = 0
    converged = False
    n_diag = len(diagonals)
    while iterations < max_iter:
        iterations += 1
        changed = sweep(range(n_diag), -1, -1)
        changed |= sweep(range(n_diag - 1, -1, -1), 1, 1)
        if trace is not None:
            trace.append(D.copy())
        if not changed:
            converged = True
            break
    if not converged:
        DIAGNOSTICS["mbd_nonconverged"] += 1
    values = np.where(np.isfinite(D), D, 0.0)
    return SaliencyMap(np.clip(values, 0.0, 1.0), iterations, converged)


def normalized_gray(image: np.ndarray) -> np.ndarray:
    gray = to_gray(image)
    lo, hi = gray.min(), gray.max()
    if hi - lo <= 0:
        return np.zeros_like(gray)
    return (gray - lo) / (hi - lo)


def mbd_saliency(image: np.ndarray, max_iter: int = MBD_MAX_ITER) -> SaliencyMap:
    return mbd_from_gray(normalized_gray(image), max_iter=max_iter)


def patch_importance(box: BoundingBox, sal: SaliencyMap | np.ndarray, cfg: PatchConfig) -> float:
    """Geometry gate times the mean salience inside the box."""
    values = sal.values if isinstance(sal, SaliencyMap) else np.asarray(sal)
    if not geometry_filter(box, values.shape, cfg):
        return 0.0
    return float(values[box.y:box.y + box.h, box.x:box.x + box.w].mean())


def nms_keep_smaller(boxes: Sequence[BoundingBox], scores: Sequence[float], threshold: float) -> list[int]:
    """Greedy suppression that visits boxes from smallest to largest.

    Returns indices (into ``boxes``) of the kept boxes in visiting order.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    order = sorted(range(len(boxes)), key=lambda i: (boxes[i].area, -scores[i], i))
    kept: list[int] = []
    for i in order:
        if all(boxes[i].iou(boxes[k]) <= threshold for k in kept):
            kept.append(i)
    return kept


def pad_cyclic(items: Sequence, n: int) -> list:
    return [items[i % len(items)] for i in range(n)]


def extract_patch_set(image: np.ndarray, cfg: PatchConfig = PatchConfig()) -> PatchSet:
    img = as_float_image(image)
    H, W, _ = img.shape
    proposals = propose_regions(img, cfg.seg_scale, cfg.seg_min_size, cfg.seg_sigma)
    candidates = [b for b in proposals if b.fits(H, W) and geometry_filter(b, (H, W), cfg)]
    if not candidates:
        full = BoundingBox(0, 0, W, H)
        return PatchSet((full,) * cfg.n_patches, (0.0,) * cfg.n_patches, 0)
    sal = mbd_saliency(img)
    scores = [patch_importance(b, sal, cfg) for b in candidates]
    kept = nms_keep_smaller(candidates, scores, cfg.nms_threshold)
    kept.sort(key=lambda i: (-scores[i], i))
    top = kept[: cfg.n_patches]
    boxes = pad_cyclic([candidates[i] for i in top], cfg.n_patches)
    vals = pad_cyclic([scores[i] for i in top], cfg.n_patches)
    return PatchSet(tuple(boxes), tuple(vals), len(top))


# ---------------------------------------------------------------- cache file

CACHE_HEADER = "# abnet-patch-cache v1"


class PatchCacheError(ValueError):
    pass


def format_cache_line(image_id: str, ps: PatchSet) -> str:
    if any(c in image_id for c in "\t\n"):
        raise ValueError(f"image id may not contain tabs/newlines: {image_id!r}")
    fields = [image_id] + [
        f"{b.x} {b.y} {b.w} {b.h} {format(s, '.17g')}" for b, s in zip(ps.boxes, ps.scores)
    ]
    return "\t".join(fields)


def write_patch_cache(path: str | Path, records: Iterable[tuple[str, PatchSet]]) -> None:
    lines = [CACHE_HEADER] + [format_cache_line(i, ps) for i, ps in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_patch_cache(path: str | Path) -> dict[str, PatchSet]:
    out: dict[str, PatchSet] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line or line.startswith("#"):
            continue
        image_id, *recs = line.split("\t")
        boxes, scores = [], []
        try:
            for rec in recs:
                x, y, w, h, s = rec.split(" ")
                boxes.append(BoundingBox(int(x), int(y), int(w), int(h)))
                scores.append(float(s))
        except ValueError as exc:
            raise PatchCacheError(f"{path}:{lineno}: malformed patch record: {exc}") from exc
        n_unique = len(dict.fromkeys(boxes))
        out[image_id] = PatchSet(tuple(boxes), tuple(scores), n_unique)
    return out
