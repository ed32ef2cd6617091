"""Grid subsampling, radius search, point pyramids, spheres and augmentation."""
from __future__ import annotations

from dataclasses import dataclass, field

import itertools

import numpy as np
from scipy.spatial import cKDTree

from .cloud_io import UNASSIGNED, UNLABELED, PointCloud

# (grid size, convolution radius) per encoder layer of the full-scale network
DEFAULT_SCHEDULE = ((0.24, 0.6), (0.48, 1.2), (0.96, 2.4), (1.92, 4.8), (3.84, 9.6))


def _majority(groups: np.ndarray, values: np.ndarray, n_groups: int, ignore) -> np.ndarray:
    """Most frequent value per group, lowest value on ties, ``ignore`` skipped."""
    out = np.full(n_groups, ignore, dtype=values.dtype)
    keep = values != ignore
    if not keep.any():
        return out
    g, v = groups[keep], values[keep].astype(np.int64)
    uniq, vidx = np.unique(v, return_inverse=True)
    counts = np.zeros((n_groups, len(uniq)), dtype=np.int64)
    np.add.at(counts, (g, vidx), 1)
    has = counts.sum(axis=1) > 0
    out[has] = uniq[counts[has].argmax(axis=1)].astype(values.dtype)
    return out


def grid_cells(positions: np.ndarray, cell_size: float) -> np.ndarray:
    return np.floor(positions / cell_size).astype(np.int64)


def grid_subsample(cloud: PointCloud, cell_size: float) -> tuple[PointCloud, np.ndarray]:
    """Replace the points of each occupied grid cell by their barycenter.

    Cells are anchored at the global origin. Intensity and return count are
    averaged (return count rounded), labels and segments take the majority
    value with ties going to the lowest id. Returns the subsampled cloud and
    the map from each input point to its output point.
    """
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    if len(cloud) == 0:
        return cloud, np.zeros(0, dtype=np.int64)
    cells = grid_cells(cloud.positions, cell_size)
    _, inverse, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = len(counts)

    def mean(values):
        out = np.zeros((m,) + values.shape[1:])
        np.add.at(out, inverse, values)
        return out / counts.reshape((-1,) + (1,) * (values.ndim - 1))

    sub = PointCloud.from_arrays(
        mean(cloud.positions),
        intensity=mean(cloud.intensity),
        return_count=np.round(mean(cloud.return_count.astype(np.float64))),
        label=_majority(inverse, cloud.label, m, UNLABELED),
        segment=_majority(inverse, cloud.segment, m, UNASSIGNED),
    )
    return sub, inverse


def subsample_points(points: np.ndarray, cell_size: float) -> tuple[np.ndarray, np.ndarray]:
    """Barycenters per occupied cell for a bare coordinate array."""
    cells = grid_cells(points, cell_size)
    _, inverse, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    out = np.zeros((len(counts), points.shape[1]))
    np.add.at(out, inverse, points)
    return out / counts[:, None], inverse


def radius_search(queries: np.ndarray, support: np.ndarray, r: float,
                  max_neighbors: int | None = None, seed: int = 0,
                  tree: cKDTree | None = None) -> np.ndarray:
    """Indices of support points within distance ``r`` of each query.

    Rows longer than ``max_neighbors`` are randomly truncated (seeded); all
    rows are padded with the shadow index ``len(support)``. The width is
    ``max_neighbors`` when given, otherwise the longest row.
    """
    if r <= 0:
        raise ValueError("r must be positive")
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    support = np.asarray(support, dtype=np.float64).reshape(-1, 3)
    shadow = len(support)
    if len(queries) == 0 or len(support) == 0:
        return np.full((len(queries), max_neighbors or 0), shadow, dtype=np.int64)
    if tree is None:
        tree = cKDTree(support)
    lists = tree.query_ball_point(queries, r, return_sorted=True)
    lengths = np.fromiter((len(l) for l in lists), dtype=np.int64, count=len(lists))
    width = int(lengths.max(initial=0)) if max_neighbors is None else int(max_neighbors)
    out = np.full((len(queries), width), shadow, dtype=np.int64)
    if width == 0:
        return out
    flat = np.fromiter(itertools.chain.from_iterable(lists), dtype=np.int64,
                       count=int(lengths.sum()))
    rows = np.repeat(np.arange(len(queries)), lengths)
    if (lengths > width).any():
        # random rank inside each row, keep the first ``width`` by rank
        keys = np.random.default_rng(seed).random(len(flat))
        keys[np.repeat(lengths <= width, lengths)] = 0.0
        order = np.lexsort((flat, keys, rows))
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        rank = np.arange(len(flat)) - np.repeat(starts, lengths)
        keep = order[rank < width]
        keep.sort()
        flat, rows = flat[keep], rows[keep]
        lengths = np.minimum(lengths, width)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    cols = np.arange(len(flat)) - np.repeat(starts, lengths)
    out[rows, cols] = flat
    return out


def nearest_index(queries: np.ndarray, support: np.ndarray, tree: cKDTree | None = None) -> np.ndarray:
    """Nearest support point per query, ties broken by lowest index."""
    if tree is None:
        tree = cKDTree(support)
    k = min(4, len(support))
    d, idx = tree.query(queries, k=k)
    if k == 1:
        return idx.reshape(-1).astype(np.int64)
    d = d.reshape(len(queries), k)
    idx = idx.reshape(len(queries), k)
    tied = d == d[:, :1]
    candidates = np.where(tied, idx, np.iinfo(np.int64).max)
    best = candidates.min(axis=1)
    # k nearest may all tie; fall back to an exact scan for those rows
    full = tied.all(axis=1) & (k < len(support))
    for i in np.flatnonzero(full):
        dist = np.sqrt(((support - queries[i]) ** 2).sum(1))
        best[i] = int(np.flatnonzero(dist == dist.min())[0])
    return best.astype(np.int64)


@dataclass
class PyramidLevel:
    """One subsampling level of a sphere.

    ``neighbors``: level points within ``radius`` of each level point.
    ``pool_neighbors``: previous-level points within ``radius`` of each
    level point (strided convolution support); None at level 0.
    ``pool_nearest``: nearest previous-level point for each level point.
    ``up_indices``: for each previous-level point, its nearest point here.
    All neighbor arrays use the shadow index (support size) as padding.
    """

    points: np.ndarray
    grid: float
    radius: float
    neighbors: np.ndarray
    pool_neighbors: np.ndarray | None = None
    pool_nearest: np.ndarray | None = None
    up_indices: np.ndarray | None = None
    segments: np.ndarray | None = None
    features_source_indices: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.points)


def validate_schedule(schedule) -> list[tuple[float, float]]:
    schedule = [(float(g), float(r)) for g, r in schedule]
    if not schedule:
        raise ValueError("schedule must contain at least one level")
    grids = [g for g, _ in schedule]
    if any(g <= 0 for g in grids) or any(r <= 0 for _, r in schedule):
        raise ValueError("grid sizes and radii must be positive")
    if any(b <= a for a, b in zip(grids, grids[1:])):
        raise ValueError(f"schedule grid sizes must be strictly increasing: {grids}")
    return schedule


def build_pyramid(points: np.ndarray, schedule, max_neighbors=None, seed: int = 0,
                  segments: np.ndarray | None = None) -> list[PyramidLevel]:
    """Multi-level pyramid over ``points`` (already subsampled at level 0).

    Level l > 0 holds the grid barycenters of level l-1 at ``grid_l``.
    ``max_neighbors`` is None, an int, or one entry per level; pool
    neighbors use the same cap. ``segments`` (per input point) are carried
    to coarser levels by majority vote.
    """
    schedule = validate_schedule(schedule)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("pyramid level 0 has zero points")
    if max_neighbors is None or np.isscalar(max_neighbors):
        caps = [max_neighbors] * len(schedule)
    else:
        caps = list(max_neighbors)
        if len(caps) != len(schedule):
            raise ValueError("max_neighbors needs one entry per level")
    rng = np.random.default_rng(seed)
    levels: list[PyramidLevel] = []
    prev_tree = None
    for depth, (grid, radius) in enumerate(schedule):
        if depth == 0:
            pts, source, seg = points, None, segments
        else:
            prev = levels[-1]
            pts, source = subsample_points(prev.points, grid)
            seg = None
            if prev.segments is not None:
                seg = _majority(source, prev.segments, len(pts), UNASSIGNED)
        if len(pts) == 0:
            raise ValueError(f"pyramid level {depth} has zero points")
        tree = cKDTree(pts)
        level = PyramidLevel(
            points=pts, grid=grid, radius=radius,
            neighbors=radius_search(pts, pts, radius, caps[depth], int(rng.integers(2**31)), tree),
            segments=seg, features_source_indices=source)
        if depth == 0:
            level.up_indices = np.arange(len(pts), dtype=np.int64)
        else:
            prev = levels[-1]
            level.pool_neighbors = radius_search(pts, prev.points, radius, caps[depth],
                                                 int(rng.integers(2**31)), prev_tree)
            level.pool_nearest = nearest_index(pts, prev.points, prev_tree)
            level.up_indices = nearest_index(prev.points, pts, tree)
        levels.append(level)
        prev_tree = tree
    return levels


def neighbor_count_quantile(levels_list, q: float = 90.0) -> list[int]:
    """Per-level neighbor-count quantile over a set of uncapped pyramids."""
    counts: dict[int, list[np.ndarray]] = {}
    for levels in levels_list:
        for depth, level in enumerate(levels):
            shadow = len(level.points)
            counts.setdefault(depth, []).append((level.neighbors < shadow).sum(axis=1))
    return [max(1, int(np.ceil(np.percentile(np.concatenate(counts[d]), q))))
            for d in sorted(counts)]


def sample_sphere(positions: np.ndarray, center, radius: float,
                  tree: cKDTree | None = None) -> np.ndarray:
    """Sorted indices of all points within ``radius`` of ``center`` (3-D)."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    if tree is None:
        tree = cKDTree(positions)
    return np.asarray(sorted(tree.query_ball_point(np.asarray(center, dtype=np.float64), radius)),
                      dtype=np.int64)


def assemble_input_features(positions: np.ndarray, intensity: np.ndarray) -> np.ndarray:
    """Per-point channels ``[1, intensity, z, normalized z]`` for one sphere.

    Normalized z is ``(z - z_min) / (z_max - z_min)`` within the sphere and
    zero when the sphere is flat.
    """
    if len(positions) == 0:
        raise ValueError("sphere is empty")
    z = positions[:, 2]
    zmin, zmax = z.min(), z.max()
    znorm = (z - zmin) / (zmax - zmin) if zmax > zmin else np.zeros_like(z)
    return np.column_stack([np.ones(len(z)), intensity, z, znorm])


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def augment(positions: np.ndarray, center, seed: int | np.random.Generator,
            sigma: float = 0.04, angle: float | None = None) -> np.ndarray:
    """Rotate about the vertical axis through ``center``, then add Gaussian jitter.

    The angle is uniform in [0, 2 pi) unless given explicitly.
    """
    rng = np.random.default_rng(seed)
    if angle is None:
        angle = rng.uniform(0.0, 2.0 * np.pi)
    center = np.asarray(center, dtype=np.float64)
    out = (positions - center) @ rotation_z(angle).T + center
    if sigma > 0:
        out = out + rng.normal(0.0, sigma, size=out.shape)
    return out


@dataclass
class SphereBatch:
    """Several spheres stacked into one set of pyramids.

    ``offsets[l]`` gives the start of each sphere's points at level l;
    neighbor indices are shifted so spheres never see each other, and the
    shadow index of every level is its total point count.
    """

    levels: list[PyramidLevel]
    offsets: list[np.ndarray]
    features: np.ndarray
    labels: np.ndarray | None = None
    point_index: list[np.ndarray] = field(default_factory=list)

    @property
    def num_spheres(self) -> int:
        return len(self.offsets[0]) - 1

    def sphere_slices(self, depth: int = 0) -> list[slice]:
        o = self.offsets[depth]
        return [slice(int(a), int(b)) for a, b in zip(o[:-1], o[1:])]


def stack_pyramids(pyramids: list[list[PyramidLevel]], features: list[np.ndarray],
                   labels: list[np.ndarray] | None = None,
                   point_index: list[np.ndarray] | None = None) -> SphereBatch:
    depth = len(pyramids[0])
    offsets = [np.concatenate([[0], np.cumsum([len(p[d]) for p in pyramids])]) for d in range(depth)]

    def shift(arr, own_offset, own_shadow, total):
        out = arr + own_offset
        out[arr == own_shadow] = total
        return out

    levels = []
    for d in range(depth):
        total = int(offsets[d][-1])
        prev_total = int(offsets[d - 1][-1]) if d else 0
        lv = PyramidLevel(
            points=np.vstack([p[d].points for p in pyramids]),
            grid=pyramids[0][d].grid, radius=pyramids[0][d].radius,
            neighbors=np.vstack(_pad_same([shift(p[d].neighbors, offsets[d][i], len(p[d]), total)
                                           for i, p in enumerate(pyramids)], total)),
        )
        if d == 0:
            lv.up_indices = np.arange(total, dtype=np.int64)
        else:
            lv.pool_neighbors = np.vstack(_pad_same(
                [shift(p[d].pool_neighbors, offsets[d - 1][i], len(p[d - 1]), prev_total)
                 for i, p in enumerate(pyramids)], prev_total))
            lv.pool_nearest = np.concatenate([p[d].pool_nearest + offsets[d - 1][i]
                                              for i, p in enumerate(pyramids)])
            lv.up_indices = np.concatenate([p[d].up_indices + offsets[d][i]
                                            for i, p in enumerate(pyramids)])
        if all(p[d].segments is not None for p in pyramids):
            # keep segment ids distinct across spheres
            segs, base = [], 0
            for p in pyramids:
                s = p[d].segments
                segs.append(np.where(s >= 0, s + base, s))
                base += int(s.max(initial=-1)) + 1
            lv.segments = np.concatenate(segs)
        levels.append(lv)
    return SphereBatch(levels=levels, offsets=offsets, features=np.vstack(features),
                       labels=None if labels is None else np.concatenate(labels),
                       point_index=list(point_index or []))


def _pad_same(arrays: list[np.ndarray], shadow: int) -> list[np.ndarray]:
    width = max(a.shape[1] for a in arrays)
    out = []
    for a in arrays:
        if a.shape[1] < width:
            a = np.hstack([a, np.full((len(a), width - a.shape[1]), shadow, dtype=a.dtype)])
        out.append(a)
    return out
