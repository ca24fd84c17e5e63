"""Horizontal/vertical affinity-field encoding and lane-instance decoding.

Encoding walks each lane of a label mask row by row, bottom to top.  Every
lane pixel gets a horizontal value in {-1, 0, +1} pointing toward the lane's
center in its own row, and a 2-D unit vector pointing toward the lane's
center in the row above (the top row of a lane points straight up).

Decoding inverts this without any learned component: threshold the
segmentation map, split each row into clusters wherever the horizontal field
flips from non-positive to positive, then stitch clusters onto lane tracks
using the vertical field.  A cluster is charged, per active lane, the mean
residual between the cluster centroid and the lane pixels projected along
their predicted vertical vectors; lanes and clusters are matched greedily in
ascending error, one-to-one.  Unmatched clusters seed new lanes, so the lane
count is never assumed.  Rows are inherently sequential (each depends on the
assignment below it); frames, not rows, are the unit of parallelism.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import CodecError, ShapeError


@dataclass(frozen=True)
class AffinityPair:
    """haf: (H, W) x-component field; vaf: (2, H, W) unit-vector field."""

    haf: np.ndarray
    vaf: np.ndarray

    def __post_init__(self):
        haf = np.asarray(self.haf, dtype=np.float32)
        vaf = np.asarray(self.vaf, dtype=np.float32)
        if haf.ndim != 2 or vaf.shape != (2,) + haf.shape:
            raise ShapeError(
                f"field shapes disagree: haf {tuple(haf.shape)}, vaf {tuple(vaf.shape)}"
            )
        object.__setattr__(self, "haf", haf)
        object.__setattr__(self, "vaf", vaf)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.haf.shape


@dataclass(frozen=True)
class DecodeConfig:
    fg_threshold: float = 0.5
    assoc_threshold: float = 12.0
    min_cluster_size: int = 2
    min_lane_rows: int = 5
    max_gap_rows: int = 2

    def __post_init__(self):
        if not 0.0 < self.fg_threshold < 1.0:
            raise ValueError(f"fg_threshold must be in (0,1), got {self.fg_threshold}")
        if self.assoc_threshold <= 0:
            raise ValueError(f"assoc_threshold must be positive, got {self.assoc_threshold}")


@dataclass(frozen=True)
class DecodedLane:
    lane_id: int
    points: tuple[tuple[float, int], ...]   # (x, y), y strictly decreasing


@dataclass(frozen=True)
class DecodedLanes:
    lanes: tuple[DecodedLane, ...]
    cluster_map: np.ndarray                 # (H, W) int, 0 = unassigned

    def to_json(self) -> str:
        h, w = self.cluster_map.shape
        payload = {
            "lanes": [
                {"id": ln.lane_id, "points": [[float(x), int(y)] for x, y in ln.points]}
                for ln in self.lanes
            ],
            "resolution": [h, w],
        }
        return json.dumps(payload)


def validate_mask(mask: np.ndarray) -> int:
    """Check the label-mask contract; returns the lane count.

    Lane ids must be contiguous 1..L and each lane's pixels in any row must
    form one contiguous run.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise CodecError(f"mask must be 2-D, got shape {tuple(mask.shape)}")
    ids = np.unique(mask)
    ids = ids[ids > 0]
    count = len(ids)
    if count and not np.array_equal(ids, np.arange(1, count + 1)):
        raise CodecError(f"lane ids must be contiguous 1..L, got {ids.tolist()}")
    for lane in ids:
        rows, cols = np.nonzero(mask == lane)
        for r in np.unique(rows):
            xs = cols[rows == r]
            if xs.max() - xs.min() + 1 != len(xs):
                raise CodecError(f"lane {lane} row {r} is not a contiguous run")
    return count


def _row_center(xs: np.ndarray) -> float:
    # nearest half-pixel keeps centers exact for integer runs
    return round(2.0 * float(xs.mean())) / 2.0


def encode_affinities(mask: np.ndarray) -> AffinityPair:
    """Ground-truth fields from a label mask (0 = background, k = lane k)."""
    mask = np.asarray(mask)
    lane_count = validate_mask(mask)
    h, w = mask.shape
    haf = np.zeros((h, w), dtype=np.float32)
    vaf = np.zeros((2, h, w), dtype=np.float32)
    for lane in range(1, lane_count + 1):
        rows, cols = np.nonzero(mask == lane)
        xs_by_row = {int(r): cols[rows == r] for r in np.unique(rows)}
        centers = {r: _row_center(xs) for r, xs in xs_by_row.items()}
        for r in sorted(xs_by_row, reverse=True):
            xs = xs_by_row[r]
            haf[r, xs] = np.sign(centers[r] - xs).astype(np.float32)
            up = centers.get(r - 1)
            if up is None:
                vaf[0, r, xs] = 0.0
                vaf[1, r, xs] = -1.0
            else:
                dx = up - xs.astype(np.float64)
                norm = np.sqrt(dx * dx + 1.0)
                vaf[0, r, xs] = (dx / norm).astype(np.float32)
                vaf[1, r, xs] = (-1.0 / norm).astype(np.float32)
    return AffinityPair(haf, vaf)


def cluster_row_haf(haf_row: np.ndarray, fg_row: np.ndarray,
                    min_cluster_size: int = 1) -> list[np.ndarray]:
    """Split one row's foreground into clusters at non-positive -> positive
    transitions of the horizontal field, scanning left to right."""
    haf_row = np.asarray(haf_row, dtype=np.float32).reshape(-1)
    fg_row = np.asarray(fg_row).reshape(-1).astype(bool)
    if haf_row.shape != fg_row.shape:
        raise ShapeError(f"row lengths differ: haf {haf_row.shape}, fg {fg_row.shape}")
    cols = np.flatnonzero(fg_row)
    clusters: list[list[int]] = []
    prev = None
    for c in cols:
        cur = haf_row[c]
        if clusters and prev is not None and prev <= 0.0 and cur > 0.0:
            clusters.append([int(c)])
        elif not clusters:
            clusters.append([int(c)])
        else:
            clusters[-1].append(int(c))
        prev = cur
    return [np.asarray(cl, dtype=np.int64) for cl in clusters
            if len(cl) >= min_cluster_size]


@dataclass
class LaneTrack:
    """Decoder working state for one lane instance."""

    lane_id: int
    pixel_xs: np.ndarray      # xs of the most recent assigned row
    row: int                  # row index of those pixels
    gap: int = 0
    rows_covered: int = 1
    points: list = field(default_factory=list)


def association_error(track: LaneTrack, centroid_x: float, row_above: int,
                      vaf: np.ndarray) -> float:
    """Mean residual of projecting the track's pixels onto a cluster centroid.

    Each pixel aims along its predicted vertical vector, scaled to its
    distance from the centroid; the residual is what remains.
    """
    xs = track.pixel_xs.astype(np.float64)
    tx = centroid_x - xs
    ty = float(row_above - track.row)
    dist = np.sqrt(tx * tx + ty * ty)
    vx = vaf[0, track.row, track.pixel_xs].astype(np.float64)
    vy = vaf[1, track.row, track.pixel_xs].astype(np.float64)
    rx = tx - vx * dist
    ry = ty - vy * dist
    return float(np.sqrt(rx * rx + ry * ry).mean())


def associate_clusters_vaf(tracks: list[LaneTrack], clusters: list[np.ndarray],
                           vaf: np.ndarray, row_above: int,
                           assoc_threshold: float = 12.0) -> dict[int, int]:
    """One-to-one greedy matching of active tracks to row clusters.

    Returns {track index -> cluster index}; pairs are taken in ascending
    association error and rejected above assoc_threshold.
    """
    centroids = [float(cl.mean()) for cl in clusters]
    scored = []
    for ti, track in enumerate(tracks):
        for ci, cx in enumerate(centroids):
            err = association_error(track, cx, row_above, vaf)
            if err <= assoc_threshold:
                scored.append((err, ti, ci))
    scored.sort()
    taken_t: set[int] = set()
    taken_c: set[int] = set()
    assignment: dict[int, int] = {}
    for err, ti, ci in scored:
        if ti in taken_t or ci in taken_c:
            continue
        assignment[ti] = ci
        taken_t.add(ti)
        taken_c.add(ci)
    return assignment


def decode(seg_prob: np.ndarray, af: AffinityPair,
           cfg: DecodeConfig = DecodeConfig()) -> DecodedLanes:
    """Cluster a thresholded segmentation map into lane instances.

    Rows are processed bottom to top.  The lowest populated row seeds the
    initial lanes; later rows are matched through the vertical field, and
    clusters nobody claims start new lanes, so merge/split scenes and any
    lane count are handled.  Lanes covering fewer than cfg.min_lane_rows
    rows are discarded at the end.
    """
    seg_prob = np.asarray(seg_prob, dtype=np.float32)
    if seg_prob.shape != af.resolution:
        raise ShapeError(
            f"segmentation {tuple(seg_prob.shape)} does not match fields {af.resolution}"
        )
    h, w = seg_prob.shape
    fg = seg_prob >= cfg.fg_threshold
    cluster_map = np.zeros((h, w), dtype=np.int32)
    active: list[LaneTrack] = []
    finished: list[LaneTrack] = []
    next_id = 1

    def start_track(cl: np.ndarray, row: int) -> LaneTrack:
        nonlocal next_id
        t = LaneTrack(next_id, cl, row, points=[(float(cl.mean()), row)])
        next_id += 1
        return t

    for row in range(h - 1, -1, -1):
        clusters = cluster_row_haf(af.haf[row], fg[row], cfg.min_cluster_size)
        if clusters:
            assignment = associate_clusters_vaf(
                active, clusters, af.vaf, row, cfg.assoc_threshold)
        else:
            assignment = {}
        survivors: list[LaneTrack] = []
        for ti, track in enumerate(active):
            if ti in assignment:
                cl = clusters[assignment[ti]]
                track.pixel_xs = cl
                track.row = row
                track.gap = 0
                track.rows_covered += 1
                track.points.append((float(cl.mean()), row))
                cluster_map[row, cl] = track.lane_id
                survivors.append(track)
            else:
                track.gap += 1
                if track.gap > cfg.max_gap_rows:
                    finished.append(track)
                else:
                    survivors.append(track)
        matched = set(assignment.values())
        for ci, cl in enumerate(clusters):
            if ci in matched:
                continue
            track = start_track(cl, row)
            cluster_map[row, cl] = track.lane_id
            survivors.append(track)
        active = survivors
    finished.extend(active)

    finished.sort(key=lambda t: t.lane_id)
    lanes: list[DecodedLane] = []
    relabel = np.zeros(next_id, dtype=np.int32)
    new_id = 1
    for track in finished:
        if track.rows_covered < cfg.min_lane_rows:
            continue
        relabel[track.lane_id] = new_id
        lanes.append(DecodedLane(new_id, tuple(track.points)))
        new_id += 1
    cluster_map = relabel[cluster_map]
    return DecodedLanes(tuple(lanes), cluster_map)


def best_label_agreement(gt_mask: np.ndarray, cluster_map: np.ndarray) -> float:
    """Fraction of ground-truth foreground pixels whose decoded label matches
    the lane id under the best injective label permutation."""
    gt_mask = np.asarray(gt_mask)
    cluster_map = np.asarray(cluster_map)
    if gt_mask.shape != cluster_map.shape:
        raise ShapeError(
            f"mask {tuple(gt_mask.shape)} vs cluster map {tuple(cluster_map.shape)}"
        )
    fg = gt_mask > 0
    total = int(fg.sum())
    if total == 0:
        return 1.0
    gt_ids = np.unique(gt_mask[fg])
    pred_ids = np.unique(cluster_map[fg])
    pred_ids = pred_ids[pred_ids > 0]
    if len(pred_ids) == 0:
        return 0.0
    contingency = np.zeros((len(gt_ids), len(pred_ids)), dtype=np.int64)
    for gi, g in enumerate(gt_ids):
        sel = fg & (gt_mask == g)
        labels = cluster_map[sel]
        for pi, p in enumerate(pred_ids):
            contingency[gi, pi] = int((labels == p).sum())
    small, large = sorted((len(gt_ids), len(pred_ids)))
    if large <= 8:
        mat = contingency if len(gt_ids) <= len(pred_ids) else contingency.T
        best = 0
        for perm in itertools.permutations(range(large), small):
            best = max(best, sum(mat[i, j] for i, j in enumerate(perm)))
    else:
        # greedy fallback for implausibly fragmented decodes
        mat = contingency.copy()
        best = 0
        while mat.size and mat.max() > 0:
            gi, pi = np.unravel_index(mat.argmax(), mat.shape)
            best += int(mat[gi, pi])
            mat[gi, :] = -1
            mat[:, pi] = -1
    return best / total
