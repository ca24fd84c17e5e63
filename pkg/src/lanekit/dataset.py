"""Dataset ingestion, mask rasterization and geometric rescaling.

Annotations follow the highway-benchmark JSON-lines convention: each line
holds `raw_file`, `h_samples` (sampled y positions in the original 720-px
frame) and `lanes` (per-lane x positions aligned to h_samples, -2 where the
lane is absent).  Images are resized to 640x352 for the network; label masks
and fields live at 160x88, one eighth of the original capture.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

log = logging.getLogger(__name__)

ORIG_W, ORIG_H = 1280, 720
NET_W, NET_H = 640, 352
MAP_W, MAP_H = 160, 88

_REQUIRED_KEYS = ("raw_file", "h_samples", "lanes")


@dataclass(frozen=True)
class LaneAnnotation:
    raw_file: str
    h_samples: tuple[int, ...]
    lanes: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "h_samples", tuple(int(y) for y in self.h_samples))
        object.__setattr__(
            self, "lanes", tuple(tuple(float(x) for x in lane) for lane in self.lanes)
        )
        for i, lane in enumerate(self.lanes):
            if len(lane) != len(self.h_samples):
                raise FormatError(
                    f"lane {i} has {len(lane)} entries, expected {len(self.h_samples)}"
                )
            for x in lane:
                if x != -2 and not 0 <= x <= ORIG_W - 1:
                    raise FormatError(f"lane {i} x={x} outside [-2] U [0, {ORIG_W - 1}]")


@dataclass(frozen=True)
class FrameRecord:
    """One training frame: network-size image, map-size mask, annotation."""

    image: np.ndarray            # (3, NET_H, NET_W) float32 in [0, 1]
    mask: np.ndarray             # (MAP_H, MAP_W) int32
    annotation: LaneAnnotation


def parse_tusimple(path: str, error_sink: list[str] | None = None) -> list[LaneAnnotation]:
    """Parse a JSON-lines label file.

    Malformed lines are reported (with 1-based line numbers) into error_sink
    or the module logger, and parsing continues.
    """
    annotations: list[LaneAnnotation] = []

    def report(lineno: int, msg: str):
        text = f"line {lineno}: {msg}"
        if error_sink is not None:
            error_sink.append(text)
        else:
            log.warning("%s: %s", path, text)

    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                report(lineno, f"invalid JSON ({e.msg})")
                continue
            missing = [k for k in _REQUIRED_KEYS if k not in obj]
            if missing:
                report(lineno, f"missing keys {missing}")
                continue
            try:
                annotations.append(
                    LaneAnnotation(str(obj["raw_file"]), obj["h_samples"], obj["lanes"])
                )
            except (FormatError, TypeError, ValueError) as e:
                report(lineno, str(e))
    return annotations


def serialize_annotation(ann: LaneAnnotation, run_time_ms: int | None = None) -> str:
    """One JSON line in the benchmark schema (optionally with run_time)."""
    def fmt(x: float):
        return int(x) if float(x).is_integer() else x

    obj = {
        "lanes": [[fmt(x) for x in lane] for lane in ann.lanes],
        "h_samples": list(ann.h_samples),
        "raw_file": ann.raw_file,
    }
    if run_time_ms is not None:
        obj["run_time"] = int(run_time_ms)
    return json.dumps(obj)


def rasterize(ann: LaneAnnotation, out_res: tuple[int, int] = (MAP_H, MAP_W),
              thickness: int = 2) -> np.ndarray:
    """Stroke each lane polyline into an integer label mask.

    Coordinates scale from the original frame to out_res.  Each lane is
    painted one horizontal run per covered row (runs are therefore always
    contiguous); later lanes overwrite earlier ones.  Lanes with fewer than
    two present vertices are skipped.  Ids are compacted to 1..L afterwards.
    """
    if thickness < 1:
        raise ValueError(f"thickness must be >= 1, got {thickness}")
    out_h, out_w = out_res
    sx, sy = out_w / ORIG_W, out_h / ORIG_H
    mask = np.zeros((out_h, out_w), dtype=np.int32)
    ys_orig = np.asarray(ann.h_samples, dtype=np.float64)
    painted_any = []
    for lane_idx, lane in enumerate(ann.lanes):
        xs_orig = np.asarray(lane, dtype=np.float64)
        present = xs_orig >= 0
        if present.sum() < 2:
            if present.any():
                log.warning("lane %d has a single present vertex; skipped", lane_idx)
            continue
        xs = xs_orig[present] * sx
        ys = ys_orig[present] * sy
        lane_id = lane_idx + 1
        # cell-center convention: row r sees the polyline at scaled y = r + 0.5
        r_lo = max(0, int(np.ceil(ys.min() - 0.5)))
        r_hi = min(out_h - 1, int(np.floor(ys.max() - 0.5)))
        wrote = False
        for r in range(r_lo, r_hi + 1):
            x = float(np.interp(r + 0.5, ys, xs))
            left = int(np.floor(x - thickness / 2.0 + 0.5))
            lo, hi = max(0, left), min(out_w, left + thickness)
            if lo < hi:
                mask[r, lo:hi] = lane_id
                wrote = True
        if wrote:
            painted_any.append(lane_id)
    # compact ids that survived painting (overwrites can erase a lane)
    survivors = [i for i in painted_any if (mask == i).any()]
    relabel = np.zeros(len(ann.lanes) + 1, dtype=np.int32)
    for new, old in enumerate(survivors, start=1):
        relabel[old] = new
    return relabel[mask]


def lanes_to_annotation(decoded, h_samples, raw_file: str = "") -> LaneAnnotation:
    """Lift decoded map-resolution lanes back to annotation space.

    Each lane's per-row centroids are upscaled to the original frame and
    linearly interpolated at every h_sample inside the lane's vertical
    extent; samples outside the extent get -2.
    """
    sx, sy = ORIG_W / MAP_W, ORIG_H / MAP_H
    hs = np.asarray(h_samples, dtype=np.float64)
    lanes = []
    for lane in decoded.lanes:
        pts = np.asarray([(x, y) for x, y in lane.points], dtype=np.float64)
        if pts.size == 0:
            lanes.append([-2.0] * len(hs))
            continue
        # map cell index c spans original [c*s, (c+1)*s); its center is c + 0.5
        xs = (pts[:, 0] + 0.5) * sx
        ys = (pts[:, 1] + 0.5) * sy
        order = np.argsort(ys)
        xs, ys = xs[order], ys[order]
        out = np.full(len(hs), -2.0)
        inside = (hs >= ys[0]) & (hs <= ys[-1])
        if inside.any():
            vals = np.interp(hs[inside], ys, xs)
            out[inside] = np.clip(vals, 0.0, ORIG_W - 1)
        lanes.append([float(v) for v in out])
    return LaneAnnotation(raw_file, tuple(int(y) for y in h_samples), tuple(map(tuple, lanes)))


def add_noise(image: np.ndarray, kind: str, sigma: float, seed: int = 0) -> np.ndarray:
    """Inject Gaussian or speckle noise, clamped to [0, 1]."""
    if kind not in ("gaussian", "speckle"):
        raise ValueError(f"noise kind must be 'gaussian' or 'speckle', got {kind!r}")
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    image = np.asarray(image, dtype=np.float32)
    if sigma == 0:
        return image.copy()
    rng = np.random.default_rng(seed)
    eps = rng.normal(0.0, sigma, image.shape).astype(np.float32)
    noisy = image + eps if kind == "gaussian" else image * (1.0 + eps)
    return np.clip(noisy, 0.0, 1.0)


def make_frame_record(ann: LaneAnnotation, image: np.ndarray,
                      thickness: int = 2) -> FrameRecord:
    """Bundle a resized image with its rasterized mask and annotation."""
    image = np.asarray(image, dtype=np.float32)
    if image.shape != (3, NET_H, NET_W):
        raise FormatError(f"image must be (3,{NET_H},{NET_W}), got {tuple(image.shape)}")
    return FrameRecord(image, rasterize(ann, thickness=thickness), ann)
