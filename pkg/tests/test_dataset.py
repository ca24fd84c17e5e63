import json

import numpy as np
import pytest

from lanekit import dataset as D
from lanekit import synth
from lanekit.affinity import DecodeConfig, decode, encode_affinities
from lanekit.errors import FormatError

H_SAMPLES = list(range(160, 720, 10))


def write_labels(tmp_path, lines, name="labels.json"):
    path = tmp_path / name
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def label_line(lanes, raw_file="clips/1/20.jpg", h_samples=H_SAMPLES):
    return json.dumps({"lanes": lanes, "h_samples": h_samples, "raw_file": raw_file})


def vertical_lane(x):
    return [x] * len(H_SAMPLES)


# ------------------------------------------------------------------- parse

def test_parse_well_formed_file(tmp_path):
    lines = [label_line([vertical_lane(640)], raw_file=f"c/{i}.jpg") for i in range(3)]
    anns = D.parse_tusimple(write_labels(tmp_path, lines))
    assert len(anns) == 3
    assert anns[1].raw_file == "c/1.jpg"
    assert anns[0].lanes[0][0] == 640


def test_parse_ragged_lane_rejected_others_kept(tmp_path):
    good = label_line([vertical_lane(300)], raw_file="good.jpg")
    bad = json.dumps({"lanes": [[300.0] * 10], "h_samples": H_SAMPLES,
                      "raw_file": "bad.jpg"})
    errors: list[str] = []
    anns = D.parse_tusimple(write_labels(tmp_path, [good, bad, good]), errors)
    assert len(anns) == 2
    assert len(errors) == 1 and errors[0].startswith("line 2:")


def test_parse_reports_missing_keys_and_bad_json(tmp_path):
    errors: list[str] = []
    lines = ["{not json", json.dumps({"lanes": []}), label_line([])]
    anns = D.parse_tusimple(write_labels(tmp_path, lines), errors)
    assert len(anns) == 1
    assert len(errors) == 2
    assert errors[0].startswith("line 1:") and errors[1].startswith("line 2:")


def test_parse_rejects_out_of_range_x(tmp_path):
    errors: list[str] = []
    anns = D.parse_tusimple(
        write_labels(tmp_path, [label_line([vertical_lane(1400)])]), errors)
    assert anns == [] and len(errors) == 1


def test_serialize_parse_round_trip(tmp_path):
    ann = D.LaneAnnotation("clips/x.jpg", H_SAMPLES,
                           (tuple(vertical_lane(512)), tuple(vertical_lane(-2))))
    line = D.serialize_annotation(ann)
    back = D.parse_tusimple(write_labels(tmp_path, [line]))[0]
    assert back == ann


def test_serialize_run_time_field():
    ann = D.LaneAnnotation("a.jpg", H_SAMPLES, (tuple(vertical_lane(100)),))
    obj = json.loads(D.serialize_annotation(ann, run_time_ms=7))
    assert obj["run_time"] == 7
    assert list(obj) == ["lanes", "h_samples", "raw_file", "run_time"]


# --------------------------------------------------------------- rasterize

def test_rasterize_vertical_midline():
    ann = D.LaneAnnotation("a.jpg", H_SAMPLES, (tuple(vertical_lane(640)),))
    mask = D.rasterize(ann)
    assert mask.shape == (88, 160)
    rows = np.unique(np.nonzero(mask)[0])
    assert rows.min() == int(np.ceil(160 * 88 / 720))
    for r in rows:
        cols = np.nonzero(mask[r])[0]
        assert 80 in cols and len(cols) == 2


def test_rasterize_all_absent_is_empty():
    ann = D.LaneAnnotation("a.jpg", H_SAMPLES, (tuple([-2.0] * len(H_SAMPLES)),))
    assert (D.rasterize(ann) == 0).all()


def test_rasterize_single_vertex_lane_skipped():
    lane = [-2.0] * len(H_SAMPLES)
    lane[10] = 500.0
    ann = D.LaneAnnotation("a.jpg", H_SAMPLES, (tuple(lane),))
    assert (D.rasterize(ann) == 0).all()


def test_rasterize_vertices_land_near_their_lane():
    rng = np.random.default_rng(3)
    for trial in range(20):
        x0 = float(rng.uniform(200, 1000))
        drift = float(rng.uniform(-200, 200))
        lane = [x0 + drift * i / len(H_SAMPLES) for i in range(len(H_SAMPLES))]
        ann = D.LaneAnnotation("a.jpg", H_SAMPLES, (tuple(lane),))
        thickness = int(rng.integers(1, 4))
        mask = D.rasterize(ann, thickness=thickness)
        ys, xs = np.nonzero(mask)
        assert len(xs) > 0
        pts = np.stack([xs, ys], axis=1).astype(np.float64)
        for i, y in enumerate(H_SAMPLES):
            sx, sy = lane[i] * 160 / 1280, y * 88 / 720
            if sy < np.ceil(min(l[1] for l in pts)) or sy > max(l[1] for l in pts):
                continue
            d = np.sqrt(((pts - (sx, sy)) ** 2).sum(axis=1)).min()
            assert d <= thickness / 2 + 1


def test_rasterize_never_writes_out_of_bounds():
    lane = [float(x) for x in np.linspace(0, 1279, len(H_SAMPLES))]
    ann = D.LaneAnnotation("a.jpg", H_SAMPLES, (tuple(lane),))
    mask = D.rasterize(ann, thickness=5)
    assert mask.shape == (88, 160)  # clipping happened silently


def test_rasterize_later_lane_overwrites():
    l1 = vertical_lane(640)
    l2 = vertical_lane(642)  # lands on the same map columns
    ann = D.LaneAnnotation("a.jpg", H_SAMPLES, (tuple(l1), tuple(l2)))
    mask = D.rasterize(ann)
    ids = np.unique(mask)
    assert 1 in ids  # overwritten lane compacts to id 1
    assert mask.max() == 1


def test_frame_record_invariant():
    ann = D.LaneAnnotation("a.jpg", H_SAMPLES,
                           (tuple(vertical_lane(300)), tuple(vertical_lane(900))))
    img = np.zeros((3, 352, 640), dtype=np.float32)
    rec = D.make_frame_record(ann, img)
    assert rec.mask.max() == 2
    with pytest.raises(FormatError):
        D.make_frame_record(ann, np.zeros((3, 100, 100), dtype=np.float32))


# ------------------------------------------------------ lanes_to_annotation

def test_lanes_to_annotation_inverts_rasterize_example():
    ann = D.LaneAnnotation("a.jpg", H_SAMPLES, (tuple(vertical_lane(640)),))
    mask = D.rasterize(ann)
    decoded = decode((mask > 0).astype(np.float32), encode_affinities(mask))
    back = D.lanes_to_annotation(decoded, H_SAMPLES)
    xs = np.asarray(back.lanes[0])
    covered = xs >= 0
    assert covered.sum() > 40
    assert np.abs(xs[covered] - 640.0).max() <= 4.0


def test_lanes_to_annotation_outside_extent_absent():
    from lanekit.affinity import DecodedLane, DecodedLanes
    # centroid 79.5 = cells {79, 80}, whose span is centered on original x=640
    lanes = DecodedLanes(
        (DecodedLane(1, ((79.5, 50), (79.5, 49), (79.5, 48), (79.5, 47))),),
        np.zeros((88, 160), dtype=np.int32))
    ann = D.lanes_to_annotation(lanes, H_SAMPLES)
    xs = np.asarray(ann.lanes[0])
    ys = np.asarray(H_SAMPLES, dtype=np.float64)
    extent = (ys >= 47.5 * 720 / 88) & (ys <= 50.5 * 720 / 88)
    assert (xs[~extent] == -2).all()
    assert np.allclose(xs[extent], 640.0)


def test_lanes_to_annotation_no_coverage_all_absent():
    from lanekit.affinity import DecodedLane, DecodedLanes
    lanes = DecodedLanes(
        (DecodedLane(1, ((10.0, 2), (10.0, 1))),),  # above every h_sample
        np.zeros((88, 160), dtype=np.int32))
    ann = D.lanes_to_annotation(lanes, H_SAMPLES)
    assert all(x == -2 for x in ann.lanes[0])


def test_full_pipeline_geometric_fidelity():
    deltas = []
    for seed in range(25):
        spec = synth.random_scene_spec(seed + 500)
        mask, src = synth.generate(spec)
        decoded = decode((mask > 0).astype(np.float32), encode_affinities(mask),
                         DecodeConfig())
        back = D.lanes_to_annotation(decoded, src.h_samples)
        src_lanes = [np.asarray(l) for l in src.lanes]
        for lane in back.lanes:
            xs = np.asarray(lane)
            best = None
            for ref in src_lanes:
                both = (xs >= 0) & (ref >= 0)
                if both.sum() < 5:
                    continue
                diff = np.abs(xs[both] - ref[both]).mean()
                if best is None or diff < best:
                    best = diff
            assert best is not None
            deltas.append(best)
    assert np.mean(deltas) <= 4.0


# ------------------------------------------------------------------- noise

def test_noise_sigma_zero_identity():
    img = np.random.default_rng(0).random((3, 16, 16), dtype=np.float32)
    assert (D.add_noise(img, "gaussian", 0.0, seed=1) == img).all()
    assert (D.add_noise(img, "speckle", 0.0, seed=1) == img).all()


def test_noise_seed_reproducible():
    img = np.random.default_rng(1).random((3, 32, 32), dtype=np.float32)
    a = D.add_noise(img, "gaussian", 0.1, seed=9)
    b = D.add_noise(img, "gaussian", 0.1, seed=9)
    c = D.add_noise(img, "gaussian", 0.1, seed=10)
    assert (a == b).all()
    assert not (a == c).all()


def test_noise_gaussian_std():
    img = np.full((3, 256, 256), 0.5, dtype=np.float32)
    sigma = 0.05  # pre-clamp regime on mid-gray input
    noisy = D.add_noise(img, "gaussian", sigma, seed=3)
    measured = float((noisy - img).std())
    assert abs(measured - sigma) <= 0.05 * sigma


def test_noise_speckle_scales_with_signal():
    img = np.full((3, 256, 256), 0.5, dtype=np.float32)
    noisy = D.add_noise(img, "speckle", 0.1, seed=4)
    measured = float((noisy - img).std())
    assert abs(measured - 0.05) <= 0.05 * 0.05  # x * (1 + eps): std = 0.5 * sigma


def test_noise_clamped_and_kind_checked():
    img = np.ones((3, 8, 8), dtype=np.float32)
    noisy = D.add_noise(img, "gaussian", 0.5, seed=5)
    assert noisy.min() >= 0.0 and noisy.max() <= 1.0
    with pytest.raises(ValueError):
        D.add_noise(img, "saltpepper", 0.1)
    with pytest.raises(ValueError):
        D.add_noise(img, "gaussian", -1.0)
