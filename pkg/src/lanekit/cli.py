"""lanecli: command-line front end for the lane toolkit.

Exit codes: 0 success, 2 input/format error, 3 evaluation mismatch,
4 internal invariant violation.  Every command that produces files writes a
`manifest.json` beside them echoing the resolved configuration, so a run can
be reproduced bit-for-bit.  Numeric flag defaults come straight from the
library config dataclasses; CLI and library cannot drift.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__, arch, dataset, synth
from . import tensor as T
from .affinity import AffinityPair, DecodeConfig, decode, encode_affinities
from .errors import (CodecError, EvalError, FormatError, IntegrityError,
                     LanekitError, SceneError, ShapeError)
from .evaluate import EvalConfig, aggregate, evaluate_frame
from .losses import total_loss

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_EVAL = 3
EXIT_INVARIANT = 4

_DECODE_DEFAULTS = DecodeConfig()
_EVAL_DEFAULTS = EvalConfig()


def _jobs(value: int | None) -> int:
    env = os.environ.get("LANECLI_JOBS")
    if env:
        return max(1, int(env))
    return max(1, value or 1)


def _write_manifest(directory: str, command: str, config: dict,
                    inputs: list[str], outputs: list[str]) -> None:
    def rel(path: str) -> str:
        # keep manifests byte-identical across output locations
        try:
            return os.path.relpath(path, directory)
        except ValueError:
            return path

    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": sorted(inputs),
        "outputs": sorted(rel(p) for p in outputs),
    }
    blob = json.dumps(manifest, indent=2, sort_keys=True).encode() + b"\n"
    T.atomic_write_bytes(os.path.join(directory, "manifest.json"), blob)


def _parse_res(text: str) -> tuple[int, int]:
    """'WxH' -> (H, W)."""
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise FormatError(f"cannot parse resolution {text!r}, expected WxH") from None
    return h, w


def _emit(obj: dict) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _load_map(path: str, channels: int) -> np.ndarray:
    """Load an .aft map and squeeze it to (H, W) or (C, H, W)."""
    arr = T.load_tensor(path)
    while arr.ndim > 3 and arr.shape[0] == 1:
        arr = arr[0]
    if channels == 1:
        if arr.ndim == 3 and arr.shape[0] == 1:
            arr = arr[0]
        if arr.ndim != 2:
            raise FormatError(f"{path}: expected a 1-channel map, got {arr.shape}")
    else:
        if arr.ndim != 3 or arr.shape[0] != channels:
            raise FormatError(f"{path}: expected a {channels}-channel map, got {arr.shape}")
    return arr


# ----------------------------------------------------------------- commands

def cmd_encode(args) -> int:
    errors: list[str] = []
    annotations = dataset.parse_tusimple(args.labels, error_sink=errors)
    for msg in errors:
        print(f"encode: {args.labels}: {msg}", file=sys.stderr)
    os.makedirs(args.out, exist_ok=True)
    res = _parse_res(args.res)

    def build(item):
        i, ann = item
        try:
            mask = dataset.rasterize(ann, res, args.thickness)
            af = encode_affinities(mask)
            return i, mask, af, None
        except LanekitError as e:
            return i, None, None, f"frame {i}: {e}"

    jobs = _jobs(args.jobs)
    items = list(enumerate(annotations))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(build, items))
    else:
        results = [build(it) for it in items]

    outputs = []
    failed = bool(errors)
    for i, mask, af, err in sorted(results):
        if err is not None:
            print(f"encode: {err}", file=sys.stderr)
            failed = True
            continue
        stem = os.path.join(args.out, f"{i:06d}")
        T.save_tensor(stem + ".mask.aft", mask.astype(np.float32))
        T.save_tensor(stem + ".haf.aft", af.haf)
        T.save_tensor(stem + ".vaf.aft", af.vaf)
        outputs += [stem + ".mask.aft", stem + ".haf.aft", stem + ".vaf.aft"]
    _write_manifest(args.out, "encode",
                    {"labels": args.labels, "thickness": args.thickness,
                     "res": args.res, "frames": len(annotations)},
                    [args.labels], outputs)
    return EXIT_INPUT if failed else EXIT_OK


def cmd_decode(args) -> int:
    seg = _load_map(args.seg, 1)
    haf = _load_map(args.haf, 1)
    vaf = _load_map(args.vaf, 2)
    if haf.shape != seg.shape or vaf.shape[1:] != seg.shape:
        raise FormatError(
            f"map resolutions differ: seg {seg.shape}, haf {haf.shape}, vaf {vaf.shape}"
        )
    cfg = DecodeConfig(fg_threshold=args.fg_thresh, assoc_threshold=args.assoc_thresh,
                       min_cluster_size=args.min_cluster_size,
                       min_lane_rows=args.min_lane_rows)
    result = decode(seg, AffinityPair(haf, vaf), cfg)
    payload = json.loads(result.to_json())
    payload["version"] = __version__
    payload["config"] = cfg.__dict__
    T.atomic_write_bytes(args.out, (json.dumps(payload, sort_keys=True) + "\n").encode())
    out_dir = os.path.dirname(os.path.abspath(args.out))
    _write_manifest(out_dir, "decode", cfg.__dict__,
                    [args.seg, args.haf, args.vaf], [args.out])
    print(f"decoded {len(result.lanes)} lanes -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    gt = dataset.parse_tusimple(args.gt)
    pred = dataset.parse_tusimple(args.pred)
    pred_by_file = {a.raw_file: a for a in pred}
    missing = [a.raw_file for a in gt if a.raw_file not in pred_by_file]
    if missing:
        for name in missing:
            print(f"eval: no prediction for frame {name}", file=sys.stderr)
        return EXIT_EVAL
    extra = set(pred_by_file) - {a.raw_file for a in gt}
    for name in sorted(extra):
        print(f"eval: ignoring prediction without ground truth: {name}", file=sys.stderr)
    cfg = EvalConfig(px_threshold=args.px_thresh, lane_match_threshold=args.lane_thresh)
    results = [evaluate_frame(pred_by_file[a.raw_file], a, cfg) for a in gt]
    pooled = aggregate(results)
    payload = {"version": __version__, "config": cfg.__dict__,
               "frames": len(results), **pooled.to_dict()}
    if args.table:
        print(f"{'Frames':>8} {'Accuracy (%)':>13} {'FP':>8} {'FN':>8} {'F1 (%)':>8}")
        print(f"{len(results):>8} {100 * pooled.accuracy:>13.2f} "
              f"{pooled.fp_rate:>8.4f} {pooled.fn_rate:>8.4f} {100 * pooled.f1:>8.2f}")
    else:
        _emit(payload)
    if args.out:
        T.atomic_write_bytes(args.out,
                             (json.dumps(payload, sort_keys=True) + "\n").encode())
        _write_manifest(os.path.dirname(os.path.abspath(args.out)), "eval",
                        cfg.__dict__, [args.pred, args.gt], [args.out])
    return EXIT_OK


def _format_dims(dims: tuple[int, int, int]) -> str:
    c, h, w = dims
    return f"{w}x{h}x{c}"


def cmd_arch(args) -> int:
    spec = arch.build_enet21(shared_heads=args.shared_heads)
    h, w = _parse_res(args.input)
    report = arch.count_flops(spec, (3, h, w))
    sections = [s.strip() for s in args.report.split(",") if s.strip()]
    if args.format == "json":
        payload = {
            "version": __version__,
            "input": args.input,
            "shared_heads": args.shared_heads,
            "layers": [
                {"row": r.id, "layer": r.name, "head": r.head,
                 "output": _format_dims(r.output_dims), "params": r.params,
                 "flops": r.flops}
                for r in report.per_layer
            ],
            "total_params": report.total_params,
            "total_flops": report.total_flops,
        }
        _emit(payload)
        return EXIT_OK
    header = f"{'row':>3}  {'layer':<28}"
    if "shapes" in sections:
        header += f"{'output':>14}"
    if "params" in sections:
        header += f"{'params':>10}"
    if "flops" in sections:
        header += f"{'flops':>14}"
    print(header)
    print("-" * len(header))
    for r in report.per_layer:
        line = f"{r.id:>3}  {r.name:<28}"
        if "shapes" in sections:
            line += f"{_format_dims(r.output_dims):>14}"
        if "params" in sections:
            line += f"{r.params:>10}"
        if "flops" in sections:
            line += f"{r.flops:>14}"
        print(line)
    print("-" * len(header))
    print(f"total params: {report.total_params:,} ({report.total_params / 1e6:.3f}M)")
    print(f"total flops:  {report.total_flops:,} ({report.total_flops / 1e9:.3f}G)")
    return EXIT_OK


def cmd_roundtrip(args) -> int:
    if args.scenes < 1:
        raise FormatError("--scenes must be >= 1")
    cfg = DecodeConfig()
    matched_px = 0
    total_px = 0
    count_ok = 0
    for i in range(args.scenes):
        spec = synth.random_scene_spec(args.seed + i)
        agreement, n_gt, n_dec, n_fg = synth.roundtrip_scene(
            spec, cfg, sigma=args.noise, noise_seed=args.seed + i)
        matched_px += int(round(agreement * n_fg))
        total_px += n_fg
        count_ok += int(n_gt == n_dec)
        print(f"scene {i:04d} seed={spec.seed} lanes={n_gt} decoded={n_dec} "
              f"agreement={agreement:.4f}")
    pooled = matched_px / total_px if total_px else 1.0
    print(f"aggregate: scenes={args.scenes} exact-lane-count={count_ok}/{args.scenes} "
          f"agreement={pooled:.4f} noise={args.noise}")
    if args.noise == 0 and pooled < 0.99:
        print("roundtrip: aggregate agreement below 0.99", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = synth.SceneSpec(
        lane_count=args.lanes,
        curvature=(-args.curvature, args.curvature),
        spacing=args.spacing, width=args.width,
        merge_split=args.merge_split, seed=args.seed,
    )
    mask, ann = synth.generate(spec)
    af = encode_affinities(mask)
    os.makedirs(args.out, exist_ok=True)
    T.save_tensor(os.path.join(args.out, "mask.aft"), mask.astype(np.float32))
    T.save_tensor(os.path.join(args.out, "haf.aft"), af.haf)
    T.save_tensor(os.path.join(args.out, "vaf.aft"), af.vaf)
    T.atomic_write_bytes(os.path.join(args.out, "label.json"),
                         (dataset.serialize_annotation(ann) + "\n").encode())
    _write_manifest(args.out, "synth",
                    {"lanes": args.lanes, "curvature": args.curvature,
                     "spacing": args.spacing, "width": args.width,
                     "merge_split": args.merge_split, "seed": args.seed},
                    [], [os.path.join(args.out, n)
                         for n in ("mask.aft", "haf.aft", "vaf.aft", "label.json")])
    print(f"wrote scene with {int(mask.max())} lanes -> {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    spec = arch.build_enet21(shared_heads=args.shared_heads)
    if args.weights:
        store = arch.load_weights(args.weights)
    elif args.random_init:
        store = arch.random_weights(spec, seed=args.seed)
    else:
        raise FormatError("either --weights or --random-init is required")
    if not os.path.exists(args.image):
        raise FormatError(f"image file not found: {args.image}")
    image = T.load_tensor(args.image)
    if image.ndim == 3:
        image = image[None]
    seg_logits, haf, vaf = arch.forward(spec, store, image, mode="infer")
    seg_prob = T.sigmoid(seg_logits)
    os.makedirs(args.out, exist_ok=True)
    files = {
        "seg.aft": seg_prob[0],
        "seg_logits.aft": seg_logits[0],
        "haf.aft": haf[0],
        "vaf.aft": vaf[0],
    }
    for name, arr in files.items():
        T.save_tensor(os.path.join(args.out, name), arr)
    outputs = [os.path.join(args.out, n) for n in files]
    if args.decode:
        cfg = DecodeConfig(fg_threshold=args.fg_thresh, assoc_threshold=args.assoc_thresh)
        result = decode(seg_prob[0, 0], AffinityPair(haf[0, 0], vaf[0]), cfg)
        lanes_path = os.path.join(args.out, "lanes.json")
        T.atomic_write_bytes(lanes_path, (result.to_json() + "\n").encode())
        outputs.append(lanes_path)
        print(f"decoded {len(result.lanes)} lanes")
    _write_manifest(args.out, "infer",
                    {"weights": args.weights, "random_init": args.random_init,
                     "seed": args.seed, "shared_heads": args.shared_heads,
                     "decode": args.decode},
                    [p for p in (args.weights, args.image) if p], outputs)
    return EXIT_OK


def cmd_loss(args) -> int:
    logits_path = os.path.join(args.pred, "seg_logits.aft")
    if not os.path.exists(logits_path):
        # fall back to probabilities and invert the sigmoid
        probs = np.clip(_load_map(os.path.join(args.pred, "seg.aft"), 1), 1e-6, 1 - 1e-6)
        seg_logits = np.log(probs / (1 - probs))
    else:
        seg_logits = _load_map(logits_path, 1)
    pred_haf = _load_map(os.path.join(args.pred, "haf.aft"), 1)
    pred_vaf = _load_map(os.path.join(args.pred, "vaf.aft"), 2)
    mask = _load_map(os.path.join(args.gt, "mask.aft"), 1)
    gt = AffinityPair(_load_map(os.path.join(args.gt, "haf.aft"), 1),
                      _load_map(os.path.join(args.gt, "vaf.aft"), 2))
    target = (mask > 0).astype(np.float64)
    breakdown = total_loss(seg_logits, pred_haf, pred_vaf, target, gt, w=args.weight)
    _emit({"version": __version__,
           "config": {"pred": args.pred, "gt": args.gt, "weight": args.weight},
           "wbce": breakdown.wbce, "iou": breakdown.iou,
           "af": breakdown.af, "total": breakdown.total})
    return EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lanecli",
                                description="lane affinity-field toolkit")
    p.add_argument("--version", action="version", version=f"lanecli {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    enc = sub.add_parser("encode", help="rasterize labels and emit GT field maps")
    enc.add_argument("--labels", required=True)
    enc.add_argument("--out", required=True)
    enc.add_argument("--thickness", type=int, default=2)
    enc.add_argument("--res", default="160x88")
    enc.add_argument("--jobs", type=int, default=None)
    enc.set_defaults(func=cmd_encode)

    dec = sub.add_parser("decode", help="cluster seg+field maps into lane instances")
    dec.add_argument("--seg", required=True)
    dec.add_argument("--haf", required=True)
    dec.add_argument("--vaf", required=True)
    dec.add_argument("--out", required=True)
    dec.add_argument("--fg-thresh", type=float, default=_DECODE_DEFAULTS.fg_threshold)
    dec.add_argument("--assoc-thresh", type=float, default=_DECODE_DEFAULTS.assoc_threshold)
    dec.add_argument("--min-cluster-size", type=int, default=_DECODE_DEFAULTS.min_cluster_size)
    dec.add_argument("--min-lane-rows", type=int, default=_DECODE_DEFAULTS.min_lane_rows)
    dec.set_defaults(func=cmd_decode)

    ev = sub.add_parser("eval", help="score predictions against ground truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--px-thresh", type=float, default=_EVAL_DEFAULTS.px_threshold)
    ev.add_argument("--lane-thresh", type=float, default=_EVAL_DEFAULTS.lane_match_threshold)
    ev.add_argument("--table", action="store_true",
                    help="aligned text row instead of JSON")
    ev.add_argument("--out", default=None)
    ev.set_defaults(func=cmd_eval)

    ar = sub.add_parser("arch", help="network shape/param/FLOP report")
    ar.add_argument("--input", default="640x352")
    ar.add_argument("--shared-heads", action="store_true")
    ar.add_argument("--report", default="shapes,params,flops")
    ar.add_argument("--format", choices=("table", "json"), default="table")
    ar.set_defaults(func=cmd_arch)

    rt = sub.add_parser("roundtrip", help="encode/decode identity over synthetic scenes")
    rt.add_argument("--scenes", type=int, default=100)
    rt.add_argument("--seed", type=int, default=0)
    rt.add_argument("--noise", type=float, default=0.0)
    rt.set_defaults(func=cmd_roundtrip)

    sy = sub.add_parser("synth", help="write one synthetic scene directory")
    sy.add_argument("--out", required=True)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--lanes", type=int, default=4)
    sy.add_argument("--curvature", type=float, default=2.2e-4)
    sy.add_argument("--spacing", type=float, default=18.0)
    sy.add_argument("--width", type=int, default=2)
    sy.add_argument("--merge-split", action="store_true")
    sy.set_defaults(func=cmd_synth)

    inf = sub.add_parser("infer", help="forward pass over an image tensor")
    inf.add_argument("--weights", default=None)
    inf.add_argument("--random-init", action="store_true")
    inf.add_argument("--seed", type=int, default=0)
    inf.add_argument("--shared-heads", action="store_true")
    inf.add_argument("--image", required=True)
    inf.add_argument("--out", required=True)
    inf.add_argument("--decode", action="store_true")
    inf.add_argument("--fg-thresh", type=float, default=_DECODE_DEFAULTS.fg_threshold)
    inf.add_argument("--assoc-thresh", type=float, default=_DECODE_DEFAULTS.assoc_threshold)
    inf.set_defaults(func=cmd_infer)

    lo = sub.add_parser("loss", help="loss breakdown between map directories")
    lo.add_argument("--pred", required=True)
    lo.add_argument("--gt", required=True)
    lo.add_argument("--weight", type=float, default=None)
    lo.set_defaults(func=cmd_loss)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FormatError, CodecError, ShapeError, OSError, ValueError) as e:
        print(f"lanecli {args.command}: error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except EvalError as e:
        print(f"lanecli {args.command}: evaluation error: {e}", file=sys.stderr)
        return EXIT_EVAL
    except (IntegrityError, SceneError) as e:
        print(f"lanecli {args.command}: invariant violation: {e}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
