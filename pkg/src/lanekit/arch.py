"""Declarative 21-layer encoder/decoder network with shape/param/FLOP ledger.

The network is an ENet-style bottleneck stack: an initial block (stride-2
conv concatenated with a 2x2 max pool of the input), an encoder of three
bottleneck stages with dilations up to 16, a decoder stage that unpools with
the encoder's pooling indices, and three parallel output heads (binary
segmentation, horizontal field, vertical field).  No convolution carries a
bias term.

Everything downstream of :func:`build_enet21` (shape tracing, parameter and
FLOP accounting, the forward pass, weight initialization and the weight-file
layout) is derived from one per-layer plan so the ledgers cannot drift from
the executed graph.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import FormatError, ShapeError

WEIGHTS_MAGIC = b"AFW1"

HEAD_CHANNELS = {"seg": 1, "haf": 1, "vaf": 2}
DROPOUT_P = 0.2


@dataclass(frozen=True)
class LayerSpec:
    id: int                      # table-row ordinal, 1..21
    name: str                    # e.g. "bottleneck2.3"
    kind: str                    # "initial" | "bottleneck" | "conv1x1"
    variant: str                 # "plain" | "downsampling" | "upsampling" | "dilated"
    out_channels: int
    dilation: int = 1


@dataclass(frozen=True)
class HeadSpec:
    name: str
    layers: tuple[LayerSpec, ...]


@dataclass(frozen=True)
class ArchSpec:
    layers: tuple[LayerSpec, ...]      # trunk rows 1..18
    heads: tuple[HeadSpec, ...]        # rows 19..21, one branch per output
    projection_ratio: int = 4
    shared_heads: bool = False


@dataclass(frozen=True)
class ConvSlot:
    """One convolution unit inside a block, with its normalization flags."""

    name: str
    op: str                      # "conv" | "tconv"
    in_ch: int
    out_ch: int
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dilation: tuple[int, int] = (1, 1)
    bn: bool = True
    act: bool = True             # PReLU after the BN


@dataclass(frozen=True)
class BlockPlan:
    layer: LayerSpec
    in_ch: int
    ext: tuple[ConvSlot, ...]
    main_conv: ConvSlot | None = None   # skip-branch 1x1 conv (upsampling only)
    pool: str | None = None             # "down" | "up" | "initial"
    zero_pad_to: int | None = None
    post_act: bool = True               # PReLU after the residual add
    post_bn: bool = False               # initial block normalizes after concat
    dropout: bool = True


@dataclass
class LayerReport:
    id: int
    name: str
    head: str | None
    output_dims: tuple[int, int, int] | None   # (C, H, W)
    params: int
    flops: int


@dataclass
class ArchReport:
    per_layer: list[LayerReport] = field(default_factory=list)
    total_params: int = 0
    total_flops: int = 0
    input_dims: tuple[int, int, int] | None = None


def build_enet21(projection_ratio: int = 4, shared_heads: bool = False) -> ArchSpec:
    """The 21-row lane network: 18 trunk rows plus three 3-row heads."""
    rows: list[LayerSpec] = [LayerSpec(1, "initial", "initial", "plain", 16)]

    def bn(i, name, variant, ch, dil=1):
        rows.append(LayerSpec(i, name, "bottleneck", variant, ch, dil))

    bn(2, "bottleneck1.0", "downsampling", 64)
    bn(3, "bottleneck1.1", "dilated", 64, 2)
    bn(4, "bottleneck1.2", "dilated", 64, 4)
    bn(5, "bottleneck2.0", "downsampling", 128)
    bn(6, "bottleneck2.1", "plain", 128)
    bn(7, "bottleneck2.2", "dilated", 128, 2)
    bn(8, "bottleneck2.3", "dilated", 128, 4)
    bn(9, "bottleneck2.4", "dilated", 128, 8)
    bn(10, "bottleneck2.5", "dilated", 128, 16)
    # stage 3 repeats stage 2 without the leading downsampler
    bn(11, "bottleneck3.1", "plain", 128)
    bn(12, "bottleneck3.2", "dilated", 128, 2)
    bn(13, "bottleneck3.3", "dilated", 128, 4)
    bn(14, "bottleneck3.4", "dilated", 128, 8)
    bn(15, "bottleneck3.5", "dilated", 128, 16)
    bn(16, "bottleneck4.0", "upsampling", 64)
    bn(17, "bottleneck4.1", "plain", 64)
    bn(18, "bottleneck4.2", "plain", 64)

    heads = []
    for hname, c_out in HEAD_CHANNELS.items():
        prefix = "head" if shared_heads else f"head.{hname}"
        heads.append(
            HeadSpec(
                hname,
                (
                    LayerSpec(19, f"{prefix}.bottleneck5.0", "bottleneck", "plain", 64),
                    LayerSpec(20, f"{prefix}.bottleneck5.1", "bottleneck", "plain", 64),
                    LayerSpec(21, f"{prefix}.{hname}.conv", "conv1x1", "plain", c_out),
                ),
            )
        )
    return ArchSpec(tuple(rows), tuple(heads), projection_ratio, shared_heads)


def plan_block(layer: LayerSpec, in_ch: int, projection_ratio: int) -> BlockPlan:
    """Expand one table row into its conv slots and branch structure."""
    out = layer.out_channels
    nm = layer.name
    if layer.kind == "initial":
        slot = ConvSlot(f"{nm}.conv", "conv", in_ch, out - in_ch, (3, 3),
                        stride=(2, 2), padding=(1, 1), bn=False, act=False)
        return BlockPlan(layer, in_ch, (slot,), pool="initial",
                         post_act=True, post_bn=True, dropout=False)
    if layer.kind == "conv1x1":
        slot = ConvSlot(nm, "conv", in_ch, out, (1, 1), bn=False, act=False)
        return BlockPlan(layer, in_ch, (slot,), post_act=False, dropout=False)

    mid = max(1, out // projection_ratio)
    d = layer.dilation
    if layer.variant == "downsampling":
        ext = (
            ConvSlot(f"{nm}.proj", "conv", in_ch, mid, (2, 2), stride=(2, 2)),
            ConvSlot(f"{nm}.main", "conv", mid, mid, (3, 3), padding=(1, 1)),
            ConvSlot(f"{nm}.expand", "conv", mid, out, (1, 1), act=False),
        )
        return BlockPlan(layer, in_ch, ext, pool="down", zero_pad_to=out)
    if layer.variant == "upsampling":
        ext = (
            ConvSlot(f"{nm}.proj", "conv", in_ch, mid, (1, 1)),
            ConvSlot(f"{nm}.main", "tconv", mid, mid, (2, 2), stride=(2, 2)),
            ConvSlot(f"{nm}.expand", "conv", mid, out, (1, 1), act=False),
        )
        skip = ConvSlot(f"{nm}.skip", "conv", in_ch, out, (1, 1), act=False)
        return BlockPlan(layer, in_ch, ext, main_conv=skip, pool="up")
    ext = (
        ConvSlot(f"{nm}.proj", "conv", in_ch, mid, (1, 1)),
        ConvSlot(f"{nm}.main", "conv", mid, mid, (3, 3), padding=(d, d), dilation=(d, d)),
        ConvSlot(f"{nm}.expand", "conv", mid, out, (1, 1), act=False),
    )
    return BlockPlan(layer, in_ch, ext)


def iter_plans(spec: ArchSpec):
    """Yield (plan, head_name_or_None) in execution order.

    With shared heads, rows 19-20 are yielded once (head=None) followed by
    the three per-head 1x1 convs.
    """
    ch = 3
    for layer in spec.layers:
        plan = plan_block(layer, ch, spec.projection_ratio)
        yield plan, None
        ch = layer.out_channels
    trunk_ch = ch
    if spec.shared_heads:
        shared = spec.heads[0].layers[:2]
        ch = trunk_ch
        for layer in shared:
            yield plan_block(layer, ch, spec.projection_ratio), None
            ch = layer.out_channels
        for head in spec.heads:
            yield plan_block(head.layers[2], ch, spec.projection_ratio), head.name
    else:
        for head in spec.heads:
            ch = trunk_ch
            for layer in head.layers:
                yield plan_block(layer, ch, spec.projection_ratio), head.name
                ch = layer.out_channels


def _block_out_hw(plan: BlockPlan, hw: tuple[int, int]) -> tuple[int, int]:
    h, w = hw
    if plan.pool in ("initial", "down"):
        return h // 2, w // 2
    if plan.pool == "up":
        return h * 2, w * 2
    return h, w


def shape_trace(spec: ArchSpec, input_dims: tuple[int, int, int]) -> list[LayerReport]:
    """Per-row output dims for a (3, H, W) input; H and W must be /8."""
    c, h, w = input_dims
    if c != 3:
        raise ShapeError(f"expected 3 input channels, got {c}")
    if h % 8 or w % 8:
        raise ShapeError(f"input {h}x{w} not divisible by 8")
    rows: list[LayerReport] = []
    hw_by_head: dict[str | None, tuple[int, int]] = {None: (h, w)}
    for plan, head in iter_plans(spec):
        hw = hw_by_head.get(head) or hw_by_head[None]
        hw = _block_out_hw(plan, hw)
        hw_by_head[head] = hw
        if head is None:
            hw_by_head[None] = hw
        rows.append(LayerReport(plan.layer.id, plan.layer.name, head,
                                (plan.layer.out_channels, hw[0], hw[1]), 0, 0))
    return rows


def _slot_params(slot: ConvSlot) -> int:
    kh, kw = slot.kernel
    p = slot.in_ch * slot.out_ch * kh * kw
    if slot.bn:
        p += 2 * slot.out_ch
    if slot.act:
        p += slot.out_ch
    return p


def _plan_params(plan: BlockPlan) -> int:
    p = sum(_slot_params(s) for s in plan.ext)
    if plan.main_conv is not None:
        p += _slot_params(plan.main_conv)
    out = plan.layer.out_channels
    if plan.post_bn:
        p += 2 * out
    if plan.post_act:
        p += out
    return p


def count_params(spec: ArchSpec) -> ArchReport:
    """Parameter ledger: conv kernels plus batchnorm scale/shift and PReLU slopes."""
    report = ArchReport()
    for plan, head in iter_plans(spec):
        p = _plan_params(plan)
        report.per_layer.append(LayerReport(plan.layer.id, plan.layer.name, head, None, p, 0))
        report.total_params += p
    return report


def _slot_flops(slot: ConvSlot, in_hw, out_hw) -> int:
    kh, kw = slot.kernel
    macs_per_site = slot.in_ch * slot.out_ch * kh * kw
    if slot.op == "conv":
        macs = macs_per_site * out_hw[0] * out_hw[1]
    else:  # transposed: one kernel application per input site
        macs = macs_per_site * in_hw[0] * in_hw[1]
    fl = 2 * macs
    elems = slot.out_ch * out_hw[0] * out_hw[1]
    if slot.bn:
        fl += 2 * elems
    if slot.act:
        fl += 2 * elems
    return fl


def _slot_out_hw(slot: ConvSlot, hw) -> tuple[int, int]:
    if slot.op == "conv":
        return T.conv_output_hw(hw, slot.kernel, slot.stride, slot.dilation, slot.padding)
    return T.transposed_output_hw(hw, slot.kernel, slot.stride, slot.dilation, slot.padding)


def _plan_flops(plan: BlockPlan, in_hw) -> tuple[int, tuple[int, int]]:
    fl = 0
    hw = in_hw
    for slot in plan.ext:
        out_hw = _slot_out_hw(slot, hw)
        fl += _slot_flops(slot, hw, out_hw)
        hw = out_hw
    out_ch = plan.layer.out_channels
    out_elems = out_ch * hw[0] * hw[1]
    if plan.pool in ("down", "initial"):
        # 3 comparisons per pooled output cell
        pooled_ch = plan.in_ch
        fl += 3 * pooled_ch * hw[0] * hw[1]
    if plan.main_conv is not None:
        skip_out = _slot_out_hw(plan.main_conv, in_hw)
        fl += _slot_flops(plan.main_conv, in_hw, skip_out)
    if plan.layer.kind == "bottleneck":
        fl += out_elems  # residual add
    if plan.post_bn:
        fl += 2 * out_elems
    if plan.post_act:
        fl += 2 * out_elems
    return fl, hw


def count_flops(spec: ArchSpec, input_dims: tuple[int, int, int]) -> ArchReport:
    """FLOP ledger at the given input size; convs count 2 FLOPs per MAC."""
    report = ArchReport(input_dims=input_dims)
    shapes = shape_trace(spec, input_dims)  # validates divisibility
    params = count_params(spec)
    h, w = input_dims[1], input_dims[2]
    hw_by_head: dict[str | None, tuple[int, int]] = {None: (h, w)}
    for (plan, head), shape_row, param_row in zip(iter_plans(spec), shapes, params.per_layer):
        hw = hw_by_head.get(head) or hw_by_head[None]
        fl, out_hw = _plan_flops(plan, hw)
        hw_by_head[head] = out_hw
        if head is None:
            hw_by_head[None] = out_hw
        report.per_layer.append(
            LayerReport(plan.layer.id, plan.layer.name, head,
                        shape_row.output_dims, param_row.params, fl)
        )
        report.total_flops += fl
        report.total_params += param_row.params
    return report


# --------------------------------------------------------------------------
# Weight store
# --------------------------------------------------------------------------

def weight_slots(spec: ArchSpec) -> dict[str, tuple[int, ...]]:
    """Every named parameter tensor and its expected dims."""
    slots: dict[str, tuple[int, ...]] = {}

    def add_slot(s: ConvSlot):
        kh, kw = s.kernel
        slots[f"{s.name}.kernel"] = (s.out_ch, s.in_ch, kh, kw)
        if s.bn:
            for part in ("gamma", "beta", "mean", "var"):
                slots[f"{s.name}.bn.{part}"] = (s.out_ch,)
        if s.act:
            slots[f"{s.name}.slope"] = (s.out_ch,)

    for plan, _head in iter_plans(spec):
        for s in plan.ext:
            add_slot(s)
        if plan.main_conv is not None:
            add_slot(plan.main_conv)
        out = plan.layer.out_channels
        nm = plan.layer.name
        if plan.post_bn:
            for part in ("gamma", "beta", "mean", "var"):
                slots[f"{nm}.bn.{part}"] = (out,)
        if plan.post_act:
            slots[f"{nm}.out.slope"] = (out,)
    return slots


def random_weights(spec: ArchSpec, seed: int = 0, scale: float = 0.1) -> dict[str, np.ndarray]:
    """Seeded uniform-noise weights for testing the forward path."""
    rng = np.random.default_rng(seed)
    store: dict[str, np.ndarray] = {}
    for name, dims in weight_slots(spec).items():
        if name.endswith(".kernel"):
            store[name] = rng.uniform(-scale, scale, dims).astype(np.float32)
        elif name.endswith(".gamma") or name.endswith(".var"):
            store[name] = rng.uniform(0.5, 1.5, dims).astype(np.float32)
        elif name.endswith(".slope"):
            store[name] = np.full(dims, T.PRELU_DEFAULT_SLOPE, dtype=np.float32)
        else:  # beta, mean
            store[name] = rng.uniform(-scale, scale, dims).astype(np.float32)
    return store


def zero_weights(spec: ArchSpec) -> dict[str, np.ndarray]:
    store = {}
    for name, dims in weight_slots(spec).items():
        if name.endswith(".gamma") or name.endswith(".var"):
            store[name] = np.ones(dims, dtype=np.float32)
        elif name.endswith(".slope"):
            store[name] = np.full(dims, T.PRELU_DEFAULT_SLOPE, dtype=np.float32)
        else:
            store[name] = np.zeros(dims, dtype=np.float32)
    return store


def validate_weights(spec: ArchSpec, store: dict[str, np.ndarray]) -> None:
    slots = weight_slots(spec)
    for name, dims in slots.items():
        if name not in store:
            raise ShapeError(f"weight store is missing slot {name!r}")
        got = tuple(store[name].shape)
        if got != dims:
            raise ShapeError(f"slot {name!r} has dims {got}, expected {dims}")
    extra = set(store) - set(slots)
    if extra:
        raise ShapeError(f"weight store has unknown tensors: {sorted(extra)[:4]}")


def save_weights(store: dict[str, np.ndarray], path: str) -> None:
    """AFW1 container: magic, u32 count, then (u16 name len, name, AFT1 blob)."""
    chunks = [WEIGHTS_MAGIC, struct.pack("<I", len(store))]
    for name in sorted(store):
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(T.tensor_to_bytes(store[name]))
    T.atomic_write_bytes(path, b"".join(chunks))


def load_weights(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"bad weight-file magic {blob[:4]!r}, expected {WEIGHTS_MAGIC!r}")
    if len(blob) < 8:
        raise FormatError("truncated weight file header")
    (count,) = struct.unpack_from("<I", blob, 4)
    off = 8
    store: dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(blob) < off + 2:
            raise FormatError("truncated entry header")
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        if len(blob) < off + nlen:
            raise FormatError("truncated entry name")
        try:
            name = blob[off : off + nlen].decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"undecodable tensor name at offset {off}") from e
        off += nlen
        arr, off = T.tensor_from_bytes(blob, off)
        store[name] = arr
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes after last entry")
    return store


# --------------------------------------------------------------------------
# Forward pass
# --------------------------------------------------------------------------

def _run_slot(x, slot: ConvSlot, store, mode):
    k = store[f"{slot.name}.kernel"]
    p = T.ConvParams(k, stride=slot.stride, dilation=slot.dilation, padding=slot.padding)
    x = T.conv2d(x, p) if slot.op == "conv" else T.transposed_conv2d(x, p)
    if slot.bn:
        x = T.batchnorm_infer(
            x, store[f"{slot.name}.bn.gamma"], store[f"{slot.name}.bn.beta"],
            store[f"{slot.name}.bn.mean"], store[f"{slot.name}.bn.var"],
        )
    if slot.act:
        x = T.prelu(x, store[f"{slot.name}.slope"])
    return x


def _run_block(x, plan: BlockPlan, store, mode, seed, pool_stack):
    nm = plan.layer.name
    if plan.pool == "initial":
        conv = _run_slot(x, plan.ext[0], store, mode)
        pooled, _ = T.maxpool2x2_with_indices(x)
        x = np.concatenate([conv, pooled], axis=1)
        x = T.batchnorm_infer(x, store[f"{nm}.bn.gamma"], store[f"{nm}.bn.beta"],
                              store[f"{nm}.bn.mean"], store[f"{nm}.bn.var"])
        return T.prelu(x, store[f"{nm}.out.slope"])
    if plan.layer.kind == "conv1x1":
        return _run_slot(x, plan.ext[0], store, mode)

    if plan.pool == "down":
        main, idx = T.maxpool2x2_with_indices(x)
        main = T.channel_zero_pad(main, plan.zero_pad_to)
        pool_stack.append((idx, x.shape[2:]))
    elif plan.pool == "up":
        idx, out_hw = pool_stack.pop()
        main = _run_slot(x, plan.main_conv, store, mode)
        main = T.max_unpool2x2(main, idx, out_hw)
    else:
        main = x

    ext = x
    for slot in plan.ext:
        ext = _run_slot(ext, slot, store, mode)
    if ext.shape != main.shape:
        raise ShapeError(
            f"{nm}: ext branch {tuple(ext.shape)} does not match main {tuple(main.shape)}"
        )
    out = T.prelu(main + ext, store[f"{nm}.out.slope"])
    if plan.dropout:
        out = T.spatial_dropout(out, DROPOUT_P, mode, rng_seed=seed + plan.layer.id)
    return out


def forward(spec: ArchSpec, store: dict[str, np.ndarray], image: np.ndarray,
            mode: str = "infer", seed: int = 0):
    """Run the network; returns (seg_logits, haf_map, vaf_map).

    image is (N, 3, H, W) with H, W divisible by 8.  Downsampling blocks
    push pooling indices that the matching upsampling block consumes.
    """
    validate_weights(spec, store)
    image = T.as_f32(image)
    if image.ndim == 3:
        image = image[None]
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"image must be (N,3,H,W), got {tuple(image.shape)}")
    if image.shape[2] % 8 or image.shape[3] % 8:
        raise ShapeError(f"image spatial dims {image.shape[2:]} not divisible by 8")

    pool_stack: list = []
    x = image
    trunk_plans = [plan_block(l, i, spec.projection_ratio)
                   for l, i in zip(spec.layers, [3] + [l.out_channels for l in spec.layers[:-1]])]
    for plan in trunk_plans:
        x = _run_block(x, plan, store, mode, seed, pool_stack)

    outputs = {}
    if spec.shared_heads:
        shared = x
        ch = spec.layers[-1].out_channels
        for layer in spec.heads[0].layers[:2]:
            shared = _run_block(shared, plan_block(layer, ch, spec.projection_ratio),
                                store, mode, seed, pool_stack)
            ch = layer.out_channels
        for head in spec.heads:
            outputs[head.name] = _run_block(
                shared, plan_block(head.layers[2], ch, spec.projection_ratio),
                store, mode, seed, pool_stack)
    else:
        for head in spec.heads:
            y = x
            ch = spec.layers[-1].out_channels
            for layer in head.layers:
                y = _run_block(y, plan_block(layer, ch, spec.projection_ratio),
                               store, mode, seed, pool_stack)
                ch = layer.out_channels
            outputs[head.name] = y
    return outputs["seg"], outputs["haf"], outputs["vaf"]
