"""Attention-gated encoder-decoder for binary segmentation.

A reduced-scale U-Net family model: conv blocks with per-sample
normalization (single-group norm, stateless on purpose: running
statistics would leak across episodic adaptation steps), max-pool
downsampling, nearest-neighbour + conv upsampling (transposed conv
available via config), and additive attention gates on the skip paths.

The model itself is immutable; ``forward`` is a pure function of a
parameter set, which is what the meta-learning machinery needs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields, replace

import numpy as np

from .autodiff import Tensor, constant, ops
from .params import ParamVector, Segment, constant_tensors

_NORM_EPS = 1e-5


@dataclass(frozen=True)
class AttnUNetConfig:
    input_size: int = 32
    base_channels: int = 8
    depth: int = 3
    attention_gates: bool = True
    in_channels: int = 1
    upsample: str = "nearest"   # "nearest" | "transposed"
    norm: str = "group"         # "group" | "none"
    seed: int = 0

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.input_size % (1 << self.depth) != 0:
            raise ValueError(
                f"input_size {self.input_size} not divisible by 2^depth = {1 << self.depth}"
            )
        if self.upsample not in ("nearest", "transposed"):
            raise ValueError(f"unknown upsample mode {self.upsample!r}")
        if self.norm not in ("group", "none"):
            raise ValueError(f"unknown norm mode {self.norm!r}")

    def canonical_text(self) -> str:
        items = sorted((f.name, getattr(self, f.name)) for f in fields(self))
        return "\n".join(f"{k}={v}" for k, v in items)

    @classmethod
    def from_text(cls, text: str) -> "AttnUNetConfig":
        kwargs = {}
        casts = {f.name: f.type for f in fields(cls)}
        for line in text.strip().splitlines():
            k, _, v = line.partition("=")
            if k not in casts:
                raise ValueError(f"unknown model config key {k!r}")
            if casts[k] == "int":
                kwargs[k] = int(v)
            elif casts[k] == "bool":
                kwargs[k] = v == "True"
            else:
                kwargs[k] = v
        return cls(**kwargs)


class SegModel:
    """Config plus an initial parameter vector; layout is config-determined."""

    def __init__(self, config: AttnUNetConfig, params: ParamVector):
        self.config = config
        self.params = params

    @property
    def segments(self):
        return self.params.segments


def _layout(cfg: AttnUNetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) table; a pure function of the config."""
    enc_ch = [cfg.base_channels << i for i in range(cfg.depth)]
    bot_ch = cfg.base_channels << cfg.depth
    out: list[tuple[str, tuple[int, ...]]] = []

    def conv_block(prefix: str, cin: int, cout: int):
        out.append((f"{prefix}.conv1.w", (3, 3, cin, cout)))
        out.append((f"{prefix}.conv1.b", (cout,)))
        if cfg.norm == "group":
            out.append((f"{prefix}.norm1.g", (cout,)))
            out.append((f"{prefix}.norm1.b", (cout,)))
        out.append((f"{prefix}.conv2.w", (3, 3, cout, cout)))
        out.append((f"{prefix}.conv2.b", (cout,)))
        if cfg.norm == "group":
            out.append((f"{prefix}.norm2.g", (cout,)))
            out.append((f"{prefix}.norm2.b", (cout,)))

    cin = cfg.in_channels
    for i, ch in enumerate(enc_ch):
        conv_block(f"enc{i}", cin, ch)
        cin = ch
    conv_block("bottleneck", enc_ch[-1], bot_ch)

    cur = bot_ch
    for i in reversed(range(cfg.depth)):
        skip = enc_ch[i]
        if cfg.attention_gates:
            f_int = max(1, skip // 2)
            out.append((f"att{i}.wx.w", (1, 1, skip, f_int)))
            out.append((f"att{i}.wx.b", (f_int,)))
            out.append((f"att{i}.wg.w", (1, 1, cur, f_int)))
            out.append((f"att{i}.wg.b", (f_int,)))
            out.append((f"att{i}.psi.w", (1, 1, f_int, 1)))
            out.append((f"att{i}.psi.b", (1,)))
        if cfg.upsample == "nearest":
            out.append((f"up{i}.conv.w", (3, 3, cur, skip)))
        else:
            out.append((f"up{i}.conv.w", (2, 2, skip, cur)))
        out.append((f"up{i}.conv.b", (skip,)))
        if cfg.norm == "group":
            out.append((f"up{i}.norm.g", (skip,)))
            out.append((f"up{i}.norm.b", (skip,)))
        conv_block(f"dec{i}", 2 * skip, skip)
        cur = skip
    out.append(("head.w", (1, 1, enc_ch[0], 1)))
    out.append(("head.b", (1,)))
    return out


def init(config: AttnUNetConfig) -> SegModel:
    """He-uniform conv weights, zero biases, unit norm scales; per-seed deterministic."""
    rng = np.random.default_rng(config.seed)
    arrays = []
    for name, shape in _layout(config):
        if name.endswith(".w") and len(shape) == 4:
            if config.upsample == "transposed" and name.startswith("up"):
                fan_in = shape[0] * shape[1] * shape[3]   # (kh,kw,Cout,Cin)
            else:
                fan_in = shape[0] * shape[1] * shape[2]   # (kh,kw,Cin,Cout)
            bound = np.sqrt(6.0 / fan_in)
            arrays.append((name, rng.uniform(-bound, bound, size=shape)))
        elif name.endswith("norm1.g") or name.endswith("norm2.g") or name.endswith("norm.g"):
            arrays.append((name, np.ones(shape)))
        else:
            arrays.append((name, np.zeros(shape)))
    return SegModel(config, ParamVector.from_arrays(arrays))


def parameter_count(config: AttnUNetConfig) -> int:
    return int(sum(np.prod(s, dtype=np.int64) for _, s in _layout(config)))


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def _group_norm1(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    # per-sample normalization over all of (H,W,C); no running statistics
    b, h, w, c = x.shape
    n = h * w * c
    mu = ops.mul(ops.sum_axes(x, (1, 2, 3)), 1.0 / n)
    xc = ops.sub(x, ops.broadcast_axes(mu, x.shape))
    var = ops.mul(ops.sum_axes(ops.mul(xc, xc), (1, 2, 3)), 1.0 / n)
    inv = ops.div(1.0, ops.sqrt(ops.add(var, _NORM_EPS)))
    y = ops.mul(xc, ops.broadcast_axes(inv, x.shape))
    g = ops.broadcast_axes(ops.reshape(gamma, (1, 1, 1, c)), x.shape)
    bb = ops.broadcast_axes(ops.reshape(beta, (1, 1, 1, c)), x.shape)
    return ops.add(ops.mul(y, g), bb)


def _conv_block(x: Tensor, p, prefix: str, cfg: AttnUNetConfig) -> Tensor:
    for stage in ("1", "2"):
        x = ops.conv2d(x, p[f"{prefix}.conv{stage}.w"], p[f"{prefix}.conv{stage}.b"], 1, 1)
        if cfg.norm == "group":
            x = _group_norm1(x, p[f"{prefix}.norm{stage}.g"], p[f"{prefix}.norm{stage}.b"])
        x = ops.relu(x)
    return x


def attention_gate(
    skip: Tensor,
    gating: Tensor,
    wx: Tensor,
    bx: Tensor,
    wg: Tensor,
    bg: Tensor,
    wpsi: Tensor,
    bpsi: Tensor,
) -> tuple[Tensor, Tensor]:
    """Scale ``skip`` by additive-attention coefficients.

    Channels-last (B,H,W,C).  ``gating`` must sit at half the spatial
    resolution of ``skip``; the coefficient map
    alpha = sigmoid(psi(relu(Wx*skip_down + Wg*gating))) is computed
    there and upsampled back.  Returns (gated skip, alpha).
    """
    if skip.shape[3] != wx.shape[2]:
        raise ValueError(
            f"attention_gate: skip has {skip.shape[3]} channels, Wx expects {wx.shape[2]}"
        )
    if gating.shape[3] != wg.shape[2]:
        raise ValueError(
            f"attention_gate: gating has {gating.shape[3]} channels, Wg expects {wg.shape[2]}"
        )
    if (skip.shape[1], skip.shape[2]) != (2 * gating.shape[1], 2 * gating.shape[2]):
        raise ValueError(
            f"attention_gate: gating {gating.shape} is not half the resolution of skip {skip.shape}"
        )
    sd = ops.conv2d(skip, wx, bx, stride=2)
    gd = ops.conv2d(gating, wg, bg, stride=1)
    alpha = ops.sigmoid(ops.conv2d(ops.relu(ops.add(sd, gd)), wpsi, bpsi))
    gated = ops.mul(skip, ops.broadcast_axes(ops.upsample2x(alpha), skip.shape))
    return gated, alpha


def forward(model: SegModel, params, images, collect_gates: list | None = None) -> Tensor:
    """Per-pixel foreground probabilities, shape (B,C,H,W) like the input.

    ``params`` is either a ParamVector with this model's layout or a dict
    of segment-named tensors (the tape-world form used for adaptation).
    The public interface is channels-first; compute happens channels-last.
    """
    cfg = model.config
    if isinstance(params, ParamVector):
        model.params.check_layout(params, "forward")
        p = constant_tensors(params)
    else:
        p = params
        missing = [s.name for s in model.segments if s.name not in p]
        if missing:
            raise ValueError(f"forward: missing parameter tensors {missing[:3]}...")
    x = images if isinstance(images, Tensor) else constant(np.asarray(images, dtype=np.float64))
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(
            f"forward: expected (B,{cfg.in_channels},{cfg.input_size},{cfg.input_size}), got {x.shape}"
        )
    if x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
        raise ValueError(
            f"forward: spatial size {x.shape[2:]} != configured {cfg.input_size}"
        )
    x = ops.permute(x, (0, 2, 3, 1))

    skips = []
    for i in range(cfg.depth):
        x = _conv_block(x, p, f"enc{i}", cfg)
        skips.append(x)
        x = ops.maxpool2x2(x)
    x = _conv_block(x, p, "bottleneck", cfg)

    for i in reversed(range(cfg.depth)):
        skip = skips[i]
        if cfg.attention_gates:
            skip, alpha = attention_gate(
                skip, x,
                p[f"att{i}.wx.w"], p[f"att{i}.wx.b"],
                p[f"att{i}.wg.w"], p[f"att{i}.wg.b"],
                p[f"att{i}.psi.w"], p[f"att{i}.psi.b"],
            )
            if collect_gates is not None:
                collect_gates.append(alpha)
        if cfg.upsample == "nearest":
            up = ops.conv2d(ops.upsample2x(x), p[f"up{i}.conv.w"], p[f"up{i}.conv.b"], 1, 1)
        else:
            up = ops.conv_transpose2d(x, p[f"up{i}.conv.w"], p[f"up{i}.conv.b"], 2)
        if cfg.norm == "group":
            up = _group_norm1(up, p[f"up{i}.norm.g"], p[f"up{i}.norm.b"])
        up = ops.relu(up)
        x = _conv_block(ops.concat([skip, up], 3), p, f"dec{i}", cfg)

    out = ops.sigmoid(ops.conv2d(x, p["head.w"], p["head.b"]))
    return ops.permute(out, (0, 3, 1, 2))


def predict(model: SegModel, params: ParamVector, images: np.ndarray) -> np.ndarray:
    """Inference-only probabilities as a plain array (nothing recorded)."""
    return forward(model, params, images).data


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
# magic, then two length-prefixed utf-8 blobs (config text, segment table),
# then raw little-endian float64 in table order.  The table has one line
# per segment: "<vector> <segment> <offset> <d0>x<d1>x..." .

CHECKPOINT_MAGIC = b"IMAMLCK1"


def save_checkpoint(path, config_text: str, vectors: dict[str, ParamVector]) -> None:
    table_lines = []
    blobs = []
    for vec_name, pv in vectors.items():
        for seg in pv.segments:
            dims = "x".join(str(d) for d in seg.shape) if seg.shape else "scalar"
            table_lines.append(f"{vec_name} {seg.name} {seg.offset} {dims}")
        blobs.append(np.ascontiguousarray(pv.data, dtype="<f8"))
    table = "\n".join(table_lines).encode()
    cfg = config_text.encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        f.write(struct.pack("<I", len(table)))
        f.write(table)
        for blob in blobs:
            f.write(blob.tobytes())


def load_checkpoint(path) -> tuple[str, dict[str, ParamVector]]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
        (n,) = struct.unpack("<I", f.read(4))
        config_text = f.read(n).decode()
        (n,) = struct.unpack("<I", f.read(4))
        table = f.read(n).decode()
        raw = f.read()
    per_vector: dict[str, list[Segment]] = {}
    for line in table.splitlines():
        vec_name, seg_name, offset, dims = line.split(" ")
        shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
        per_vector.setdefault(vec_name, []).append(Segment(seg_name, shape, int(offset)))
    vectors: dict[str, ParamVector] = {}
    pos = 0
    for vec_name, segs in per_vector.items():
        size = sum(s.size for s in segs)
        data = np.frombuffer(raw, dtype="<f8", count=size, offset=pos * 8).astype(np.float64)
        vectors[vec_name] = ParamVector(tuple(segs), data)
        pos += size
    return config_text, vectors


def save_model(path, model: SegModel) -> None:
    save_checkpoint(path, model.config.canonical_text(), {"theta": model.params})


def load_model(path) -> SegModel:
    config_text, vectors = load_checkpoint(path)
    config = AttnUNetConfig.from_text(config_text)
    model = init(config)
    theta = vectors["theta"]
    model.params.check_layout(theta, "load_model")
    return SegModel(config, theta)


def with_params(model: SegModel, params: ParamVector) -> SegModel:
    model.params.check_layout(params, "with_params")
    return SegModel(model.config, params)


def reseeded(model: SegModel, seed: int) -> SegModel:
    return init(replace(model.config, seed=seed))
