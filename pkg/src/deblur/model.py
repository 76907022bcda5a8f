"""Four-level encoder-decoder assembly, parameter accounting and checkpoints.

A single parameter enumerator drives initialization, counting and the
checkpoint layout, so build(), param_count() and save()/load() can never
disagree about shapes or names.

Checkpoint format (little-endian):
    magic   8 bytes  b"DBLRCKPT"
    version u32      currently 1
    config  4 x u32  base_channels, in_channels, out_channels, refinement
            f64      gamma
            4 x u32  enc_blocks
            3 x u32  dec_blocks (levels 3, 2, 1)
            4 x u32  heads
    count   u32      number of tensors
    then, sorted by name: u16 name length, name utf-8, u8 ndim,
    ndim x u32 dims, raw float32 data.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .blocks import (
    BlockParams,
    GatedFeedForwardParams,
    ChannelAttentionParams,
    block_forward,
    downsample,
    ffn_hidden_width,
    upsample,
)
from .tensor import Tensor, TensorError, add, concat, conv_pw, conv3x3, no_grad

MAGIC = b"DBLRCKPT"
VERSION = 1
INIT_STD = 0.02


class CheckpointError(IOError):
    """Malformed, truncated or incompatible checkpoint file."""


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 48
    enc_blocks: tuple = (4, 6, 6, 8)   # levels 1..3 + latent
    dec_blocks: tuple = (6, 6, 4)      # levels 3, 2, 1
    heads: tuple = (1, 2, 4, 8)
    refinement_blocks: int = 4
    gamma: float = 2.66
    in_channels: int = 3
    out_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "enc_blocks", tuple(int(b) for b in self.enc_blocks))
        object.__setattr__(self, "dec_blocks", tuple(int(b) for b in self.dec_blocks))
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        if len(self.enc_blocks) != 4 or len(self.dec_blocks) != 3 or len(self.heads) != 4:
            raise ValueError("need 4 encoder block counts, 3 decoder, 4 head counts")
        counts = self.enc_blocks + self.dec_blocks + (self.refinement_blocks,)
        if any(c < 1 for c in counts):
            raise ValueError(f"all block counts must be >= 1, got {counts}")
        for lvl, h in enumerate(self.heads):
            if self.level_channels(lvl) % h:
                raise ValueError(
                    f"heads[{lvl}]={h} does not divide level channels "
                    f"{self.level_channels(lvl)}"
                )

    def level_channels(self, level):
        """Feature width at encoder level 0..3."""
        return self.base_channels * (1 << level)

    @property
    def total_blocks(self):
        return sum(self.enc_blocks) + sum(self.dec_blocks) + self.refinement_blocks


BASELINE_CONFIG = ModelConfig()

# Frozen result of search_reduced_config(BASELINE_CONFIG): 31 blocks (ratio
# 0.7045), parameter ratio 0.81590, heads doubled per stage.
IMPROVED_CONFIG = ModelConfig(
    enc_blocks=(3, 3, 6, 6),
    dec_blocks=(6, 3, 3),
    heads=(2, 4, 8, 16),
    refinement_blocks=1,
)

TOY_CONFIG = ModelConfig(
    base_channels=8,
    enc_blocks=(1, 1, 1, 1),
    dec_blocks=(1, 1, 1),
    heads=(1, 2, 4, 8),
    refinement_blocks=1,
)

NAMED_CONFIGS = {
    "baseline": BASELINE_CONFIG,
    "improved": IMPROVED_CONFIG,
    "toy": TOY_CONFIG,
}


# ---------------------------------------------------------------------------
# Parameter enumeration
# ---------------------------------------------------------------------------

def _block_param_specs(prefix, channels, heads, gamma):
    c = channels
    hidden = ffn_hidden_width(c, gamma)
    alpha0 = 1.0 / math.sqrt(c / heads)
    yield (f"{prefix}.norm1.weight", (c,), "ones")
    yield (f"{prefix}.norm1.bias", (c,), "zeros")
    yield (f"{prefix}.attn.qkv_pw.weight", (3 * c, c), "normal")
    yield (f"{prefix}.attn.qkv_pw.bias", (3 * c,), "zeros")
    yield (f"{prefix}.attn.qkv_dw.weight", (3 * c, 3, 3), "normal")
    yield (f"{prefix}.attn.qkv_dw.bias", (3 * c,), "zeros")
    yield (f"{prefix}.attn.proj.weight", (c, c), "normal")
    yield (f"{prefix}.attn.proj.bias", (c,), "zeros")
    yield (f"{prefix}.attn.alpha", (heads,), ("const", alpha0))
    yield (f"{prefix}.norm2.weight", (c,), "ones")
    yield (f"{prefix}.norm2.bias", (c,), "zeros")
    yield (f"{prefix}.ffn.expand.weight", (2 * hidden, c), "normal")
    yield (f"{prefix}.ffn.expand.bias", (2 * hidden,), "zeros")
    yield (f"{prefix}.ffn.dw.weight", (2 * hidden, 3, 3), "normal")
    yield (f"{prefix}.ffn.dw.bias", (2 * hidden,), "zeros")
    yield (f"{prefix}.ffn.project.weight", (c, hidden), "normal")
    yield (f"{prefix}.ffn.project.bias", (c,), "zeros")


def parameter_specs(config):
    """Yield (name, shape, init) for every learnable tensor, in build order."""
    cfg = config
    c = cfg.base_channels
    ch = [cfg.level_channels(i) for i in range(4)]

    yield ("embed.weight", (c, cfg.in_channels, 3, 3), "normal")
    yield ("embed.bias", (c,), "zeros")
    for lvl in range(3):
        for b in range(cfg.enc_blocks[lvl]):
            yield from _block_param_specs(f"enc{lvl + 1}.{b}", ch[lvl], cfg.heads[lvl], cfg.gamma)
        yield (f"down{lvl + 1}.weight", (ch[lvl] // 2, ch[lvl], 3, 3), "normal")
    for b in range(cfg.enc_blocks[3]):
        yield from _block_param_specs(f"latent.{b}", ch[3], cfg.heads[3], cfg.gamma)

    yield ("up4.weight", (2 * ch[3], ch[3], 3, 3), "normal")
    yield ("reduce3.weight", (ch[2], 2 * ch[2]), "normal")
    yield ("reduce3.bias", (ch[2],), "zeros")
    for b in range(cfg.dec_blocks[0]):
        yield from _block_param_specs(f"dec3.{b}", ch[2], cfg.heads[2], cfg.gamma)

    yield ("up3.weight", (2 * ch[2], ch[2], 3, 3), "normal")
    yield ("reduce2.weight", (ch[1], 2 * ch[1]), "normal")
    yield ("reduce2.bias", (ch[1],), "zeros")
    for b in range(cfg.dec_blocks[1]):
        yield from _block_param_specs(f"dec2.{b}", ch[1], cfg.heads[1], cfg.gamma)

    yield ("up2.weight", (2 * ch[1], ch[1], 3, 3), "normal")
    # top level: concat without channel reduction, decoder runs at 2C
    for b in range(cfg.dec_blocks[2]):
        yield from _block_param_specs(f"dec1.{b}", 2 * ch[0], cfg.heads[0], cfg.gamma)
    for b in range(cfg.refinement_blocks):
        yield from _block_param_specs(f"refine.{b}", 2 * ch[0], cfg.heads[0], cfg.gamma)

    yield ("output.weight", (cfg.out_channels, 2 * ch[0], 3, 3), "normal")
    yield ("output.bias", (cfg.out_channels,), "zeros")


# ---------------------------------------------------------------------------
# ParamStore and initialization
# ---------------------------------------------------------------------------

class ParamStore:
    """Ordered name -> Tensor map of one model instance's learnables."""

    def __init__(self, config):
        self.config = config
        self._params = {}

    def register(self, name, tensor):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def total_params(self):
        return sum(t.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()


def _trunc_normal(rng, shape, std, dtype):
    """Normal(0, std) truncated at +-2 std, via rejection resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def build(config, seed=0, dtype=np.float32):
    """Deterministically initialize a ParamStore for `config`.

    Weights are truncated-normal(std 0.02), biases zero, norm weights one,
    attention temperatures 1/sqrt(head_dim). Same seed, same bits.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore(config)
    for name, shape, init in parameter_specs(config):
        if init == "normal":
            data = _trunc_normal(rng, shape, INIT_STD, dtype)
        elif init == "zeros":
            data = np.zeros(shape, dtype=dtype)
        elif init == "ones":
            data = np.ones(shape, dtype=dtype)
        else:  # ("const", value)
            data = np.full(shape, init[1], dtype=dtype)
        store.register(name, Tensor(data, requires_grad=True))
    return store


def _block_params(store, prefix, heads, hidden):
    return BlockParams(
        norm1_w=store[f"{prefix}.norm1.weight"],
        norm1_b=store[f"{prefix}.norm1.bias"],
        attn=ChannelAttentionParams(
            qkv_pw_w=store[f"{prefix}.attn.qkv_pw.weight"],
            qkv_pw_b=store[f"{prefix}.attn.qkv_pw.bias"],
            qkv_dw_w=store[f"{prefix}.attn.qkv_dw.weight"],
            qkv_dw_b=store[f"{prefix}.attn.qkv_dw.bias"],
            out_pw_w=store[f"{prefix}.attn.proj.weight"],
            out_pw_b=store[f"{prefix}.attn.proj.bias"],
            alpha=store[f"{prefix}.attn.alpha"],
            heads=heads,
        ),
        norm2_w=store[f"{prefix}.norm2.weight"],
        norm2_b=store[f"{prefix}.norm2.bias"],
        ffn=GatedFeedForwardParams(
            expand_pw_w=store[f"{prefix}.ffn.expand.weight"],
            expand_pw_b=store[f"{prefix}.ffn.expand.bias"],
            dw_w=store[f"{prefix}.ffn.dw.weight"],
            dw_b=store[f"{prefix}.ffn.dw.bias"],
            project_pw_w=store[f"{prefix}.ffn.project.weight"],
            project_pw_b=store[f"{prefix}.ffn.project.bias"],
            hidden=hidden,
        ),
    )


def _run_stage(store, x, stage, count, channels, heads, gamma):
    hidden = ffn_hidden_width(channels, gamma)
    for b in range(count):
        x = block_forward(x, _block_params(store, f"{stage}.{b}", heads, hidden))
    return x


def forward(params, img):
    """Restore: predict a residual and add it to the input.

    img: Tensor (N, 3, H, W) with H, W divisible by 8. Zeroing the output conv
    makes this the exact identity map.
    """
    cfg = params.config
    if img.ndim != 4 or img.shape[1] != cfg.in_channels:
        raise TensorError(f"expected (N, {cfg.in_channels}, H, W), got {img.shape}")
    n, _, h, w = img.shape
    if h % 8 or w % 8:
        raise TensorError(
            f"spatial dims {h}x{w} must be divisible by 8 "
            f"(pad by {(-h) % 8} rows, {(-w) % 8} cols)"
        )
    g = cfg.gamma

    x = conv3x3(img, params["embed.weight"], params["embed.bias"])
    e1 = _run_stage(params, x, "enc1", cfg.enc_blocks[0], cfg.level_channels(0), cfg.heads[0], g)
    x = downsample(e1, params["down1.weight"])
    e2 = _run_stage(params, x, "enc2", cfg.enc_blocks[1], cfg.level_channels(1), cfg.heads[1], g)
    x = downsample(e2, params["down2.weight"])
    e3 = _run_stage(params, x, "enc3", cfg.enc_blocks[2], cfg.level_channels(2), cfg.heads[2], g)
    x = downsample(e3, params["down3.weight"])
    x = _run_stage(params, x, "latent", cfg.enc_blocks[3], cfg.level_channels(3), cfg.heads[3], g)

    x = upsample(x, params["up4.weight"])
    x = concat([x, e3], axis=1)
    x = conv_pw(x, params["reduce3.weight"], params["reduce3.bias"])
    x = _run_stage(params, x, "dec3", cfg.dec_blocks[0], cfg.level_channels(2), cfg.heads[2], g)

    x = upsample(x, params["up3.weight"])
    x = concat([x, e2], axis=1)
    x = conv_pw(x, params["reduce2.weight"], params["reduce2.bias"])
    x = _run_stage(params, x, "dec2", cfg.dec_blocks[1], cfg.level_channels(1), cfg.heads[1], g)

    x = upsample(x, params["up2.weight"])
    x = concat([x, e1], axis=1)
    x = _run_stage(params, x, "dec1", cfg.dec_blocks[2], 2 * cfg.base_channels, cfg.heads[0], g)
    x = _run_stage(params, x, "refine", cfg.refinement_blocks, 2 * cfg.base_channels, cfg.heads[0], g)

    residual = conv3x3(x, params["output.weight"], params["output.bias"])
    return add(img, residual)


def restore(params, img_np):
    """Inference on one image array (3, H, W): reflect-pad to a multiple of 8,
    run the model without recording gradients, crop back."""
    c, h, w = img_np.shape
    ph, pw = (-h) % 8, (-w) % 8
    if (ph and ph >= h) or (pw and pw >= w):
        raise TensorError(f"image {h}x{w} too small to reflect-pad for the 8x pyramid")
    x = img_np[None].astype(np.float32)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
    with no_grad():
        out = forward(params, Tensor(x)).data
    return np.clip(out[0, :, :h, :w], 0.0, 1.0)


# ---------------------------------------------------------------------------
# Accounting
# ---------------------------------------------------------------------------

_STAGE_ORDER = (
    "embed", "enc1", "down1", "enc2", "down2", "enc3", "down3", "latent",
    "up4", "reduce3", "dec3", "up3", "reduce2", "dec2", "up2", "dec1",
    "refine", "output",
)


@dataclass
class StageInfo:
    name: str
    params: int
    blocks: int = 0
    channels: int = 0
    heads: int = 0


@dataclass
class ArchReport:
    config: ModelConfig
    total_params: int
    total_blocks: int
    stages: list = field(default_factory=list)
    fp32_bytes: int = 0


def _header_bytes(config):
    """Exact checkpoint size minus the raw tensor data."""
    fixed = len(MAGIC) + 4 + 4 * 4 + 8 + 4 * 4 + 3 * 4 + 4 * 4 + 4
    per_tensor = 0
    for name, shape, _ in parameter_specs(config):
        per_tensor += 2 + len(name.encode()) + 1 + 4 * len(shape)
    return fixed + per_tensor


def param_count(config):
    """Closed-form parameter accounting; agrees with build() by construction."""
    cfg = config
    stage_params = {s: 0 for s in _STAGE_ORDER}
    total = 0
    for name, shape, _ in parameter_specs(cfg):
        n = int(np.prod(shape))
        total += n
        stage_params[name.split(".")[0]] += n

    block_counts = {
        "enc1": cfg.enc_blocks[0], "enc2": cfg.enc_blocks[1],
        "enc3": cfg.enc_blocks[2], "latent": cfg.enc_blocks[3],
        "dec3": cfg.dec_blocks[0], "dec2": cfg.dec_blocks[1],
        "dec1": cfg.dec_blocks[2], "refine": cfg.refinement_blocks,
    }
    stage_channels = {
        "enc1": cfg.level_channels(0), "enc2": cfg.level_channels(1),
        "enc3": cfg.level_channels(2), "latent": cfg.level_channels(3),
        "dec3": cfg.level_channels(2), "dec2": cfg.level_channels(1),
        "dec1": 2 * cfg.base_channels, "refine": 2 * cfg.base_channels,
    }
    stage_heads = {
        "enc1": cfg.heads[0], "enc2": cfg.heads[1], "enc3": cfg.heads[2],
        "latent": cfg.heads[3], "dec3": cfg.heads[2], "dec2": cfg.heads[1],
        "dec1": cfg.heads[0], "refine": cfg.heads[0],
    }
    stages = [
        StageInfo(
            name=s,
            params=stage_params[s],
            blocks=block_counts.get(s, 0),
            channels=stage_channels.get(s, 0),
            heads=stage_heads.get(s, 0),
        )
        for s in _STAGE_ORDER
    ]
    return ArchReport(
        config=cfg,
        total_params=total,
        total_blocks=cfg.total_blocks,
        stages=stages,
        fp32_bytes=4 * total + _header_bytes(cfg),
    )


def search_reduced_config(base=BASELINE_CONFIG, param_target=0.816,
                          block_target=0.70, block_tol=0.03):
    """Find the mirrored config with doubled heads whose parameter ratio is
    closest to `param_target`, subject to the block-count ratio constraint.

    Enumerates encoder counts, latent depth and refinement depth from 1 up to
    the baseline values, with the decoder mirroring the encoder. Deterministic:
    first strict minimum in enumeration order wins.
    """
    base_report = param_count(base)
    heads = tuple(2 * h for h in base.heads)
    best = None
    best_err = None
    for e1 in range(1, base.enc_blocks[0] + 1):
        for e2 in range(1, base.enc_blocks[1] + 1):
            for e3 in range(1, base.enc_blocks[2] + 1):
                for latent in range(1, base.enc_blocks[3] + 1):
                    for refine in range(1, base.refinement_blocks + 1):
                        cand = ModelConfig(
                            base_channels=base.base_channels,
                            enc_blocks=(e1, e2, e3, latent),
                            dec_blocks=(e3, e2, e1),
                            heads=heads,
                            refinement_blocks=refine,
                            gamma=base.gamma,
                        )
                        if abs(cand.total_blocks / base.total_blocks - block_target) > block_tol:
                            continue
                        ratio = param_count(cand).total_params / base_report.total_params
                        err = abs(ratio - param_target)
                        if best_err is None or err < best_err:
                            best, best_err = cand, err
    if best is None:
        raise ValueError("no config satisfies the block-count constraint")
    return best


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _pack_config(cfg):
    return struct.pack(
        "<4I d 4I 3I 4I",
        cfg.base_channels, cfg.in_channels, cfg.out_channels, cfg.refinement_blocks,
        cfg.gamma, *cfg.enc_blocks, *cfg.dec_blocks, *cfg.heads,
    )


def _unpack_config(buf):
    vals = struct.unpack("<4I d 4I 3I 4I", buf)
    return ModelConfig(
        base_channels=vals[0], in_channels=vals[1], out_channels=vals[2],
        refinement_blocks=vals[3], gamma=vals[4],
        enc_blocks=vals[5:9], dec_blocks=vals[9:12], heads=vals[12:16],
    )


def save(params, path):
    """Write a float32 checkpoint; bit-exact roundtrip with load()."""
    names = sorted(params.names())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(_pack_config(params.config))
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            t = params[name]
            data = np.ascontiguousarray(t.data, dtype="<f4")
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(data.tobytes())
    return path


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load(path):
    """Read a checkpoint into a fresh ParamStore (all tensors requires_grad)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC), "magic") != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        cfg = _unpack_config(_read_exact(fh, struct.calcsize("<4I d 4I 3I 4I"), "config"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))

        expected = {name: shape for name, shape, _ in parameter_specs(cfg)}
        if count != len(expected):
            raise CheckpointError(
                f"{path}: {count} tensors stored, config implies {len(expected)}"
            )
        store = ParamStore(cfg)
        loaded = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, nlen, "name").decode()
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "ndim"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "shape"))
            if name not in expected:
                raise CheckpointError(f"{path}: unexpected tensor {name!r}")
            if shape != expected[name]:
                raise CheckpointError(
                    f"{path}: tensor {name!r} has shape {shape}, "
                    f"config implies {expected[name]}"
                )
            n = int(np.prod(shape))
            data = np.frombuffer(_read_exact(fh, 4 * n, name), dtype="<f4").reshape(shape)
            loaded[name] = Tensor(data.copy(), requires_grad=True)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last tensor")
    for name in expected:  # registration in canonical build order
        store.register(name, loaded[name])
    return store
