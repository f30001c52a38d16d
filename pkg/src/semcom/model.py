"""Joint source-channel encoder and two decoders of unequal depth.

The source coders are four-stage windowed-attention transformers. The
encoder downsamples 2x between stages (patch merging); each decoder mirrors
it with 2x patch splitting and a final linear unembedding to RGB. The
channel coders are per-token 7-layer MLPs with one input-to-output skip.

All parameters live in a single :class:`ParameterSet` named
``{enc|dec1|dec2}.{sem|chan}.<path>.{w|b}``; freezing and transfer select by
name prefix.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, MutableMapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import rng as rngmod
from .tensor import (Tensor, add, attention, gelu, layer_norm, linear, reshape, roll, scale, transpose,
                     window_merge, window_partition)

DECODERS = ("dec1", "dec2")
CHANNEL_CODER_LAYERS = 7
INIT_STD = 0.02
LN_EPS = 1e-5
_MASK_NEG = -1e9


class ConfigError(ValueError):
    """Model configuration violates an architectural invariant."""


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 2
    stage_dims: Tuple[int, int, int, int] = (16, 32, 64, 128)
    encoder_depths: Tuple[int, int, int, int] = (2, 2, 6, 2)
    hcd_depths: Tuple[int, int, int, int] = (2, 6, 2, 2)
    lcd_depths: Tuple[int, int, int, int] = (2, 2, 2, 2)
    heads: Tuple[int, int, int, int] = (1, 2, 4, 4)
    window_size: int = 2
    shifted_windows: bool = False
    compression_ratio: Fraction = Fraction(1, 16)
    channel_coder_layers: int = CHANNEL_CODER_LAYERS
    mlp_ratio: int = 2

    def __post_init__(self):
        for name in ("stage_dims", "encoder_depths", "hcd_depths", "lcd_depths", "heads"):
            val = tuple(int(v) for v in getattr(self, name))
            if len(val) != 4:
                raise ConfigError(f"{name} needs 4 entries, got {len(val)}")
            if any(v < 1 for v in val):
                raise ConfigError(f"{name} entries must be positive")
            object.__setattr__(self, name, val)
        object.__setattr__(self, "compression_ratio", Fraction(self.compression_ratio))
        if self.channel_coder_layers != CHANNEL_CODER_LAYERS:
            raise ConfigError("channel coders have exactly 7 layers")
        if self.patch_size < 1 or self.window_size < 1 or self.mlp_ratio < 1:
            raise ConfigError("patch_size, window_size and mlp_ratio must be positive")
        for d, h in zip(self.stage_dims, self.heads):
            if d % h:
                raise ConfigError(f"stage dim {d} not divisible by {h} heads")
        if not 0 < self.compression_ratio <= 1:
            raise ConfigError("compression_ratio must lie in (0, 1]")
        c = 3 * self.reduction ** 2 * self.compression_ratio
        if c.denominator != 1:
            raise ConfigError(f"channel symbol width 3·{self.reduction}²·r = {c} is not an integer")

    @property
    def reduction(self) -> int:
        """Spatial downsampling factor from image to the deepest token grid."""
        return self.patch_size * 8

    @property
    def c_out(self) -> int:
        return int(3 * self.reduction ** 2 * self.compression_ratio)

    def depths(self, which: str) -> Tuple[int, ...]:
        if which == "enc":
            return self.encoder_depths
        if which == "dec1":
            return self.hcd_depths
        if which == "dec2":
            return self.lcd_depths
        raise ValueError(f"unknown decoder id {which!r}")

    def tails_match(self) -> bool:
        return self.hcd_depths[2:] == self.lcd_depths[2:]

    def grid(self, h: int, w: int, enc_stage: int) -> Tuple[int, int]:
        f = self.patch_size * 2 ** (enc_stage - 1)
        return h // f, w // f

    def check_image(self, h: int, w: int) -> None:
        r = self.reduction
        if h < r or w < r or h % r or w % r:
            raise ConfigError(f"image {h}x{w} must be a positive multiple of {r}")
        for s in range(1, 5):
            gh, gw = self.grid(h, w, s)
            win = self.window(gh, gw)
            if gh % win or gw % win:
                raise ConfigError(f"stage {s} grid {gh}x{gw} not divisible by window {win}")

    def window(self, gh: int, gw: int) -> int:
        # a grid smaller than the window is attended as a single window
        return min(self.window_size, gh, gw)

    def n_symbols(self, h: int, w: int) -> int:
        return (h // self.reduction) * (w // self.reduction) * self.c_out


# ---------------------------------------------------------------------------
# parameter set


class ParameterSet(MutableMapping):
    """Named tensors, iterated in lexicographic name order.

    A tensor's ``requires_grad`` flag doubles as its trainable flag.
    """

    def __init__(self, tensors: Optional[Dict[str, Tensor]] = None):
        self._t: Dict[str, Tensor] = {}
        for k, v in (tensors or {}).items():
            self[k] = v

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __setitem__(self, name: str, value: Tensor) -> None:
        if not isinstance(value, Tensor):
            raise TypeError("ParameterSet values must be Tensors")
        self._t[name] = value

    def __delitem__(self, name: str) -> None:
        del self._t[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._t))

    def __len__(self) -> int:
        return len(self._t)

    def select(self, prefix: str) -> List[str]:
        return [n for n in self if n.startswith(prefix)]

    def count(self, prefix: str = "") -> int:
        return sum(self[n].size for n in self.select(prefix))

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {n: self[n].data.copy() for n in self}

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        for n in self:
            out[n] = Tensor(self[n].data, requires_grad=self[n].requires_grad)
        return out

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None


def _sublayer_is_norm(name: str) -> bool:
    return name.rsplit(".", 2)[-2].startswith("norm")


def _linear_shapes(prefix: str, din: int, dout: int) -> Dict[str, tuple]:
    return {f"{prefix}.w": (din, dout), f"{prefix}.b": (dout,)}


def _norm_shapes(prefix: str, d: int) -> Dict[str, tuple]:
    return {f"{prefix}.w": (d,), f"{prefix}.b": (d,)}


def _block_shapes(prefix: str, d: int, mlp_ratio: int) -> Dict[str, tuple]:
    out: Dict[str, tuple] = {}
    out.update(_norm_shapes(f"{prefix}.norm1", d))
    for sub in ("q", "k", "v", "proj"):
        out.update(_linear_shapes(f"{prefix}.{sub}", d, d))
    out.update(_norm_shapes(f"{prefix}.norm2", d))
    out.update(_linear_shapes(f"{prefix}.fc1", d, mlp_ratio * d))
    out.update(_linear_shapes(f"{prefix}.fc2", mlp_ratio * d, d))
    return out


def _chan_shapes(prefix: str, din: int, hidden: int, dout: int) -> Dict[str, tuple]:
    out: Dict[str, tuple] = {}
    widths = [din] + [hidden] * (CHANNEL_CODER_LAYERS - 1) + [dout]
    for i in range(CHANNEL_CODER_LAYERS):
        out.update(_linear_shapes(f"{prefix}.fc{i + 1}", widths[i], widths[i + 1]))
    out.update(_linear_shapes(f"{prefix}.skip", din, dout))
    return out


def param_shapes(config: ModelConfig) -> Dict[str, tuple]:
    """Name -> shape for every tensor of the encoder and both decoders."""
    dims, p, mr = config.stage_dims, config.patch_size, config.mlp_ratio
    shapes: Dict[str, tuple] = {}
    shapes.update(_linear_shapes("enc.sem.embed.proj", 3 * p * p, dims[0]))
    shapes.update(_norm_shapes("enc.sem.embed.norm", dims[0]))
    for s in range(1, 5):
        d = dims[s - 1]
        if s > 1:
            shapes.update(_norm_shapes(f"enc.sem.stage{s}.merge.norm", 4 * dims[s - 2]))
            shapes.update(_linear_shapes(f"enc.sem.stage{s}.merge.proj", 4 * dims[s - 2], d))
        for b in range(1, config.encoder_depths[s - 1] + 1):
            shapes.update(_block_shapes(f"enc.sem.stage{s}.block{b}", d, mr))
    shapes.update(_norm_shapes("enc.sem.norm", dims[3]))
    shapes.update(_chan_shapes("enc.chan", dims[3], dims[3], config.c_out))

    for dec in DECODERS:
        depths = config.depths(dec)
        shapes.update(_chan_shapes(f"{dec}.chan", config.c_out, dims[3], dims[3]))
        for s in range(1, 5):
            d = dims[4 - s]
            if s > 1:
                prev = dims[5 - s]
                shapes.update(_norm_shapes(f"{dec}.sem.stage{s}.split.norm", prev))
                shapes.update(_linear_shapes(f"{dec}.sem.stage{s}.split.proj", prev, 4 * d))
            for b in range(1, depths[s - 1] + 1):
                shapes.update(_block_shapes(f"{dec}.sem.stage{s}.block{b}", d, mr))
        shapes.update(_norm_shapes(f"{dec}.sem.head.norm", dims[0]))
        shapes.update(_linear_shapes(f"{dec}.sem.head.proj", dims[0], 3 * p * p))
    return shapes


def _trunc_normal(shape: tuple, gen: np.random.Generator, std: float = INIT_STD) -> np.ndarray:
    out = gen.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = gen.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def build(config: ModelConfig, init_seed: int = 0) -> ParameterSet:
    """Fresh encoder + both decoders.

    Linear weights are N(0, 0.02²) truncated at ±2σ, each tensor drawn from
    its own sub-stream of the init stream; biases zero; norms gamma 1, beta 0.
    """
    params = ParameterSet()
    for name, shape in sorted(param_shapes(config).items()):
        if name.endswith(".b"):
            data = np.zeros(shape)
        elif _sublayer_is_norm(name):
            data = np.ones(shape)
        else:
            data = _trunc_normal(shape, rngmod.stream(init_seed, "init/" + name))
        params[name] = Tensor(data, requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# layers


def _lin(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    return linear(x, params[prefix + ".w"], params[prefix + ".b"])


def _norm(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    return layer_norm(x, params[prefix + ".w"], params[prefix + ".b"], LN_EPS)


@functools.lru_cache(maxsize=None)
def _shift_mask(h: int, w: int, win: int, shift: int) -> np.ndarray:
    """Additive mask [nw, 1, T, T] blocking attention across rolled-in regions."""
    region = np.zeros((h, w))
    cuts = (slice(0, -win), slice(-win, -shift), slice(-shift, None))
    label = 0
    for hs in cuts:
        for ws in cuts:
            region[hs, ws] = label
            label += 1
    tiles = region.reshape(h // win, win, w // win, win).transpose(0, 2, 1, 3)
    tiles = tiles.reshape(-1, win * win)
    diff = tiles[:, None, :] != tiles[:, :, None]
    mask = np.where(diff, _MASK_NEG, 0.0)
    mask.flags.writeable = False
    return mask[:, None, :, :]


def transformer_block(x: Tensor, params: ParameterSet, prefix: str, heads: int, win: int,
                      shift: int = 0) -> Tensor:
    """Pre-norm windowed self-attention + GELU MLP, both residual. x: [B, h, w, d]."""
    _, h, w, _ = x.shape
    y = _norm(x, params, prefix + ".norm1")
    mask = None
    if shift:
        y = roll(y, (-shift, -shift), (1, 2))
        mask = _shift_mask(h, w, win, shift)
    y = window_partition(y, win)
    q = _lin(y, params, prefix + ".q")
    k = _lin(y, params, prefix + ".k")
    v = _lin(y, params, prefix + ".v")
    y = _lin(attention(q, k, v, heads, mask), params, prefix + ".proj")
    y = window_merge(y, win, h, w)
    if shift:
        y = roll(y, (shift, shift), (1, 2))
    x = x + y
    z = _norm(x, params, prefix + ".norm2")
    z = _lin(gelu(_lin(z, params, prefix + ".fc1")), params, prefix + ".fc2")
    return x + z


def _run_stage(x: Tensor, params: ParameterSet, prefix: str, depth: int, heads: int,
               config: ModelConfig) -> Tensor:
    _, h, w, _ = x.shape
    win = config.window(h, w)
    can_shift = config.shifted_windows and win < min(h, w)
    for b in range(1, depth + 1):
        shift = win // 2 if (can_shift and b % 2 == 0) else 0
        x = transformer_block(x, params, f"{prefix}.block{b}", heads, win, shift)
    return x


def patch_merge(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    """[B, h, w, d] -> [B, h/2, w/2, d'] via 2x2 concat, norm, linear."""
    bsz, h, w, d = x.shape
    y = reshape(x, (bsz, h // 2, 2, w // 2, 2, d))
    y = reshape(transpose(y, (0, 1, 3, 2, 4, 5)), (bsz, h // 2, w // 2, 4 * d))
    return _lin(_norm(y, params, prefix + ".norm"), params, prefix + ".proj")


def patch_split(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    """[B, h, w, d] -> [B, 2h, 2w, d'] via norm, linear d -> 4d', 2x2 unfold."""
    bsz, h, w, _ = x.shape
    y = _lin(_norm(x, params, prefix + ".norm"), params, prefix + ".proj")
    d2 = y.shape[-1] // 4
    y = reshape(y, (bsz, h, w, 2, 2, d2))
    return reshape(transpose(y, (0, 1, 3, 2, 4, 5)), (bsz, 2 * h, 2 * w, d2))


def channel_coder(x: Tensor, params: ParameterSet, prefix: str) -> Tensor:
    z = x
    for i in range(1, CHANNEL_CODER_LAYERS):
        z = gelu(_lin(z, params, f"{prefix}.fc{i}"))
    z = _lin(z, params, f"{prefix}.fc{CHANNEL_CODER_LAYERS}")
    return z + _lin(x, params, prefix + ".skip")


def _batched(img: Union[Tensor, np.ndarray]) -> Tuple[Tensor, bool]:
    t = img if isinstance(img, Tensor) else Tensor(img)
    if t.ndim == 3:
        return reshape(t, (1, *t.shape)), True
    if t.ndim != 4:
        raise ValueError(f"expected [h, w, 3] or [B, h, w, 3], got {t.shape}")
    return t, False


def encode(image, params: ParameterSet, config: ModelConfig) -> Tensor:
    """Image [h, w, 3] (or a batch [B, h, w, 3]) -> symbols [n_sym] (or [B, n_sym])."""
    x, single = _batched(image)
    bsz, h, w, c = x.shape
    if c != 3:
        raise ValueError("images must have 3 channels")
    config.check_image(h, w)
    p = config.patch_size
    # centre pixels so the post-embedding norm does not erase patch brightness
    x = add(scale(x, 2.0), -1.0)
    x = reshape(x, (bsz, h // p, p, w // p, p, 3))
    x = reshape(transpose(x, (0, 1, 3, 2, 4, 5)), (bsz, h // p, w // p, 3 * p * p))
    x = _norm(_lin(x, params, "enc.sem.embed.proj"), params, "enc.sem.embed.norm")
    for s in range(1, 5):
        if s > 1:
            x = patch_merge(x, params, f"enc.sem.stage{s}.merge")
        x = _run_stage(x, params, f"enc.sem.stage{s}", config.encoder_depths[s - 1],
                       config.heads[s - 1], config)
    x = _norm(x, params, "enc.sem.norm")
    x = channel_coder(x, params, "enc.chan")
    out = reshape(x, (bsz, -1))
    return reshape(out, (out.shape[1],)) if single else out


def decode(y, params: ParameterSet, config: ModelConfig, which: str, h: int, w: int) -> Tensor:
    """Symbols [n_sym] (or [B, n_sym]) -> reconstruction [h, w, 3] (or batched).

    Output is unclamped; clamp to [0, 1] only when measuring quality.
    """
    if which not in DECODERS:
        raise ValueError(f"unknown decoder id {which!r}")
    config.check_image(h, w)
    y = y if isinstance(y, Tensor) else Tensor(y)
    single = y.ndim == 1
    if single:
        y = reshape(y, (1, y.shape[0]))
    bsz, n = y.shape
    if n != config.n_symbols(h, w):
        raise ValueError(f"got {n} symbols, expected {config.n_symbols(h, w)} for {h}x{w}")
    th, tw = h // config.reduction, w // config.reduction
    x = reshape(y, (bsz, th, tw, config.c_out))
    x = channel_coder(x, params, f"{which}.chan")
    depths = config.depths(which)
    for s in range(1, 5):
        if s > 1:
            x = patch_split(x, params, f"{which}.sem.stage{s}.split")
        x = _run_stage(x, params, f"{which}.sem.stage{s}", depths[s - 1], config.heads[4 - s], config)
    x = _lin(_norm(x, params, f"{which}.sem.head.norm"), params, f"{which}.sem.head.proj")
    p = config.patch_size
    x = reshape(x, (bsz, h // p, w // p, p, p, 3))
    x = reshape(transpose(x, (0, 1, 3, 2, 4, 5)), (bsz, h, w, 3))
    x = add(scale(x, 0.5), 0.5)
    return reshape(x, (h, w, 3)) if single else x


# ---------------------------------------------------------------------------
# cost model


def _block_flops(tokens: int, d: int, win_tokens: int, mlp_ratio: int) -> int:
    proj = 4 * tokens * d * d
    attn = 2 * tokens * win_tokens * d
    mlp = 2 * tokens * d * mlp_ratio * d
    return proj + attn + mlp


def forward_flops(config: ModelConfig, which: str, h: int, w: int) -> int:
    """Multiply-accumulate count of one forward pass of ``which`` ('enc', 'dec1', 'dec2')."""
    config.check_image(h, w)
    dims, mr, p = config.stage_dims, config.mlp_ratio, config.patch_size
    th, tw = h // config.reduction, w // config.reduction
    deep_tokens = th * tw
    hidden = dims[3]
    chan_in, chan_out = (dims[3], config.c_out) if which == "enc" else (config.c_out, dims[3])
    chan = deep_tokens * (chan_in * hidden + hidden * hidden * 5 + hidden * chan_out + chan_in * chan_out)
    total = chan
    depths = config.depths(which)
    for s in range(1, 5):
        enc_stage = s if which == "enc" else 5 - s
        gh, gw = config.grid(h, w, enc_stage)
        d = dims[enc_stage - 1]
        win = config.window(gh, gw)
        tokens = gh * gw
        if s > 1:
            if which == "enc":
                total += tokens * 4 * dims[enc_stage - 2] * d
            else:
                total += (tokens // 4) * dims[enc_stage] * 4 * d
        total += depths[s - 1] * _block_flops(tokens, d, win * win, mr)
    tokens0 = (h // p) * (w // p)
    total += tokens0 * 3 * p * p * dims[0]
    return total


# ---------------------------------------------------------------------------
# freezing and transfer


def set_trainable(params: ParameterSet, prefixes: Iterable[str], flag: bool) -> List[str]:
    """Set the trainable flag on every tensor under any of ``prefixes``."""
    touched: List[str] = []
    for prefix in prefixes:
        names = params.select(prefix)
        if not names:
            raise KeyError(f"prefix {prefix!r} matches no parameter")
        for n in names:
            params[n].requires_grad = bool(flag)
            if not flag:
                params[n].grad = None
        touched.extend(names)
    return touched


def transfer_prefixes(stages: Sequence[int] = (3, 4), include_head: bool = True,
                      which: str = "dec2") -> List[str]:
    out = [f"{which}.sem.stage{s}." for s in stages]
    if include_head:
        out.append(f"{which}.sem.head.")
    return out


def transfer_stages(params: ParameterSet, stages: Sequence[int] = (3, 4), include_head: bool = True,
                    src: str = "dec1", dst: str = "dec2") -> List[str]:
    """Copy the selected trailing source-decoder stages of ``src`` into ``dst``.

    Returns the destination names written. Values are copied, never aliased.
    """
    pairs = []
    for sp, dp in zip(transfer_prefixes(stages, include_head, src),
                      transfer_prefixes(stages, include_head, dst)):
        sn, dn = params.select(sp), params.select(dp)
        tails_s = [n[len(sp):] for n in sn]
        tails_d = [n[len(dp):] for n in dn]
        if not sn or tails_s != tails_d:
            raise ConfigError(f"{sp} and {dp} do not share a layer layout")
        for a, b in zip(sn, dn):
            if params[a].shape != params[b].shape:
                raise ConfigError(f"shape mismatch {a} {params[a].shape} vs {b} {params[b].shape}")
            pairs.append((a, b))
    for a, b in pairs:
        params[b].data = params[a].data.copy()
        params[b].grad = None
    return [b for _, b in pairs]


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"SCKD"
FORMAT_VERSION = 1
DTYPE_F32 = 0


class CheckpointError(ValueError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def checkpoint_bytes(params: ParameterSet) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(params))]
    for name in params:
        t = params[name]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(struct.pack("<B", DTYPE_F32))
        parts.append(t.data.astype("<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(params: ParameterSet, path: Union[str, Path]) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def parse_checkpoint(buf: bytes, config: Optional[ModelConfig] = None) -> ParameterSet:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("truncated checkpoint")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError("bad magic")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    params = ParameterSet()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("parameter name is not UTF-8") from exc
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if any(e == 0 for e in shape):
            raise CheckpointShapeError(f"{name}: zero extent in {shape}")
        (dtype,) = struct.unpack("<B", take(1))
        if dtype != DTYPE_F32:
            raise CheckpointError(f"{name}: unknown dtype tag {dtype}")
        nbytes = 4 * math.prod(shape)
        if pos + nbytes > len(buf):
            raise CheckpointShapeError(f"{name}: extents {shape} exceed the remaining data")
        values = np.frombuffer(take(nbytes), dtype="<f4").astype(np.float64).reshape(shape)
        if name in params:
            raise CheckpointError(f"duplicate parameter {name}")
        params[name] = Tensor(values, requires_grad=True)
    if pos != len(buf):
        raise CheckpointShapeError(f"{len(buf) - pos} trailing bytes after the last parameter")
    if config is not None:
        expected = param_shapes(config)
        if set(expected) != set(params):
            missing = sorted(set(expected) - set(params))[:3]
            extra = sorted(set(params) - set(expected))[:3]
            raise CheckpointShapeError(f"parameter names differ from config (missing {missing}, extra {extra})")
        for n, shape in expected.items():
            if params[n].shape != tuple(shape):
                raise CheckpointShapeError(f"{n}: shape {params[n].shape} != config {tuple(shape)}")
    return params


def load_checkpoint(path: Union[str, Path], config: Optional[ModelConfig] = None) -> ParameterSet:
    return parse_checkpoint(Path(path).read_bytes(), config)
