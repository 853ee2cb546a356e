"""Convolution, ReLU, pixel shuffle, the two-conv f-block and the parameter registry."""
from __future__ import annotations

import fnmatch
import io
import json
import struct
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from .seeding import derive_seed
from .tensor import Tensor, add, make_node, read_tensor, slice_channels, write_tensor

CKPT_MAGIC = b"SPTC"
CKPT_VERSION = 1


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    # xp: zero-padded [N, C, H+k-1, W+k-1] -> [N, C*k*k, H*W]
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, h, w), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(n, c * k * k, h * w)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """Stride-1, zero same-padded cross-correlation plus optional bias.

    Inputs that need no gradient have their all-zero channels dropped from the
    matmul (mask stacks are mostly zero padding); the result is unchanged.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv2d expects [N,C,H,W], got {x.shape}")
    c_out, c_in, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d needs an odd square kernel, got {weight.shape}")
    n, c, h, w = x.shape
    if c != c_in:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    pad = k // 2
    xd, wd = x.data, weight.data
    keep = None
    if not x.requires_grad:
        live = np.flatnonzero(xd.any(axis=(0, 2, 3)))
        if live.size < c:
            keep = live
            xd, wd = xd[:, keep], wd[:, keep]
    c_used = xd.shape[1]
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    wmat = wd.reshape(c_out, c_used * k * k)
    if c_used:
        cols = _im2col(xp, k, h, w)
        with np.errstate(over="ignore", invalid="ignore"):  # make_node reports non-finite output
            out = wmat @ cols
    else:
        cols = None
        out = np.zeros((n, c_out, h * w), dtype=x.dtype)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, c_out, h, w)

    def backward_fn(g):
        g3 = g.reshape(n, c_out, h * w)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = (wmat.T @ g3).reshape(n, c_in, k, k, h, w)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + h, j:j + w] += dcols[:, :, i, j]
            gx = np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + w]) if pad else dxp
        if weight.requires_grad:
            gw_used = np.zeros_like(wmat)
            for b in range(n if c_used else 0):
                gw_used += g3[b] @ cols[b].T
            gw_used = gw_used.reshape(c_out, c_used, k, k)
            if keep is None:
                gw = gw_used
            else:
                gw = np.zeros_like(weight.data)
                gw[:, keep] = gw_used
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward_fn, "conv2d")


def conv2d_parts(parts: Sequence[Tensor], weight: Tensor, bias: Tensor | None) -> Tensor:
    """conv2d(concat_channels(parts)) computed as a sum of per-part convolutions."""
    if len(parts) == 1:
        return conv2d(parts[0], weight, bias)
    total = sum(p.shape[1] for p in parts)
    if total != weight.shape[1]:
        raise ValueError(f"conv2d: input has {total} channels, weight expects {weight.shape[1]}")
    out = None
    start = 0
    for i, p in enumerate(parts):
        stop = start + p.shape[1]
        term = conv2d(p, slice_channels(weight, start, stop), bias if i == 0 else None)
        out = term if out is None else add(out, term)
        start = stop
    return out


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the gradient at exactly 0 is 0."""
    mask = x.data > 0
    return make_node(np.where(mask, x.data, x.dtype.type(0)), (x,), lambda g: (g * mask,), "relu")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """[N, C*r*r, H, W] -> [N, C, rH, rW], out[n,c,y,x] = in[n, c*r*r + r*(y%r) + x%r, y//r, x//r]."""
    n, cr, h, w = x.shape
    if cr % (r * r):
        raise ValueError(f"pixel_shuffle: {cr} channels not divisible by r^2={r * r}")
    c = cr // (r * r)
    out = x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)

    def backward_fn(g):
        return (np.ascontiguousarray(
            g.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, cr, h, w)),)

    return make_node(np.ascontiguousarray(out), (x,), backward_fn, "pixel_shuffle")


def pixel_unshuffle(x: np.ndarray, r: int) -> np.ndarray:
    n, c, hr, wr = x.shape
    h, w = hr // r, wr // r
    return x.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)


@dataclass
class Param:
    tensor: Tensor
    trainable: bool = True


class ParamSet:
    """Ordered name -> parameter registry with per-parameter trainable flags."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, tensor: Tensor, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        tensor.requires_grad = trainable
        tensor.name = name
        self._params[name] = Param(tensor, trainable)
        return tensor

    def update(self, other: "ParamSet") -> None:
        for name, p in other._params.items():
            self.add(name, p.tensor, p.trainable)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield name, p.tensor

    def is_trainable(self, name: str) -> bool:
        return self._params[name].trainable

    def trainable_items(self) -> list[tuple[str, Tensor]]:
        return [(n, p.tensor) for n, p in self._params.items() if p.trainable]

    def set_trainable(self, pattern: str, flag: bool) -> list[str]:
        """Set the trainable flag on every name matching a glob pattern."""
        hits = [n for n in self._params if fnmatch.fnmatchcase(n, pattern)]
        if not hits:
            raise KeyError(f"pattern {pattern!r} matches no parameter")
        for n in hits:
            p = self._params[n]
            p.trainable = flag
            p.tensor.requires_grad = flag
        return hits

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.tensor.grad = None

    def count(self, prefix: str = "", trainable: bool | None = None) -> int:
        return sum(p.tensor.size for n, p in self._params.items()
                   if n.startswith(prefix) and (trainable is None or p.trainable == trainable))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.tensor.data.copy() for n, p in self._params.items()}

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet()
        for n, p in self._params.items():
            out.add(n, Tensor(p.tensor.data, dtype=dtype), p.trainable)
        return out

    def to_bytes(self, meta: Mapping | None = None) -> bytes:
        body = io.BytesIO()
        entries = []
        for name, p in self._params.items():
            start = body.tell()
            write_tensor(body, p.tensor)
            entries.append({"name": name, "shape": list(p.tensor.shape), "dtype": str(p.tensor.dtype),
                            "trainable": p.trainable, "offset": start, "nbytes": body.tell() - start})
        header = json.dumps({"format_version": CKPT_VERSION, "tensors": entries, "meta": dict(meta or {})},
                            sort_keys=True).encode()
        return CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(header)) + header + body.getvalue()

    def save(self, path, meta: Mapping | None = None) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes(meta))

    @classmethod
    def from_bytes(cls, raw: bytes) -> tuple["ParamSet", dict]:
        if raw[:4] != CKPT_MAGIC:
            raise ValueError("not a checkpoint file")
        version, hlen = struct.unpack("<IQ", raw[4:16])
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(raw[16:16 + hlen])
        body = io.BytesIO(raw[16 + hlen:])
        ps = cls()
        for e in header["tensors"]:
            body.seek(e["offset"])
            t = read_tensor(body)
            if list(t.shape) != e["shape"]:
                raise ValueError(f"checkpoint shape mismatch for {e['name']}")
            ps.add(e["name"], t, e["trainable"])
        return ps, header["meta"]

    @classmethod
    def load(cls, path) -> tuple["ParamSet", dict]:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]


def conv_specs_fblock(name: str, c_in: int, c_mid: int, c_out: int, k: int = 3) -> dict[str, tuple[int, int, int]]:
    return {f"{name}.conv1": (c_in, c_mid, k), f"{name}.conv2": (c_mid, c_out, k)}


def init_params(spec: Mapping[str, tuple[int, int, int]], seed: int, dtype=np.float32,
                trainable: bool = True) -> ParamSet:
    """Fan-in uniform init: weights ~ U(-a, a), a = sqrt(6 / (C_in k^2)); zero biases.

    ``spec`` maps a conv name to (C_in, C_out, k). Each conv draws from its own
    stream derived from (seed, name), so adding convs never shifts existing ones.
    """
    ps = ParamSet()
    for name, (c_in, c_out, k) in spec.items():
        if k % 2 == 0:
            raise ValueError(f"{name}: kernel size must be odd, got {k}")
        a = np.sqrt(6.0 / (c_in * k * k))
        rng = np.random.default_rng(derive_seed(seed, name))
        w = rng.uniform(-a, a, size=(c_out, c_in, k, k))
        ps.add(f"{name}.weight", Tensor(w, dtype=dtype), trainable)
        ps.add(f"{name}.bias", Tensor(np.zeros(c_out), dtype=dtype), trainable)
    return ps


def conv_params(ps: ParamSet, name: str) -> ConvParams:
    return ConvParams(ps[f"{name}.weight"], ps[f"{name}.bias"])


def apply_conv(x: Tensor, p: ConvParams) -> Tensor:
    return conv2d(x, p.weight, p.bias)


def f_block(x: Tensor | Sequence[Tensor], first: ConvParams, second: ConvParams) -> Tensor:
    """conv -> relu -> conv. A list input is treated as its channel concatenation."""
    if first.c_out != second.c_in:
        raise ValueError(f"f_block: conv widths do not chain ({first.c_out} -> {second.c_in})")
    parts = [x] if isinstance(x, Tensor) else list(x)
    return apply_conv(relu(conv2d_parts(parts, first.weight, first.bias)), second)


def fblock_params(ps: ParamSet, name: str) -> tuple[ConvParams, ConvParams]:
    return conv_params(ps, f"{name}.conv1"), conv_params(ps, f"{name}.conv2")
