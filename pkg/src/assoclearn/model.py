"""Layer-stack networks described by strings like ``C(32,3)->P(2)->FC(128)``.

Grammar (whitespace-insensitive)::

    arch  := layer ("->" layer)*
    layer := "C(" n "," k ["," "stride=" s] ")" | "P(" k ["," s] ")" | "FC(" n ")"

The last layer must be an FC layer; its width is the embedding size.  A
class head FC(num_classes) without activation sits on top.
"""

from __future__ import annotations

import json
import os
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

L2_WEIGHT = 1e-4


class ArchitectureError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


@dataclass(frozen=True)
class Conv:
    n: int
    k: int
    stride: int = 1


@dataclass(frozen=True)
class Pool:
    k: int
    stride: int | None = None  # None: same as the window

    @property
    def step(self) -> int:
        return self.k if self.stride is None else self.stride


@dataclass(frozen=True)
class FC:
    n: int


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    num_classes: int = 10

    @property
    def embedding_dim(self) -> int:
        return self.layers[-1].n

    def __post_init__(self):
        if not self.layers or not isinstance(self.layers[-1], FC):
            raise ValueError("the last layer must be FC(embedding_dim)")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be positive, got {self.num_classes}")

    def to_json(self) -> dict:
        return {"architecture": render_architecture(self), "num_classes": self.num_classes}

    @classmethod
    def from_json(cls, d: dict) -> "ModelSpec":
        return parse_architecture(d["architecture"], num_classes=d["num_classes"])


_TOKEN = re.compile(r"(FC|C|P)\(([^()]*)\)")


def parse_architecture(text: str, num_classes: int = 10, pool_stride: int | None = None) -> ModelSpec:
    """Parse an architecture string.

    ``pool_stride`` overrides the stride of pooling layers that do not give
    one explicitly (default: stride equals the window size).
    """
    src = text.replace("→", "->")
    compact = []  # (char, original position)
    for pos, ch in enumerate(src):
        if not ch.isspace():
            compact.append((ch, pos))
    s = "".join(c for c, _ in compact)

    def where(i):
        return compact[i][1] if i < len(compact) else len(src)

    if not s:
        raise ArchitectureError("empty architecture", 0)
    layers = []
    i = 0
    seen_fc = False
    while True:
        m = _TOKEN.match(s, i)
        if not m:
            raise ArchitectureError(f"unknown token {s[i:i + 8]!r}", where(i))
        kind, args = m.group(1), m.group(2)
        parts = [a for a in args.split(",")] if args else []
        try:
            if kind == "C":
                if len(parts) not in (2, 3):
                    raise ValueError("C expects (n, k[, stride=s])")
                stride = 1
                if len(parts) == 3:
                    key, _, val = parts[2].partition("=")
                    if key != "stride" or not val:
                        raise ValueError("third C argument must be stride=s")
                    stride = int(val)
                layer = Conv(int(parts[0]), int(parts[1]), stride)
                extents = (layer.n, layer.k, layer.stride)
            elif kind == "P":
                if len(parts) not in (1, 2):
                    raise ValueError("P expects (k[, s])")
                if len(parts) == 2:
                    layer = Pool(int(parts[0]), int(parts[1].removeprefix("stride=")))
                else:
                    layer = Pool(int(parts[0]), pool_stride)
                extents = (layer.k, layer.step)
            else:
                if len(parts) != 1:
                    raise ValueError("FC expects (n)")
                layer = FC(int(parts[0]))
                extents = (layer.n,)
        except ValueError as e:
            raise ArchitectureError(f"bad arguments for {kind}: {e}", where(i)) from None
        if any(v < 1 for v in extents):
            raise ArchitectureError(f"{kind} extents must be positive", where(i))
        if seen_fc and kind != "FC":
            raise ArchitectureError(f"{kind} layer after a fully connected layer", where(i))
        seen_fc = seen_fc or kind == "FC"
        layers.append(layer)
        i = m.end()
        if i == len(s):
            break
        if not s.startswith("->", i):
            raise ArchitectureError(f"expected '->' but found {s[i:i + 4]!r}", where(i))
        i += 2
    if not isinstance(layers[-1], FC):
        raise ArchitectureError("architecture must end with an FC embedding layer", len(src))
    return ModelSpec(tuple(layers), num_classes)


def render_architecture(spec: ModelSpec) -> str:
    parts = []
    for layer in spec.layers:
        if isinstance(layer, Conv):
            parts.append(f"C({layer.n},{layer.k})" if layer.stride == 1 else f"C({layer.n},{layer.k},stride={layer.stride})")
        elif isinstance(layer, Pool):
            parts.append(f"P({layer.k})" if layer.stride is None else f"P({layer.k},{layer.stride})")
        else:
            parts.append(f"FC({layer.n})")
    return "->".join(parts)


@dataclass
class Parameters:
    spec: ModelSpec
    input_shape: tuple[int, int, int]
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "Parameters":
        return Parameters(self.spec, self.input_shape, {k: v.copy() for k, v in self.arrays.items()})


def _layer_shapes(spec: ModelSpec, input_shape) -> list[tuple[str, tuple, tuple]]:
    """(name, weight shape, bias shape) for every parameterized layer."""
    h, w, c = input_shape
    flat = None
    out = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            out.append((f"conv{i}", (layer.k, layer.k, c, layer.n), (layer.n,)))
            h, w, c = -(-h // layer.stride), -(-w // layer.stride), layer.n
        elif isinstance(layer, Pool):
            h, w = -(-h // layer.step), -(-w // layer.step)
        else:
            fan_in = h * w * c if flat is None else flat
            out.append((f"fc{i}", (fan_in, layer.n), (layer.n,)))
            flat = layer.n
    out.append(("logits", (spec.embedding_dim, spec.num_classes), (spec.num_classes,)))
    return out


def parameter_names(spec: ModelSpec, input_shape) -> list[str]:
    names = []
    for name, _, _ in _layer_shapes(spec, input_shape):
        names += [f"{name}/{'kernel' if name.startswith('conv') else 'weights'}", f"{name}/bias"]
    return names


def init_parameters(spec: ModelSpec, input_shape, seed: int, dtype=np.float32) -> Parameters:
    """He-normal weights (std = sqrt(2 / fan_in)) and zero biases."""
    input_shape = tuple(int(v) for v in input_shape)
    if len(input_shape) != 3 or min(input_shape) < 1:
        raise ValueError(f"input shape must be (h, w, c) with positive extents, got {input_shape}")
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, wshape, bshape in _layer_shapes(spec, input_shape):
        fan_in = int(np.prod(wshape[:-1]))
        key = "kernel" if name.startswith("conv") else "weights"
        arrays[f"{name}/{key}"] = (rng.standard_normal(wshape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        arrays[f"{name}/bias"] = np.zeros(bshape, dtype=dtype)
    return Parameters(spec, input_shape, arrays)


@dataclass
class Forward:
    embeddings: Tensor
    logits: Tensor
    l2: Tensor


def bind(params: Parameters, tape: Tape) -> dict[str, Tensor]:
    return {name: tape.parameter(name, value) for name, value in params.arrays.items()}


def forward(params: Parameters, images, tape: Tape | None = None) -> Forward:
    """Embeddings, logits and the L2 weight penalty for a batch of images.

    Every conv and FC layer except the class head is followed by elu.  When
    a pool directly follows a conv, elu is applied after pooling; elu is
    increasing, so the result is identical and the activation runs on the
    smaller tensor.
    """
    tape = Tape() if tape is None else tape
    x = images if isinstance(images, Tensor) else tape.constant(images)
    if tuple(x.shape[1:]) != tuple(params.input_shape):
        raise ad.ShapeError(f"images have shape {x.shape[1:]}, model expects {params.input_shape}")
    p = bind(params, tape)
    layers = params.spec.layers
    pending_elu = False
    weights = []
    for i, layer in enumerate(layers):
        if isinstance(layer, Conv):
            if pending_elu:
                x = ad.elu(x)
            k = p[f"conv{i}/kernel"]
            weights.append(k)
            x = ad.conv2d(x, k, layer.stride, p[f"conv{i}/bias"])
            pending_elu = True
        elif isinstance(layer, Pool):
            x = ad.maxpool2d(x, layer.k, layer.step)
        else:
            if pending_elu:
                x = ad.elu(x)
                pending_elu = False
            if x.value.ndim != 2:
                x = ad.flatten(x)
            w = p[f"fc{i}/weights"]
            weights.append(w)
            x = ad.elu(ad.dense(x, w, p[f"fc{i}/bias"]))
    emb = x
    w = p["logits/weights"]
    weights.append(w)
    logits = ad.dense(emb, w, p["logits/bias"])
    l2 = ad.square_sum(weights[0])
    for w in weights[1:]:
        l2 = ad.add(l2, ad.square_sum(w))
    return Forward(emb, logits, ad.scale(l2, L2_WEIGHT))


def predict(params: Parameters, images: np.ndarray, batch_size: int = 500) -> tuple[np.ndarray, np.ndarray]:
    """Embeddings and logits without recording a tape."""
    embs, logits = [], []
    for start in range(0, len(images), batch_size):
        tape = Tape(params.arrays["logits/weights"].dtype, record=False)
        out = forward(params, images[start:start + batch_size], tape)
        embs.append(out.embeddings.value)
        logits.append(out.logits.value)
    return np.concatenate(embs), np.concatenate(logits)


# checkpoint container

MAGIC = b"ASSC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: Parameters, extra_tensors: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    """Write params (and e.g. optimizer moments) to the binary container.

    The file is assembled in memory and written in one go, so a failure
    never leaves a partial checkpoint behind.
    """
    header = {**params.spec.to_json(), "input_shape": list(params.input_shape)}
    if meta:
        header["meta"] = meta
    hj = json.dumps(header, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(hj)), hj]
    tensors = dict(params.arrays)
    tensors.update(extra_tensors or {})
    for name, value in tensors.items():
        value = np.asarray(value)
        nb = name.encode()
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack("<I", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        chunks.append(value.astype("<f4").tobytes())
    data = b"".join(chunks)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[Parameters, dict[str, np.ndarray], dict]:
    """Returns (params, other named tensors, header meta)."""
    with open(path, "rb") as f:
        data = f.read()
    return decode_checkpoint(data)


def decode_checkpoint(data: bytes) -> tuple[Parameters, dict[str, np.ndarray], dict]:
    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        out = data[pos:pos + n]
        pos += n
        return out

    pos = 0
    if take(4) != MAGIC:
        raise CheckpointError("bad magic, not an ASSC checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(take(hlen))
    spec = ModelSpec.from_json(header)
    tensors = {}
    while pos < len(data):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
    names = parameter_names(spec, header["input_shape"])
    missing = [n for n in names if n not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {missing}")
    arrays = {n: tensors.pop(n) for n in names}
    params = Parameters(spec, tuple(header["input_shape"]), arrays)
    return params, tensors, header.get("meta", {})
