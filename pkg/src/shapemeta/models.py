"""Segmentation network and embedding projection head.

The segmentation model is a small 2-D residual encoder-decoder: a stem
convolution, one residual block per scale on the way down, and transposed
convolution + skip concatenation + fuse convolution on the way up.  The
decoder exposes one activation tensor per scale (deepest first) so the
contour-embedding machinery can pool the last two stages.

Forward passes are pure functions of a name->Tensor parameter mapping, which
is what lets an inner-loop update evaluate the network at virtual parameters
while the originals stay untouched.
"""

from __future__ import annotations

import dataclasses
import json
import os
import tempfile

import numpy as np

from .autodiff import (
    Tensor, add, add_relu, batch_norm, check_finite, concat, conv2d,
    conv_transpose2d, matmul, relu, reshape, softmax, transpose,
)
from .errors import ConfigError, DataFormatError, ShapeMismatchError

NORM_MODES = ("train-batch-stats", "running-stats", "test-batch-stats")

EMBED_HIDDEN = 48
EMBED_OUT = 32


@dataclasses.dataclass(frozen=True)
class SegNetConfig:
    in_channels: int = 1
    base_channels: int = 8
    depth: int = 3
    num_classes: int = 2
    norm_mode: str = "train-batch-stats"

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError("depth must be at least 2 (embedding extraction "
                              "reads the last two decoder stages)")
        if self.norm_mode not in NORM_MODES:
            raise ConfigError(f"norm_mode must be one of {NORM_MODES}")
        if self.in_channels < 1 or self.base_channels < 1 or self.num_classes < 2:
            raise ConfigError("channel/class counts must be positive (>=2 classes)")

    @property
    def channels(self):
        return [self.base_channels * (1 << k) for k in range(self.depth)]

    @property
    def embed_width(self):
        """Concatenated channel count of the last two decoder stages."""
        ch = self.channels
        return ch[1] + ch[0] if self.depth >= 2 else ch[0]


@dataclasses.dataclass
class ForwardOutput:
    logits: Tensor
    prob: Tensor
    decoder_acts: list


class SegNetParams:
    """Named leaf tensors plus batch-norm running statistics."""

    def __init__(self, config: SegNetConfig, tensors: dict, running: dict):
        self.config = config
        self.tensors = tensors
        self.running = running

    def deep_copy(self) -> "SegNetParams":
        tensors = {k: Tensor(v.data.copy(), requires_grad=True)
                   for k, v in self.tensors.items()}
        running = {k: v.copy() for k, v in self.running.items()}
        return SegNetParams(self.config, tensors, running)

    def leaves(self):
        return list(self.tensors.values())

    def n_params(self):
        return sum(t.size for t in self.tensors.values())


class EmbedNetParams:
    """Two fully connected layers projecting pooled embeddings to 32-d."""

    def __init__(self, in_width: int, tensors: dict):
        self.in_width = in_width
        self.tensors = tensors

    def deep_copy(self) -> "EmbedNetParams":
        return EmbedNetParams(self.in_width, {
            k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()})

    def leaves(self):
        return list(self.tensors.values())


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape).astype(dtype), requires_grad=True)


def init_params(config: SegNetConfig, seed: int, dtype=np.float32) -> SegNetParams:
    """Deterministic initialization: fan-in-scaled uniform kernels, zero
    biases, unit/zero normalization scale/shift."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    ch = config.channels
    tensors: dict[str, Tensor] = {}
    running: dict[str, np.ndarray] = {}

    # Convolutions feeding a normalization layer carry no bias (the
    # normalization shift absorbs it); only the classifier head has one.
    def conv(name, cout, cin, k, bias=False):
        tensors[f"{name}.w"] = _uniform(rng, (cout, cin, k, k), cin * k * k, dtype)
        if bias:
            tensors[f"{name}.b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def tconv(name, cin, cout, k):
        tensors[f"{name}.w"] = _uniform(rng, (cin, cout, k, k), cin * k * k, dtype)

    def bn(name, c):
        tensors[f"{name}.g"] = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        tensors[f"{name}.s"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        running[f"{name}.rm"] = np.zeros(c, dtype=dtype)
        running[f"{name}.rv"] = np.ones(c, dtype=dtype)

    conv("stem", ch[0], config.in_channels, 3)
    bn("stem.bn", ch[0])
    for k in range(config.depth):
        if k > 0:
            conv(f"down{k}", ch[k], ch[k - 1], 3)
            bn(f"down{k}.bn", ch[k])
        conv(f"enc{k}.conv1", ch[k], ch[k], 3)
        bn(f"enc{k}.bn1", ch[k])
        conv(f"enc{k}.conv2", ch[k], ch[k], 3)
        bn(f"enc{k}.bn2", ch[k])
    for k in range(config.depth - 2, -1, -1):
        tconv(f"up{k}", ch[k + 1], ch[k], 2)
        bn(f"up{k}.bn", ch[k])
        # Fuse conv over concat(up, skip) split into a sum of two convs;
        # identical map, avoids materializing the concatenated activation.
        conv(f"dec{k}.a", ch[k], ch[k], 3)
        conv(f"dec{k}.b", ch[k], ch[k], 3)
        bn(f"dec{k}.bn", ch[k])
    conv("head", config.num_classes, ch[0], 1, bias=True)
    return SegNetParams(config, tensors, running)


def init_embed_params(in_width: int, seed: int, dtype=np.float32) -> EmbedNetParams:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    tensors = {
        "fc1.w": _uniform(rng, (EMBED_HIDDEN, in_width), in_width, dtype),
        "fc1.b": Tensor(np.zeros(EMBED_HIDDEN, dtype=dtype), requires_grad=True),
        "fc2.w": _uniform(rng, (EMBED_OUT, EMBED_HIDDEN), EMBED_HIDDEN, dtype),
        "fc2.b": Tensor(np.zeros(EMBED_OUT, dtype=dtype), requires_grad=True),
    }
    return EmbedNetParams(in_width, tensors)


def seg_forward(params: SegNetParams, x: Tensor, norm_mode: str | None = None,
                override: dict | None = None, collect_stats: dict | None = None
                ) -> ForwardOutput:
    """Run the segmentation network.

    ``override`` maps parameter names to replacement tensors (virtual
    parameters from an inner update).  ``collect_stats``, when a dict, is
    filled with per-layer batch statistics so the caller can maintain running
    statistics.
    """
    cfg = params.config
    mode = norm_mode or cfg.norm_mode
    if mode not in NORM_MODES:
        raise ConfigError(f"norm_mode must be one of {NORM_MODES}")
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeMismatchError(
            f"expected input [batch, {cfg.in_channels}, H, W], got {tuple(x.shape)}")
    h, w = x.shape[2], x.shape[3]
    div = 1 << cfg.depth
    if h % div or w % div:
        raise ShapeMismatchError(f"spatial size {h}x{w} not divisible by {div}")

    def p(name):
        if override is not None:
            t = override.get(name)
            if t is not None:
                return t
        return params.tensors[name]

    def norm(name, t):
        if mode == "running-stats":
            y, _, _ = batch_norm(t, p(f"{name}.g"), p(f"{name}.s"),
                                 mean=params.running[f"{name}.rm"],
                                 var=params.running[f"{name}.rv"])
            return y
        y, bm, bv = batch_norm(t, p(f"{name}.g"), p(f"{name}.s"))
        if collect_stats is not None and mode == "train-batch-stats":
            collect_stats[name] = (bm, bv)
        return y

    def res_block(name, t):
        hdn = relu(norm(f"{name}.bn1", conv2d(t, p(f"{name}.conv1.w"), padding=1)))
        hdn = norm(f"{name}.bn2", conv2d(hdn, p(f"{name}.conv2.w"), padding=1))
        return add_relu(t, hdn)

    t = relu(norm("stem.bn", conv2d(x, p("stem.w"), padding=1)))
    skips = []
    for k in range(cfg.depth):
        if k > 0:
            t = relu(norm(f"down{k}.bn",
                          conv2d(t, p(f"down{k}.w"), stride=2, padding=1)))
        t = res_block(f"enc{k}", t)
        skips.append(t)

    decoder_acts = [t]  # deepest scale
    for k in range(cfg.depth - 2, -1, -1):
        t = relu(norm(f"up{k}.bn", conv_transpose2d(t, p(f"up{k}.w"), stride=2)))
        fused = add(conv2d(t, p(f"dec{k}.a.w"), padding=1),
                    conv2d(skips[k], p(f"dec{k}.b.w"), padding=1))
        t = relu(norm(f"dec{k}.bn", fused))
        decoder_acts.append(t)

    logits = conv2d(t, p("head.w"), p("head.b"))
    check_finite(logits, "seg_forward logits")
    prob = softmax(logits, axis=1)
    return ForwardOutput(logits=logits, prob=prob, decoder_acts=decoder_acts)


def embed_forward(phi: EmbedNetParams, e: Tensor,
                  override: dict | None = None) -> Tensor:
    """Project pooled embeddings [N, C] to the 32-d contrastive space."""
    if e.ndim != 2 or e.shape[1] != phi.in_width:
        raise ShapeMismatchError(
            f"expected embeddings [N, {phi.in_width}], got {tuple(e.shape)}")

    def p(name):
        if override is not None and name in override:
            return override[name]
        return phi.tensors[name]

    hidden = relu(add(matmul(e, transpose(p("fc1.w"))),
                      reshape(p("fc1.b"), (1, EMBED_HIDDEN))))
    return add(matmul(hidden, transpose(p("fc2.w"))), reshape(p("fc2.b"), (1, EMBED_OUT)))


# -- parameter checkpoint container ------------------------------------------

_MAGIC = b"SMCKPT1\n"
_DTYPES = {"f32": np.float32, "f64": np.float64}


def save_arrays(path: str, arrays: dict, meta: dict | None = None):
    """Write a checkpoint: JSON index followed by raw little-endian payloads.

    The write is atomic (temp file + rename in the target directory).
    """
    index = {}
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        code = "f64" if arr.dtype == np.float64 else "f32"
        blob = arr.astype("<" + {"f32": "f4", "f64": "f8"}[code]).tobytes()
        index[name] = {"shape": list(arr.shape), "dtype": code,
                       "offset": offset, "nbytes": len(blob)}
        offset += len(blob)
        blobs.append(blob)
    header = json.dumps({"tensors": index, "meta": meta or {}},
                        sort_keys=True).encode()
    dirname = os.path.dirname(os.path.abspath(path))
    os.makedirs(dirname, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(_MAGIC)
            f.write(len(header).to_bytes(8, "little"))
            f.write(header)
            for blob in blobs:
                f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_arrays(path: str):
    """Read a checkpoint written by ``save_arrays`` -> (arrays, meta)."""
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise DataFormatError(f"{path}: not a parameter checkpoint")
        hlen = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(hlen).decode())
        payload = f.read()
    arrays = {}
    for name, entry in header["tensors"].items():
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise DataFormatError(f"{path}: truncated payload for '{name}'")
        dt = "<" + {"f32": "f4", "f64": "f8"}[entry["dtype"]]
        arr = np.frombuffer(payload[start:start + n], dtype=dt)
        arrays[name] = arr.reshape(entry["shape"]).astype(_DTYPES[entry["dtype"]])
    return arrays, header.get("meta", {})


def save_checkpoint(path: str, params: SegNetParams, extra_arrays: dict | None = None,
                    meta: dict | None = None):
    arrays = {f"param.{k}": v.data for k, v in params.tensors.items()}
    arrays.update({f"running.{k}": v for k, v in params.running.items()})
    if extra_arrays:
        arrays.update(extra_arrays)
    full_meta = {"config": dataclasses.asdict(params.config)}
    full_meta.update(meta or {})
    save_arrays(path, arrays, full_meta)


def load_checkpoint(path: str):
    """-> (SegNetParams, extra_arrays, meta)."""
    arrays, meta = load_arrays(path)
    if "config" not in meta:
        raise DataFormatError(f"{path}: missing model config in checkpoint meta")
    config = SegNetConfig(**meta["config"])
    tensors = {}
    running = {}
    extra = {}
    for name, arr in arrays.items():
        if name.startswith("param."):
            tensors[name[6:]] = Tensor(arr, requires_grad=True)
        elif name.startswith("running."):
            running[name[8:]] = arr
        else:
            extra[name] = arr
    return SegNetParams(config, tensors, running), extra, meta
