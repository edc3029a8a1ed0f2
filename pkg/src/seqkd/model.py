"""Bidirectional transformer encoder shared by teacher and student.

Parameters live in a plain ``dict[str, Tensor]`` keyed by the names returned
from :func:`param_shapes`, in that order. Layer ``i`` is post-LN::

    H = LN(H + Dropout(MultiHead(H)))
    H = LN(H + Dropout(FFN(H)))
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensorcore as tc
from .corpus import PAD
from .errors import DataError, LoadError, ParameterError
from .tensorcore import Tensor

Params = dict[str, Tensor]

CHECKPOINT_MAGIC = b"SRKD1"
CHECKPOINT_VERSION = 1
INIT_STD = 0.02
LN_EPS = 1e-12
PAD_KEY_BIAS = -1e9
INIT_MODES = ("scratch_all", "scratch_embed", "scratch_layer", "from_checkpoint")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    hidden_dim: int = 256
    num_heads: int = 4
    vocab_size: int = 3
    max_len: int = 50
    ffn_dim: int | None = None
    dropout_rate: float = 0.1
    tie_output_to_embedding: bool = True
    activation: str = "gelu"

    def __post_init__(self):
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.hidden_dim)
        for name in ("num_layers", "hidden_dim", "num_heads", "vocab_size", "max_len", "ffn_dim"):
            if int(getattr(self, name)) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden_dim % self.num_heads:
            raise ParameterError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ParameterError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.activation not in ("gelu", "relu"):
            raise ParameterError(f"activation must be gelu or relu, got {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in known})


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes, in checkpoint order."""
    d, f, V, n = config.hidden_dim, config.ffn_dim, config.vocab_size, config.max_len
    shapes = {
        "embed.token": (V, d),
        "embed.position": (n, d),
        "embed.segment": (d,),
    }
    for i in range(config.num_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "attn.query": (d, d),
            p + "attn.key": (d, d),
            p + "attn.value": (d, d),
            p + "attn.output": (d, d),
            p + "ln1.gamma": (d,),
            p + "ln1.beta": (d,),
            p + "ffn.w1": (d, f),
            p + "ffn.b1": (f,),
            p + "ffn.w2": (f, d),
            p + "ffn.b2": (d,),
            p + "ln2.gamma": (d,),
            p + "ln2.beta": (d,),
        })
    if not config.tie_output_to_embedding:
        shapes["head.weight"] = (d, V)
    shapes["head.bias"] = (V,)
    return shapes


def param_group(name: str) -> str:
    """``embed``, ``layers`` or ``head``: the unit the scratch ablations reset."""
    return name.split(".", 1)[0]


def _truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    x = rng.normal(0.0, std, size=shape)
    while True:
        bad = np.abs(x) > 2 * std
        if not bad.any():
            return x
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))


def _scratch(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = tc.make_rng(seed, 0x1417)
    out = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "gamma":
            out[name] = np.ones(shape)
        elif leaf in ("beta", "bias", "b1", "b2"):
            out[name] = np.zeros(shape)
        else:
            out[name] = _truncated_normal(rng, shape)
    return out


def _adapt_rows(name: str, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Copy a checkpoint tensor whose leading (vocab or position) axis may differ.

    Extra checkpoint rows are dropped; rows the checkpoint lacks keep their
    scratch initialisation. Any other axis mismatch is an error.
    """
    if src.shape == dst.shape:
        return src.copy()
    axis = 1 if name == "head.weight" else 0
    resizable = name in ("embed.token", "embed.position", "head.bias", "head.weight")
    other_src = src.shape[:axis] + src.shape[axis + 1:]
    other_dst = dst.shape[:axis] + dst.shape[axis + 1:]
    if not resizable or src.ndim != dst.ndim or other_src != other_dst:
        raise LoadError(f"tensor {name!r}: checkpoint shape {src.shape} vs config {dst.shape}")
    out = dst.copy()
    k = min(src.shape[axis], dst.shape[axis])
    index = [slice(None)] * dst.ndim
    index[axis] = slice(0, k)
    out[tuple(index)] = src[tuple(index)]
    return out


def init_params(
    config: ModelConfig, seed: int = 0, mode: str = "scratch_all", checkpoint=None
) -> Params:
    """Initialise parameters, optionally reusing parts of a checkpoint.

    ``scratch_all`` draws everything fresh. ``scratch_embed`` and
    ``scratch_layer`` redraw the embedding group or the encoder layers and copy
    the rest from ``checkpoint``; ``from_checkpoint`` copies everything.
    ``checkpoint`` is a path or a ``(params, config)`` pair.
    """
    if mode not in INIT_MODES:
        raise ParameterError(f"unknown init mode {mode!r}; expected one of {INIT_MODES}")
    arrays = _scratch(config, seed)
    if mode != "scratch_all":
        if checkpoint is None:
            raise ParameterError(f"init mode {mode!r} needs a checkpoint")
        if isinstance(checkpoint, (str, Path)):
            ck_params, _ = load_checkpoint(checkpoint)
        else:
            ck_params = checkpoint[0]
        fresh = {"scratch_embed": "embed", "scratch_layer": "layers"}.get(mode)
        for name in arrays:
            if param_group(name) == fresh:
                continue
            if name not in ck_params:
                raise LoadError(f"tensor {name!r} missing from checkpoint")
            arrays[name] = _adapt_rows(name, ck_params[name].data, arrays[name])
    return {name: Tensor(a, requires_grad=True, name=name) for name, a in arrays.items()}


def copy_params(params: Params) -> Params:
    return {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in params.items()}


def validate_params(params: Params, config: ModelConfig) -> None:
    expected = param_shapes(config)
    for name, shape in expected.items():
        if name not in params:
            raise LoadError(f"tensor {name!r} missing")
        if params[name].shape != shape:
            raise LoadError(f"tensor {name!r}: shape {params[name].shape}, config wants {shape}")
    extra = set(params) - set(expected)
    if extra:
        raise LoadError(f"unexpected tensors {sorted(extra)}")


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def embed(inputs: np.ndarray, params: Params, config: ModelConfig, train_mode=False, rng=None):
    """Token + position + segment embedding, then dropout in train mode."""
    inputs = np.asarray(inputs)
    n = inputs.shape[-1]
    if n > config.max_len:
        raise DataError(f"sequence length {n} exceeds max_len {config.max_len}")
    if inputs.size and (inputs.min() < 0 or inputs.max() >= config.vocab_size):
        raise DataError(f"token id outside [0, {config.vocab_size})")
    x = tc.embedding_gather(params["embed.token"], inputs)
    pos = tc.embedding_gather(params["embed.position"], np.arange(n))
    x = tc.add(tc.add(x, pos), params["embed.segment"])
    return tc.dropout(x, config.dropout_rate, rng, train_mode)


def attention(q, k, v, key_mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over ``[B, h, n, d_k]`` tensors.

    ``key_mask`` is a boolean ``[B, n]`` array, false at PAD keys.
    """
    dk = q.shape[-1]
    scores = tc.scale(tc.matmul(q, tc.transpose_last_two(k)), 1.0 / math.sqrt(dk))
    if key_mask is not None:
        bias = np.where(key_mask, 0.0, PAD_KEY_BIAS)[:, None, None, :]
        scores = tc.add(scores, bias)
    return tc.matmul(tc.softmax_rows(scores), v)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, n, d = x.shape
    return tc.permute(tc.reshape(x, (B, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, h, n, dk = x.shape
    return tc.reshape(tc.permute(x, (0, 2, 1, 3)), (B, n, h * dk))


def encoder_layer(h: Tensor, params: Params, i: int, config: ModelConfig, key_mask, train_mode, rng):
    p = f"layers.{i}."
    heads = config.num_heads
    q = _split_heads(tc.matmul(h, params[p + "attn.query"]), heads)
    k = _split_heads(tc.matmul(h, params[p + "attn.key"]), heads)
    v = _split_heads(tc.matmul(h, params[p + "attn.value"]), heads)
    a = tc.matmul(_merge_heads(attention(q, k, v, key_mask)), params[p + "attn.output"])
    a = tc.dropout(a, config.dropout_rate, rng, train_mode)
    h = tc.layer_norm(tc.add(h, a), params[p + "ln1.gamma"], params[p + "ln1.beta"], LN_EPS)
    act = tc.gelu if config.activation == "gelu" else tc.relu
    f = act(tc.add(tc.matmul(h, params[p + "ffn.w1"]), params[p + "ffn.b1"]))
    f = tc.add(tc.matmul(f, params[p + "ffn.w2"]), params[p + "ffn.b2"])
    f = tc.dropout(f, config.dropout_rate, rng, train_mode)
    return tc.layer_norm(tc.add(h, f), params[p + "ln2.gamma"], params[p + "ln2.beta"], LN_EPS)


def encode(inputs, params: Params, config: ModelConfig, train_mode=False, rng=None) -> Tensor:
    """Hidden states ``[B, n, d]`` after the last encoder layer."""
    inputs = np.asarray(inputs)
    if inputs.ndim == 1:
        inputs = inputs[None, :]
    key_mask = inputs != PAD
    h = embed(inputs, params, config, train_mode, rng)
    for i in range(config.num_layers):
        h = encoder_layer(h, params, i, config, key_mask, train_mode, rng)
    return h


def output_head(hidden: Tensor, params: Params, config: ModelConfig) -> Tensor:
    if config.tie_output_to_embedding:
        weight = tc.transpose_last_two(params["embed.token"])
    else:
        weight = params["head.weight"]
    return tc.add(tc.matmul(hidden, weight), params["head.bias"])


def forward(inputs, params: Params, config: ModelConfig, train_mode=False, rng=None) -> Tensor:
    """Per-position vocabulary logits ``[B, n, V]``."""
    return output_head(encode(inputs, params, config, train_mode, rng), params, config)


def logits_at(inputs, positions, params: Params, config: ModelConfig, train_mode=False, rng=None):
    """Logits only at the flat positions ``positions`` of ``inputs`` (``[M, V]``).

    Cheaper than :func:`forward` when few positions matter (masked targets,
    the final MASK slot at inference).
    """
    h = encode(inputs, params, config, train_mode, rng)
    B, n, d = h.shape
    rows = tc.embedding_gather(tc.reshape(h, (B * n, d)), np.asarray(positions))
    return output_head(rows, params, config)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _dump_header(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(params: Params, config: ModelConfig, path: str | Path) -> None:
    """Write ``SRKD1`` | u32 header length | JSON header | float64 tensors.

    Byte offsets in the manifest are relative to the start of the tensor data,
    which itself starts at an 8-byte aligned file offset (the header is padded
    with trailing spaces).
    """
    validate_params(params, config)
    manifest, offset = [], 0
    for name in param_shapes(config):
        shape = list(params[name].shape)
        manifest.append({"name": name, "shape": shape, "byte_offset": offset})
        offset += 8 * int(np.prod(shape, dtype=np.int64))
    header = _dump_header({
        "format_version": CHECKPOINT_VERSION,
        "config": config.to_json(),
        "tensors": manifest,
    })
    prefix = len(CHECKPOINT_MAGIC) + 4
    header += b" " * ((-(prefix + len(header))) % 8)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for name in param_shapes(config):
            fh.write(np.ascontiguousarray(params[name].data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[Params, ModelConfig]:
    raw = Path(path).read_bytes()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise LoadError(f"{path}: bad magic {raw[:5]!r}")
    if len(raw) < 9:
        raise LoadError(f"{path}: truncated")
    (hlen,) = struct.unpack("<I", raw[5:9])
    start = 9 + hlen
    if len(raw) < start:
        raise LoadError(f"{path}: truncated header")
    try:
        header = json.loads(raw[9:start].decode("utf-8"))
        config = ModelConfig.from_json(header["config"])
        manifest = header["tensors"]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise LoadError(f"{path}: bad header ({exc})") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise LoadError(f"{path}: unsupported format_version {header.get('format_version')}")
    expected = param_shapes(config)
    params: Params = {}
    end = start
    for entry in manifest:
        name, shape, off = entry["name"], tuple(entry["shape"]), int(entry["byte_offset"])
        if name not in expected:
            raise LoadError(f"{path}: unexpected tensor {name!r}")
        if shape != expected[name]:
            raise LoadError(f"{path}: tensor {name!r} has shape {shape}, config wants {expected[name]}")
        if off % 8:
            raise LoadError(f"{path}: tensor {name!r} offset {off} not 8-byte aligned")
        count = int(np.prod(shape, dtype=np.int64))
        lo, hi = start + off, start + off + 8 * count
        if hi > len(raw):
            raise LoadError(f"{path}: truncated data for tensor {name!r}")
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=lo).reshape(shape).astype(np.float64)
        params[name] = Tensor(data, requires_grad=True, name=name)
        end = max(end, hi)
    missing = set(expected) - set(params)
    if missing:
        raise LoadError(f"{path}: missing tensors {sorted(missing)}")
    if end != len(raw):
        raise LoadError(f"{path}: {len(raw) - end} trailing bytes")
    return {name: params[name] for name in expected}, config
