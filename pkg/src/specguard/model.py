"""A desk-scale vision transformer built on the autograd engine.

Patch embedding, pre-norm blocks (LayerNorm -> multi-head attention ->
residual, LayerNorm -> GELU MLP -> residual), a final LayerNorm, mean pooling
over tokens and a linear head.  No class token.  Per-head projections are
stored as ``(H, d, D_h)`` stacks so each head's matrix is its own slice.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .attention import AttentionWeights
from .errors import ContractError, ShapeError
from .linalg import float_dtype

CHECKPOINT_MAGIC = b"SPECFORMER1"


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 32
    heads: int = 4
    layers: int = 2
    mlp_ratio: int = 2
    classes: int = 10

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ContractError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads:
            raise ContractError("embed_dim must equal heads * head_dim")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2


class VitParams:
    """Named parameter arrays plus the config that shaped them."""

    def __init__(self, config: VitConfig, tensors: dict):
        self.config = config
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "VitParams":
        return VitParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def leaves(self) -> dict:
        return {k: ag.leaf(v) for k, v in self.tensors.items()}

    def attention(self, layer: int) -> AttentionWeights:
        p = f"blocks.{layer}.attn."
        return AttentionWeights(self[p + "wq"], self[p + "wk"], self[p + "wv"], self[p + "wo"])


def _trunc_normal(rng, shape, std=0.02, dtype=np.float64):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while np.any(bad):
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def init_params(config: VitConfig, seed=0, dtype=None) -> VitParams:
    """Truncated-normal (std 0.02) projections, zero biases and positions."""
    dtype = float_dtype() if dtype is None else dtype
    rng = np.random.default_rng(seed)
    d, h, dh, n = config.embed_dim, config.heads, config.head_dim, config.n_tokens
    hidden = d * config.mlp_ratio
    t = {
        "patch.weight": _trunc_normal(rng, (config.patch_dim, d), dtype=dtype),
        "patch.bias": np.zeros(d, dtype),
        "pos": np.zeros((n, d), dtype),
    }
    for layer in range(config.layers):
        p = f"blocks.{layer}."
        t[p + "ln1.gain"] = np.ones(d, dtype)
        t[p + "ln1.bias"] = np.zeros(d, dtype)
        for kind in "qkv":
            t[p + f"attn.w{kind}"] = _trunc_normal(rng, (h, d, dh), dtype=dtype)
        t[p + "attn.wo"] = _trunc_normal(rng, (h * dh, d), dtype=dtype)
        t[p + "ln2.gain"] = np.ones(d, dtype)
        t[p + "ln2.bias"] = np.zeros(d, dtype)
        t[p + "mlp.w1"] = _trunc_normal(rng, (d, hidden), dtype=dtype)
        t[p + "mlp.b1"] = np.zeros(hidden, dtype)
        t[p + "mlp.w2"] = _trunc_normal(rng, (hidden, d), dtype=dtype)
        t[p + "mlp.b2"] = np.zeros(d, dtype)
    t["norm.gain"] = np.ones(d, dtype)
    t["norm.bias"] = np.zeros(d, dtype)
    t["head.weight"] = _trunc_normal(rng, (d, config.classes), dtype=dtype)
    t["head.bias"] = np.zeros(config.classes, dtype)
    return VitParams(config, t)


def patchify(images, config: VitConfig) -> ag.Node:
    """``(B, C, H, W) -> (B, N, C * p * p)``, differentiable in the images."""
    x = ag.as_node(images)
    if x.ndim != 4 or x.shape[1:] != (config.channels, config.image_size, config.image_size):
        raise ShapeError(f"expected images (B, {config.channels}, {config.image_size}, {config.image_size}), got {x.shape}")
    b = x.shape[0]
    g, p = config.image_size // config.patch_size, config.patch_size
    x = ag.reshape(x, (b, config.channels, g, p, g, p))
    x = ag.permute(x, (0, 2, 4, 1, 3, 5))
    return ag.reshape(x, (b, g * g, config.patch_dim))


def attention_block(x: ag.Node, t: dict, prefix: str, config: VitConfig, trace: dict | None = None) -> ag.Node:
    """Multi-head self-attention on ``x`` of shape ``(B, N, d)``."""
    b, n, d = x.shape
    h, dh = config.heads, config.head_dim
    if trace is not None:
        trace[prefix] = x.value
    x4 = ag.reshape(x, (b, 1, n, d))
    q = ag.matmul(x4, t[prefix + "wq"])                         # (B, H, N, D_h)
    k = ag.matmul(x4, t[prefix + "wk"])
    v = ag.matmul(x4, t[prefix + "wv"])
    scores = ag.scale(ag.matmul(q, ag.transpose(k)), 1.0 / np.sqrt(dh))
    attn = ag.row_softmax(scores)
    out = ag.matmul(attn, v)                                    # (B, H, N, D_h)
    out = ag.reshape(ag.permute(out, (0, 2, 1, 3)), (b, n, h * dh))
    return ag.matmul(out, t[prefix + "wo"])


def vit_forward(params: VitParams, images, leaves: dict | None = None, trace: dict | None = None) -> ag.Node:
    """Logits ``(B, classes)``.

    ``leaves`` supplies the parameter nodes to differentiate through; when
    omitted, parameters enter as constants.  ``trace`` (a dict) collects the
    input of every attention sublayer keyed by its parameter prefix.
    """
    cfg = params.config
    t = leaves if leaves is not None else {k: ag.Node(v) for k, v in params.items()}
    x = ag.add(ag.matmul(patchify(images, cfg), t["patch.weight"]), t["patch.bias"])
    x = ag.add(x, t["pos"])
    for layer in range(cfg.layers):
        p = f"blocks.{layer}."
        hn = ag.layer_norm(x, t[p + "ln1.gain"], t[p + "ln1.bias"])
        x = ag.add(x, attention_block(hn, t, p + "attn.", cfg, trace))
        hn = ag.layer_norm(x, t[p + "ln2.gain"], t[p + "ln2.bias"])
        hn = ag.gelu(ag.add(ag.matmul(hn, t[p + "mlp.w1"]), t[p + "mlp.b1"]))
        x = ag.add(x, ag.add(ag.matmul(hn, t[p + "mlp.w2"]), t[p + "mlp.b2"]))
    x = ag.layer_norm(x, t["norm.gain"], t["norm.bias"])
    pooled = ag.mean_pool(x, axis=1)
    return ag.add(ag.matmul(pooled, t["head.weight"]), t["head.bias"])


def classifier(params: VitParams):
    """Callable ``input node -> logits`` with frozen parameters (for attacks)."""
    consts = {k: ag.Node(v) for k, v in params.items()}
    return lambda x: vit_forward(params, x, consts)


def predict(params: VitParams, images, batch_size: int = 256) -> np.ndarray:
    out = []
    consts = {k: ag.Node(v) for k, v in params.items()}
    for s in range(0, len(images), batch_size):
        out.append(vit_forward(params, images[s:s + batch_size], consts).value)
    return np.concatenate(out) if out else np.zeros((0, params.config.classes))


class HeadView(NamedTuple):
    layer: int
    head: int
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray

    def as_weights(self) -> AttentionWeights:
        return AttentionWeights(self.wq[None], self.wk[None], self.wv[None])


def extract_attention_weights(params: VitParams) -> list[HeadView]:
    """Per-(layer, head) views that alias the trainable arrays."""
    out = []
    for layer in range(params.config.layers):
        p = f"blocks.{layer}.attn."
        wq, wk, wv = params[p + "wq"], params[p + "wk"], params[p + "wv"]
        for h in range(params.config.heads):
            out.append(HeadView(layer, h, wq[h], wk[h], wv[h]))
    return out


def penalized_weights(params_or_leaves, layers: int) -> dict:
    """``(layer, kind) -> Q/K/V head stack`` from a params object or leaf dict."""
    return {
        (layer, kind): params_or_leaves[f"blocks.{layer}.attn.w{kind}"]
        for layer in range(layers)
        for kind in "qkv"
    }


# ---------------------------------------------------------------------------
# checkpoint format: magic, u32 manifest length, JSON manifest, raw payloads

def checkpoint_bytes(params: VitParams, extra: dict | None = None) -> bytes:
    manifest = {
        "config": asdict(params.config),
        "extra": extra or {},
        "tensors": [],
    }
    payloads = []
    for name, arr in params.items():
        a = np.ascontiguousarray(arr)
        le = a.astype(a.dtype.newbyteorder("<"), copy=False)
        manifest["tensors"].append({"name": name, "dtype": le.dtype.str, "shape": list(a.shape)})
        payloads.append(le.tobytes())
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + b"".join(payloads)


class CheckpointError(ValueError):
    pass


def params_from_bytes(blob: bytes) -> tuple[VitParams, dict]:
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("bad checkpoint magic")
    off = len(CHECKPOINT_MAGIC)
    if len(blob) < off + 4:
        raise CheckpointError("truncated checkpoint header")
    (size,) = struct.unpack("<I", blob[off:off + 4])
    off += 4
    try:
        manifest = json.loads(blob[off:off + size])
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from None
    off += size
    config = VitConfig(**manifest["config"])
    tensors = {}
    for entry in manifest["tensors"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if off + nbytes > len(blob):
            raise CheckpointError(f"truncated payload for {entry['name']}")
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=off).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(dt.newbyteorder("="))
        off += nbytes
    if off != len(blob):
        raise CheckpointError("trailing bytes after payloads")
    params = VitParams(config, tensors)
    expected = init_params(config, dtype=np.float64)
    for name, arr in expected.items():
        if name not in tensors or tensors[name].shape != arr.shape:
            raise CheckpointError(f"tensor {name!r} missing or misshapen")
    return params, manifest.get("extra", {})


def save_checkpoint(path, params: VitParams, extra: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params, extra))


def load_checkpoint(path) -> tuple[VitParams, dict]:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())
