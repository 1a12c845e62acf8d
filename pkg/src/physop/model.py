"""Small multimodal operator network G_theta(u0, s)(t, x).

Two encoders (initial-condition patches and symbolic residual tokens) feed a
fusion stack whose output is the key/value context of a coordinate decoder.
Decoder queries are built from ``(t, x)`` with periodic features and only
cross-attend to the context, so every output ``U[b, m]`` depends on query
``m`` alone.

All arithmetic goes through :mod:`physop.ad.ops`, so the same code runs on
plain arrays, taped tensors and (nested) forward-mode duals.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from physop.ad import ops
from physop.ad.ops import shape_of
from physop.ad.tensor import ShapeError, Tensor
from physop.errors import ConfigError
from physop import symbolic as sym

PAD = "<pad>"
CONST = "<const>"
VOCAB = (PAD, CONST) + tuple(sym.ARITY) + sym.CHANNELS
VOCAB_INDEX = {name: i for i, name in enumerate(VOCAB)}
MASK_VALUE = -1e9


class VocabularyError(ValueError):
    pass


@dataclass
class ModelConfig:
    embed_dim: int = 64
    patch: int = 8
    n_samples: int = 128
    data_layers: int = 2
    symbol_layers: int = 2
    fusion_layers: int = 1
    decoder_layers: int = 2
    heads: int = 4
    k_per: int = 4
    ffn_mult: int = 2
    max_symbols: int = 48
    seed: int = 0
    init_std: float = 0.02

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.k_per < 1:
            raise ConfigError("k_per must be >= 1")
        if self.n_samples % self.patch:
            raise ConfigError(f"patch {self.patch} does not divide {self.n_samples} samples")

    @property
    def n_patches(self):
        return self.n_samples // self.patch

    @property
    def n_features(self):
        return 1 + 2 * self.k_per


# ---------------------------------------------------------------------------
# parameters


def _block_shapes(prefix, E, F):
    return [
        (f"{prefix}.wq", (E, E)),
        (f"{prefix}.wk", (E, E)),
        (f"{prefix}.wv", (E, E)),
        (f"{prefix}.wo", (E, E)),
        (f"{prefix}.ln1_g", (E,)),
        (f"{prefix}.ln1_b", (E,)),
        (f"{prefix}.w1", (E, F)),
        (f"{prefix}.b1", (F,)),
        (f"{prefix}.w2", (F, E)),
        (f"{prefix}.b2", (E,)),
        (f"{prefix}.ln2_g", (E,)),
        (f"{prefix}.ln2_b", (E,)),
    ]


def param_layout(cfg: ModelConfig):
    E, F = cfg.embed_dim, cfg.embed_dim * cfg.ffn_mult
    layout = [
        ("data.patch_w", (cfg.patch, E)),
        ("data.patch_b", (E,)),
        ("data.pos", (cfg.n_patches, E)),
    ]
    for i in range(cfg.data_layers):
        layout += _block_shapes(f"data.L{i}", E, F)
    layout += [
        ("sym.type", (len(VOCAB), E)),
        ("sym.const_dir", (E,)),
        ("sym.pos", (cfg.max_symbols, E)),
    ]
    for i in range(cfg.symbol_layers):
        layout += _block_shapes(f"sym.L{i}", E, F)
    for i in range(cfg.fusion_layers):
        layout += _block_shapes(f"fuse.L{i}", E, F)
    layout.append(("query.w", (cfg.n_features, E)))
    for i in range(cfg.decoder_layers):
        layout += _block_shapes(f"dec.L{i}", E, F)
    layout += [("head.w", (E, 1)), ("head.b", (1,))]
    return layout


def _truncated_normal(rng, shape, std):
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2
    return z * std


class ModelParams:
    """Flat parameter vector with named views that alias it."""

    def __init__(self, cfg: ModelConfig, flat=None):
        self.cfg = cfg
        self.layout = param_layout(cfg)
        self.offsets = {}
        n = 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            self.offsets[name] = (n, n + size, shape)
            n += size
        self.size = n
        if flat is None:
            flat = self._init()
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (n,):
            raise ShapeError(f"expected {n} parameters, got {flat.shape}")
        self.flat = np.array(flat)
        self.views = {
            name: self.flat[lo:hi].reshape(shape) for name, (lo, hi, shape) in self.offsets.items()
        }

    def _init(self):
        rng = np.random.default_rng(self.cfg.seed)
        flat = np.empty(sum(int(np.prod(s)) for _, s in self.layout))
        i = 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            leaf = name.rsplit(".", 1)[1]
            if leaf.endswith("_g"):
                vals = np.ones(size)
            elif leaf.endswith("_b") or leaf in ("b1", "b2", "patch_b"):
                vals = np.zeros(size)
            elif name == "head.b":
                vals = np.full(size, 0.5)  # middle of the normalized range
            else:
                vals = _truncated_normal(rng, size, self.cfg.init_std)
            flat[i : i + size] = vals
            i += size
        return flat

    def __getitem__(self, name):
        return self.views[name]

    def names(self):
        return [name for name, _ in self.layout]

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, self.flat.copy())

    def leaves(self):
        """Fresh differentiable leaves, one per named view (they share memory)."""
        return {name: Tensor(v, requires_grad=True) for name, v in self.views.items()}

    def flatten_grads(self, grads: dict) -> np.ndarray:
        out = np.zeros(self.size)
        for name, (lo, hi, _) in self.offsets.items():
            g = grads.get(name)
            if g is not None:
                out[lo:hi] = np.ravel(ops.value_of(g))
        return out


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"PMCK"


def save_checkpoint(path, params: ModelParams, iteration: int = 0, extra=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "config": asdict(params.cfg),
        "seed": params.cfg.seed,
        "iteration": int(iteration),
        "tensors": [[name, list(shape)] for name, shape in params.layout],
        "extra": extra or {},
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(params.flat.astype("<f8").tobytes())
    return path


def load_checkpoint(path):
    """Returns ``(params, header)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise ConfigError(f"{path} is not a checkpoint")
    (n,) = struct.unpack_from("<Q", raw, 4)
    header = json.loads(raw[12 : 12 + n])
    cfg = ModelConfig(**header["config"])
    flat = np.frombuffer(raw, dtype="<f8", offset=12 + n).astype(np.float64)
    params = ModelParams(cfg, flat)
    if [[a, list(b)] for a, b in params.layout] != header["tensors"]:
        raise ConfigError("checkpoint tensor index does not match its config")
    return params, header


# ---------------------------------------------------------------------------
# symbols


def symbol_tokens(item):
    """``(ids, values)`` for one residual; constants collapse to one token."""
    if isinstance(item, sym.PdeExpression):
        tree = item.tree
    elif isinstance(item, sym.Expr):
        tree = item
    else:
        try:
            tree = sym.parse(item)
        except sym.MalformedExpression as exc:
            raise VocabularyError(str(exc)) from None
    ids, vals = [], []

    def walk(node):
        if node.kind == "constant":
            ids.append(VOCAB_INDEX[CONST])
            vals.append(node.value)
            return
        if node.name not in VOCAB_INDEX:
            raise VocabularyError(f"token {node.name!r} not in vocabulary")
        ids.append(VOCAB_INDEX[node.name])
        vals.append(0.0)
        for c in node.children:
            walk(c)

    walk(tree)
    return ids, vals


def pack_symbols(items, max_len=None):
    """Pad a batch of residuals; returns ids, values and a boolean pad mask."""
    seqs = [symbol_tokens(it) for it in items]
    L = max(len(s[0]) for s in seqs)
    if max_len is not None and L > max_len:
        raise VocabularyError(f"symbol sequence of length {L} exceeds {max_len}")
    B = len(seqs)
    ids = np.zeros((B, L), dtype=np.int64)
    vals = np.zeros((B, L))
    pad = np.ones((B, L), dtype=bool)
    for b, (i, v) in enumerate(seqs):
        ids[b, : len(i)] = i
        vals[b, : len(v)] = v
        pad[b, : len(i)] = False
    return ids, vals, pad


# ---------------------------------------------------------------------------
# layers


def _split_heads(x, H):
    # (..., L, E) -> (..., H, L, E/H)
    shp = shape_of(x)
    x = ops.reshape(x, shp[:-1] + (H, shp[-1] // H))
    nd = len(shp) + 1
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return ops.transpose(x, axes)


def _merge_heads(x):
    shp = shape_of(x)
    nd = len(shp)
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    x = ops.transpose(x, axes)
    shp = shape_of(x)
    return ops.reshape(x, shp[:-2] + (shp[-2] * shp[-1],))


def attention(xq, xkv, w, prefix, H, mask=None, kv=None):
    """Multi-head attention of ``xq`` over ``xkv``.

    ``mask`` is an additive array broadcastable to ``(B, H, Lq, Lk)``.
    ``kv`` may carry precomputed split-head keys and values.
    """
    E = shape_of(xq)[-1]
    q = _split_heads(ops.matmul(xq, w[f"{prefix}.wq"]), H)
    if kv is None:
        kv = project_kv(xkv, w, prefix, H)
    k, v = kv
    s = ops.mul(ops.matmul(q, ops.swapaxes(k)), 1.0 / math.sqrt(E // H))
    if mask is not None:
        s = ops.add(s, mask)
    a = ops.softmax(s, axis=-1)
    return ops.matmul(_merge_heads(ops.matmul(a, v)), w[f"{prefix}.wo"])


def project_kv(x, w, prefix, H):
    return (
        _split_heads(ops.matmul(x, w[f"{prefix}.wk"]), H),
        _split_heads(ops.matmul(x, w[f"{prefix}.wv"]), H),
    )


def _ffn(x, w, prefix):
    h = ops.tanh(ops.add(ops.matmul(x, w[f"{prefix}.w1"]), w[f"{prefix}.b1"]))
    return ops.add(ops.matmul(h, w[f"{prefix}.w2"]), w[f"{prefix}.b2"])


def block(x, ctx, w, prefix, H, mask=None, kv=None):
    """Post-LN attention + feed-forward block (self-attention when ctx is x)."""
    x = ops.add(x, attention(x, ctx, w, prefix, H, mask, kv))
    x = ops.layer_norm(x, w[f"{prefix}.ln1_g"], w[f"{prefix}.ln1_b"])
    x = ops.add(x, _ffn(x, w, prefix))
    return ops.layer_norm(x, w[f"{prefix}.ln2_g"], w[f"{prefix}.ln2_b"])


# ---------------------------------------------------------------------------
# network


def query_features(t, x, k_per):
    """``[t, sin(2 pi k x), cos(2 pi k x) for k = 1..k_per]`` on the last axis."""
    feats = [t]
    x = ops.mod1(x)  # x and x + 1 give bit-identical features
    for k in range(1, k_per + 1):
        arg = ops.mul(x, 2 * np.pi * k)
        feats += [ops.sin(arg), ops.cos(arg)]
    return ops.stack(feats, axis=-1)


def embed_query(t, x, w, k_per):
    return ops.matmul(query_features(t, x, k_per), w["query.w"])


@dataclass
class Context:
    tokens: object  # B x Lc x E
    mask: np.ndarray  # additive, B x 1 x 1 x Lc

    @property
    def batch(self):
        return shape_of(self.tokens)[0]

    def select(self, rows) -> "Context":
        rows = np.asarray(rows)
        return Context(ops.getitem(self.tokens, rows), self.mask[rows])


class OperatorNet:
    """Stateless forward functions bound to a config; weights are passed in.

    ``w`` maps parameter names to arrays or tensors, typically
    ``ModelParams.views`` (plain evaluation) or ``ModelParams.leaves()``
    (differentiable).
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg

    def init_params(self, seed=None) -> ModelParams:
        cfg = self.cfg if seed is None else ModelConfig(**dict(asdict(self.cfg), seed=seed))
        return ModelParams(cfg)

    def encode_data(self, u0, w):
        cfg = self.cfg
        u0 = np.asarray(ops.value_of(u0), dtype=np.float64)
        if u0.ndim == 1:
            u0 = u0[None]
        if u0.shape[-1] != cfg.n_samples:
            raise ShapeError(f"expected {cfg.n_samples} IC samples, got {u0.shape[-1]}")
        patches = u0.reshape(u0.shape[0], cfg.n_patches, cfg.patch)
        x = ops.add(ops.add(ops.matmul(patches, w["data.patch_w"]), w["data.patch_b"]), w["data.pos"])
        for i in range(cfg.data_layers):
            x = block(x, x, w, f"data.L{i}", cfg.heads)
        return x

    def encode_symbols(self, items, w):
        """Returns ``(tokens B x L x E, additive pad mask B x 1 x 1 x L)``."""
        cfg = self.cfg
        ids, vals, pad = pack_symbols(items, cfg.max_symbols)
        B, L = ids.shape
        onehot = np.zeros((B, L, len(VOCAB)))
        onehot[np.arange(B)[:, None], np.arange(L)[None], ids] = 1.0
        x = ops.matmul(onehot, w["sym.type"])
        x = ops.add(x, ops.mul(vals[..., None], w["sym.const_dir"]))
        x = ops.add(x, ops.getitem(w["sym.pos"], slice(0, L)))
        mask = np.where(pad, MASK_VALUE, 0.0)[:, None, None, :]
        for i in range(cfg.symbol_layers):
            x = block(x, x, w, f"sym.L{i}", cfg.heads, mask)
        return x, mask

    def fuse(self, data_tokens, sym_tokens, sym_mask, w) -> Context:
        cfg = self.cfg
        B, Ld = shape_of(data_tokens)[:2]
        x = ops.concat([data_tokens, sym_tokens], axis=1)
        mask = np.concatenate([np.zeros((B, 1, 1, Ld)), sym_mask], axis=-1)
        for i in range(cfg.fusion_layers):
            x = block(x, x, w, f"fuse.L{i}", cfg.heads, mask)
        return Context(x, mask)

    def encode(self, u0, symbols, w) -> Context:
        u0 = np.asarray(ops.value_of(u0))
        if u0.ndim == 1:
            u0 = u0[None]
        if len(symbols) != u0.shape[0]:
            raise ShapeError(f"{u0.shape[0]} initial conditions but {len(symbols)} symbols")
        d = self.encode_data(u0, w)
        s, m = self.encode_symbols(symbols, w)
        return self.fuse(d, s, m, w)

    def decode(self, ctx: Context, t, x, w):
        """``U`` of shape ``B x M`` for query coordinates ``t, x`` of shape ``(M,)``."""
        cfg = self.cfg
        if shape_of(t) != shape_of(x) or len(shape_of(t)) != 1:
            raise ShapeError(f"t and x must be matching 1-d arrays, got {shape_of(t)}, {shape_of(x)}")
        h = embed_query(t, x, w, cfg.k_per)  # M x E, broadcast over B below
        for i in range(cfg.decoder_layers):
            prefix = f"dec.L{i}"
            kv = project_kv(ctx.tokens, w, prefix, cfg.heads)
            h = block(h, None, w, prefix, cfg.heads, ctx.mask, kv)
        if len(shape_of(h)) == 2:  # no decoder layers: still broadcast over B
            h = ops.broadcast_to(h, (ctx.batch,) + shape_of(h))
        out = ops.add(ops.matmul(h, w["head.w"]), w["head.b"])
        B, M = shape_of(out)[:2]
        return ops.reshape(out, (B, M))

    def forward(self, u0, symbols, t, x, w):
        return self.decode(self.encode(u0, symbols, w), t, x, w)

    def __call__(self, params: ModelParams, u0, symbols, t, x):
        """Plain numpy evaluation with the current parameter values."""
        out = self.forward(u0, symbols, np.asarray(t, float), np.asarray(x, float), params.views)
        return ops.value_of(out)


class Bound:
    """A network together with one set of weights, in the shape losses expect."""

    def __init__(self, net: OperatorNet, w):
        self.net = net
        self.w = w.views if isinstance(w, ModelParams) else w

    def encode(self, u0, exprs):
        return self.net.encode(u0, exprs, self.w)

    def decode(self, ctx, t, x):
        return self.net.decode(ctx, t, x, self.w)
