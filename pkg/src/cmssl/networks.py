"""Learnable components: video/iframe/motion backbones, the future-feature
Transformer, and the four projection heads, bundled with checkpoint IO.

Backbones are small conv stacks (conv -> channel layer norm -> relu) sized
for 32x32 inputs; the geometry of every feature map is derived from
ModelConfig so shape contracts can be asserted up front. Flattening order
for transformer sequences is t-major, then h, then w (plain C-order
reshape), which checkpoint portability depends on.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class TransformerConfig:
    encoder_layers: int = 2
    decoder_layers: int = 4
    width: int = 32
    heads: int = 4
    ff_width: int = 64

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")


@dataclass
class ModelConfig:
    input_size: int = 32
    clip_len: int = 8
    mv_len: int = 8
    v_channels: tuple = (16, 32, 32)
    i_channels: tuple = (16, 32, 32)
    m_channels: tuple = (16, 32, 32)
    embed_dim: int = 32
    head_hidden: int = 64
    transformer: TransformerConfig = field(default_factory=TransformerConfig)

    def __post_init__(self):
        if isinstance(self.transformer, dict):
            self.transformer = TransformerConfig(**self.transformer)
        self.v_channels = tuple(self.v_channels)
        self.i_channels = tuple(self.i_channels)
        self.m_channels = tuple(self.m_channels)
        if self.input_size % 8:
            raise ValueError(f"input_size must be divisible by 8, got {self.input_size}")
        if self.clip_len % 4 or self.mv_len % 4:
            raise ValueError("clip_len and mv_len must be divisible by 4")

    # clip features: two stride-2 stages in time and space
    @property
    def clip_feat_shape(self):
        return (self.v_channels[-1], self.clip_len // 4, self.input_size // 4, self.input_size // 4)

    # I-frame features: two spatial stride-2 stages
    @property
    def iframe_feat_shape(self):
        return (self.i_channels[-1], self.input_size // 4, self.input_size // 4)

    # motion features: two stride-2 stages in time, three in space
    @property
    def motion_feat_shape(self):
        return (self.m_channels[-1], self.mv_len // 4, self.input_size // 8, self.input_size // 8)

    @property
    def n_motion_points(self):
        c, t, h, w = self.motion_feat_shape
        return t * h * w


# paper-scale preset kept for interface parity; "desk" is what tests exercise
PRESETS = {
    "desk": lambda: ModelConfig(),
    "large": lambda: ModelConfig(
        v_channels=(64, 128, 256),
        i_channels=(64, 128, 256),
        m_channels=(64, 128, 256),
        embed_dim=512,
        head_hidden=2048,
        transformer=TransformerConfig(width=512, heads=8, ff_width=2048),
    ),
}


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class ConvStack:
    """conv -> layer norm over channels -> relu, repeated; 2-D or 3-D."""

    def __init__(self, name, rng, in_channels, channels, strides, nd, kernels=None):
        self.name = name
        self.nd = nd
        self.layers = []
        kernels = kernels or [(3,) * nd] * len(channels)
        c_prev = in_channels
        for c, s, k in zip(channels, strides, kernels):
            kernel = Tensor(_he(rng, (c, c_prev) + tuple(k), c_prev * int(np.prod(k))), requires_grad=True)
            gshape = (1, c) + (1,) * nd
            gamma = Tensor(np.ones(gshape), requires_grad=True)
            beta = Tensor(np.zeros(gshape), requires_grad=True)
            self.layers.append((kernel, gamma, beta, s, tuple(d // 2 for d in k)))
            c_prev = c

    def forward(self, x: Tensor) -> Tensor:
        conv = T.conv3d if self.nd == 3 else T.conv2d
        last = len(self.layers) - 1
        for i, (kernel, gamma, beta, stride, pad) in enumerate(self.layers):
            x = conv(x, kernel, stride=stride, padding=pad)
            x = T.layer_norm(x, gamma, beta, axis=1)
            # leaky slope keeps every channel trainable at desk batch sizes;
            # the final stage ends linear so pooled embeddings keep both signs
            if i != last:
                x = T.leaky_relu(x)
        return x

    def params(self) -> dict:
        out = {}
        for i, (kernel, gamma, beta, _, _) in enumerate(self.layers):
            out[f"{self.name}.conv{i}.kernel"] = kernel
            out[f"{self.name}.conv{i}.gamma"] = gamma
            out[f"{self.name}.conv{i}.beta"] = beta
        return out


class MlpHead:
    """Two affine layers with one relu; optionally applied per feature point."""

    def __init__(self, name, rng, in_dim, hidden, out_dim):
        self.name = name
        self.w1 = Tensor(_he(rng, (in_dim, hidden), in_dim), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, out_dim)), requires_grad=True)
        self.b2 = Tensor(np.zeros(out_dim), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        """(B, in_dim) -> (B, out_dim)."""
        h = T.leaky_relu(T.add(T.matmul(x, self.w1), self.b1))
        return T.add(T.matmul(h, self.w2), self.b2)

    def forward_points(self, x: Tensor) -> Tensor:
        """(B, in_dim, N) -> (B, out_dim, N): each column projected independently."""
        xt = T.transpose(x, (0, 2, 1))
        h = T.leaky_relu(T.add(T.matmul(xt, self.w1), self.b1))
        out = T.add(T.matmul(h, self.w2), self.b2)
        return T.transpose(out, (0, 2, 1))

    def params(self) -> dict:
        return {
            f"{self.name}.w1": self.w1,
            f"{self.name}.b1": self.b1,
            f"{self.name}.w2": self.w2,
            f"{self.name}.b2": self.b2,
        }


class _Linear:
    def __init__(self, name, rng, d_in, d_out, std=None):
        std = np.sqrt(1.0 / d_in) if std is None else std
        self.name = name
        self.w = Tensor(rng.normal(0.0, std, size=(d_in, d_out)), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.w), self.b)

    def params(self):
        return {f"{self.name}.w": self.w, f"{self.name}.b": self.b}


class _LayerNormParams:
    def __init__(self, name, dim):
        self.name = name
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, axis=-1)

    def params(self):
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}


def _attention(q, k, v, heads, attn_sink=None):
    """Multi-head scaled dot-product attention over (B, S, D) tensors."""
    B, Sq, D = q.shape
    Sk = k.shape[1]
    dh = D // heads
    def split(x, S):
        return T.reshape(T.transpose(T.reshape(x, (B, S, heads, dh)), (0, 2, 1, 3)), (B * heads, S, dh))
    qh, kh, vh = split(q, Sq), split(k, Sk), split(v, Sk)
    scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    if attn_sink is not None:
        attn_sink.append(attn.data.copy())
    out = T.matmul(attn, vh)
    out = T.reshape(T.transpose(T.reshape(out, (B, heads, Sq, dh)), (0, 2, 1, 3)), (B, Sq, D))
    return out


class _AttentionBlock:
    def __init__(self, name, rng, d):
        self.q = _Linear(f"{name}.q", rng, d, d)
        self.k = _Linear(f"{name}.k", rng, d, d)
        self.v = _Linear(f"{name}.v", rng, d, d)
        self.o = _Linear(f"{name}.o", rng, d, d)

    def __call__(self, x_q, x_kv, heads, attn_sink=None):
        return self.o(_attention(self.q(x_q), self.k(x_kv), self.v(x_kv), heads, attn_sink))

    def params(self):
        out = {}
        for lin in (self.q, self.k, self.v, self.o):
            out.update(lin.params())
        return out


class _FeedForward:
    def __init__(self, name, rng, d, ff):
        self.lin1 = _Linear(f"{name}.lin1", rng, d, ff, std=np.sqrt(2.0 / d))
        self.lin2 = _Linear(f"{name}.lin2", rng, ff, d)

    def __call__(self, x):
        return self.lin2(T.leaky_relu(self.lin1(x)))

    def params(self):
        return {**self.lin1.params(), **self.lin2.params()}


class Transformer:
    """Pre-LN encoder-decoder predicting motion feature maps from clip
    feature maps, both flattened t-major/h/w into token sequences."""

    def __init__(self, rng, model_cfg: ModelConfig):
        cfg = model_cfg.transformer
        self.cfg = cfg
        c1, t1, h1, w1 = model_cfg.clip_feat_shape
        c3, t3, h3, w3 = model_cfg.motion_feat_shape
        self.in_shape = (c1, t1, h1, w1)
        self.out_shape = (c3, t3, h3, w3)
        self.seq_in = t1 * h1 * w1
        self.n_queries = t3 * h3 * w3
        d = cfg.width

        self.in_proj = _Linear("transformer.in_proj", rng, c1, d)
        self.pos_enc = Tensor(rng.normal(0.0, 0.02, size=(self.seq_in, d)), requires_grad=True)
        self.queries = Tensor(rng.normal(0.0, 0.02, size=(self.n_queries, d)), requires_grad=True)
        self.query_pos = Tensor(rng.normal(0.0, 0.02, size=(self.n_queries, d)), requires_grad=True)

        self.enc_layers = []
        for i in range(cfg.encoder_layers):
            p = f"transformer.enc{i}"
            self.enc_layers.append(
                {
                    "ln1": _LayerNormParams(f"{p}.ln1", d),
                    "attn": _AttentionBlock(f"{p}.attn", rng, d),
                    "ln2": _LayerNormParams(f"{p}.ln2", d),
                    "ff": _FeedForward(f"{p}.ff", rng, d, cfg.ff_width),
                }
            )
        self.dec_layers = []
        for i in range(cfg.decoder_layers):
            p = f"transformer.dec{i}"
            self.dec_layers.append(
                {
                    "ln1": _LayerNormParams(f"{p}.ln1", d),
                    "self_attn": _AttentionBlock(f"{p}.self_attn", rng, d),
                    "ln2": _LayerNormParams(f"{p}.ln2", d),
                    "cross_attn": _AttentionBlock(f"{p}.cross_attn", rng, d),
                    "ln3": _LayerNormParams(f"{p}.ln3", d),
                    "ff": _FeedForward(f"{p}.ff", rng, d, cfg.ff_width),
                }
            )
        self.enc_norm = _LayerNormParams("transformer.enc_norm", d)
        self.dec_norm = _LayerNormParams("transformer.dec_norm", d)
        self.out_proj = _Linear("transformer.out_proj", rng, d, c3)

    def embed_inputs(self, x: Tensor) -> Tensor:
        """(B, C1, T1, H1, W1) -> (B, S, width) tokens with positions added."""
        c1, t1, h1, w1 = self.in_shape
        if tuple(x.shape[1:]) != (c1, t1, h1, w1):
            raise ValueError(f"transformer input shape {x.shape[1:]}, expected {(c1, t1, h1, w1)}")
        B = x.shape[0]
        seq = T.transpose(T.reshape(x, (B, c1, self.seq_in)), (0, 2, 1))
        return T.add(self.in_proj(seq), self.pos_enc)

    def encode(self, tokens: Tensor, attn_sink=None) -> Tensor:
        h = tokens
        for layer in self.enc_layers:
            h = T.add(h, layer["attn"](layer["ln1"](h), layer["ln1"](h), self.cfg.heads, attn_sink))
            h = T.add(h, layer["ff"](layer["ln2"](h)))
        return self.enc_norm(h)

    def decode(self, memory: Tensor, attn_sink=None) -> Tensor:
        B = memory.shape[0]
        q = T.add(T.add(self.queries, self.query_pos), Tensor(np.zeros((B, self.n_queries, self.cfg.width))))
        for layer in self.dec_layers:
            q = T.add(q, layer["self_attn"](layer["ln1"](q), layer["ln1"](q), self.cfg.heads, attn_sink))
            q = T.add(q, layer["cross_attn"](layer["ln2"](q), memory, self.cfg.heads, attn_sink))
            q = T.add(q, layer["ff"](layer["ln3"](q)))
        return self.dec_norm(q)

    def forward(self, x: Tensor, attn_sink=None) -> Tensor:
        """(B, C1, T1, H1, W1) -> (B, C3, T3, H3, W3)."""
        memory = self.encode(self.embed_inputs(x), attn_sink)
        tokens = self.decode(memory, attn_sink)
        return self.tokens_to_map(self.out_proj(tokens))

    def tokens_to_map(self, tokens: Tensor) -> Tensor:
        c3, t3, h3, w3 = self.out_shape
        B = tokens.shape[0]
        return T.reshape(T.transpose(tokens, (0, 2, 1)), (B, tokens.shape[2], t3, h3, w3))

    def params(self) -> dict:
        out = self.in_proj.params()
        out["transformer.pos_enc"] = self.pos_enc
        out["transformer.queries"] = self.queries
        out["transformer.query_pos"] = self.query_pos
        for layer in self.enc_layers + self.dec_layers:
            for part in layer.values():
                out.update(part.params())
        out.update(self.enc_norm.params())
        out.update(self.dec_norm.params())
        out.update(self.out_proj.params())
        return out


class ModelBundle:
    """All learnable state: three backbones, the Transformer, four MLP heads,
    and a tiny per-point value head for the direct-regression loss variant."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        cfg = self.config
        rng = np.random.default_rng(np.random.PCG64(seed))
        # spatial-only stem keeps the full-resolution layer cheap; temporal
        # mixing starts at the stride-2 stages
        self.v_net = ConvStack(
            "v_net", rng, 3, cfg.v_channels,
            [(1, 1, 1), (2, 2, 2), (2, 2, 2)], nd=3,
            kernels=[(1, 3, 3), (3, 3, 3), (3, 3, 3)],
        )
        self.i_net = ConvStack("i_net", rng, 3, cfg.i_channels, [(1, 1), (2, 2), (2, 2)], nd=2)
        self.m_net = ConvStack(
            "m_net", rng, 2, cfg.m_channels, [(2, 2, 2), (2, 2, 2), (1, 2, 2)], nd=3
        )
        self.transformer = Transformer(rng, cfg)
        c1 = cfg.clip_feat_shape[0]
        c2 = cfg.iframe_feat_shape[0]
        c3 = cfg.motion_feat_shape[0]
        self.g_v = MlpHead("g_v", rng, c1, cfg.head_hidden, cfg.embed_dim)
        self.g_i = MlpHead("g_i", rng, c2, cfg.head_hidden, cfg.embed_dim)
        self.g_m1 = MlpHead("g_m1", rng, c3, cfg.head_hidden, cfg.embed_dim)
        self.g_m2 = MlpHead("g_m2", rng, c3, cfg.head_hidden, cfg.embed_dim)
        self.value_head = _Linear("value_head", rng, c3, 2)

    # -- forward passes (inputs rank n are treated as a batch of one) -------

    def _batched(self, x, rank):
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.data.ndim == rank:
            return T.reshape(x, (1,) + tuple(x.shape)), True
        if x.data.ndim == rank + 1:
            return x, False
        raise ValueError(f"expected rank {rank} or {rank + 1}, got shape {x.shape}")

    def v_forward(self, clip) -> Tensor:
        x, squeeze = self._batched(clip, 4)
        cfg = self.config
        want = (3, cfg.clip_len, cfg.input_size, cfg.input_size)
        if tuple(x.shape[1:]) != want:
            raise ValueError(f"clip shape {tuple(x.shape[1:])}, expected {want}")
        out = self.v_net.forward(x)
        return T.reshape(out, out.shape[1:]) if squeeze else out

    def i_forward(self, iframe) -> Tensor:
        x, squeeze = self._batched(iframe, 3)
        cfg = self.config
        want = (3, cfg.input_size, cfg.input_size)
        if tuple(x.shape[1:]) != want:
            raise ValueError(f"iframe shape {tuple(x.shape[1:])}, expected {want}")
        out = self.i_net.forward(x)
        return T.reshape(out, out.shape[1:]) if squeeze else out

    def m_forward(self, mv_clip) -> Tensor:
        x, squeeze = self._batched(mv_clip, 4)
        cfg = self.config
        want = (2, cfg.mv_len, cfg.input_size, cfg.input_size)
        if tuple(x.shape[1:]) != want:
            raise ValueError(f"mv clip shape {tuple(x.shape[1:])}, expected {want}")
        out = self.m_net.forward(x)
        return T.reshape(out, out.shape[1:]) if squeeze else out

    def transformer_predict(self, x, attn_sink=None) -> Tensor:
        x, squeeze = self._batched(x, 4)
        out = self.transformer.forward(x, attn_sink)
        return T.reshape(out, out.shape[1:]) if squeeze else out

    # -- parameter plumbing ---------------------------------------------------

    def params(self) -> dict:
        out = {}
        for net in (self.v_net, self.i_net, self.m_net):
            out.update(net.params())
        out.update(self.transformer.params())
        for head in (self.g_v, self.g_i, self.g_m1, self.g_m2):
            out.update(head.params())
        out.update(self.value_head.params())
        return out

    def zero_grads(self):
        for p in self.params().values():
            p.zero_grad()

    def zero_grad_fraction(self) -> float:
        """Fraction of parameters whose gradient is exactly zero."""
        total = 0
        zeros = 0
        for p in self.params().values():
            total += p.data.size
            if p.grad is None:
                zeros += p.data.size
            else:
                zeros += int((p.grad == 0).sum())
        return zeros / max(total, 1)

    def param_checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.params()):
            h.update(name.encode())
            h.update(self.params()[name].data.tobytes())
        return h.hexdigest()


# -- checkpoint container --------------------------------------------------------

CKPT_MAGIC = b"CMCK"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHI")


def save_arrays(path, arrays: dict, meta: dict | None = None):
    """Versioned binary of named float64 arrays plus a JSON metadata blob."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype=np.float64)
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype("<f8").tobytes())


def load_arrays(path):
    with open(path, "rb") as fh:
        head = fh.read(_CKPT_HEADER.size)
        if len(head) < _CKPT_HEADER.size:
            raise ValueError(f"{path}: truncated checkpoint header")
        magic, version, meta_len = _CKPT_HEADER.unpack(head)
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(fh.read(meta_len).decode())
        (count,) = struct.unpack("<I", fh.read(4))
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(fh.read(n * 8), dtype="<f8").reshape(shape).copy()
    return arrays, meta


def save_checkpoint(bundle: ModelBundle, path, extra_arrays: dict | None = None, meta: dict | None = None):
    arrays = {name: p.data for name, p in bundle.params().items()}
    if extra_arrays:
        arrays.update(extra_arrays)
    full_meta = {"model_config": _config_to_dict(bundle.config)}
    full_meta.update(meta or {})
    save_arrays(path, arrays, full_meta)


def load_checkpoint(path, bundle: ModelBundle | None = None):
    """Restore (or build) a bundle; returns (bundle, extra_arrays, meta)."""
    arrays, meta = load_arrays(path)
    if bundle is None:
        cfg_dict = dict(meta["model_config"])
        cfg_dict["transformer"] = TransformerConfig(**cfg_dict["transformer"])
        bundle = ModelBundle(config=ModelConfig(**cfg_dict))
    extras = {}
    params = bundle.params()
    for name, arr in arrays.items():
        if name in params:
            if params[name].data.shape != arr.shape:
                raise ValueError(f"{path}: parameter {name} shape {arr.shape} != {params[name].data.shape}")
            params[name].data[...] = arr
        else:
            extras[name] = arr
    missing = set(params) - set(arrays)
    if missing:
        raise ValueError(f"{path}: checkpoint missing parameters: {sorted(missing)[:4]}...")
    return bundle, extras, meta


def _config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "input_size": cfg.input_size,
        "clip_len": cfg.clip_len,
        "mv_len": cfg.mv_len,
        "v_channels": list(cfg.v_channels),
        "i_channels": list(cfg.i_channels),
        "m_channels": list(cfg.m_channels),
        "embed_dim": cfg.embed_dim,
        "head_hidden": cfg.head_hidden,
        "transformer": {
            "encoder_layers": cfg.transformer.encoder_layers,
            "decoder_layers": cfg.transformer.decoder_layers,
            "width": cfg.transformer.width,
            "heads": cfg.transformer.heads,
            "ff_width": cfg.transformer.ff_width,
        },
    }
