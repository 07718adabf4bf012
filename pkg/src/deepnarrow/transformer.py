"""A desk-scale encoder-decoder transformer in numpy with hand-written gradients.

Architecture: pre-norm residual blocks with RMS normalization, ReLU
feed-forward layers, no bias vectors, one relative-position bias table shared
by all encoder self-attention layers and another shared by all decoder
self-attention layers, and an input embedding reused as the output softmax
projection.  The parameter layout mirrors :func:`deepnarrow.cost.count_params`
exactly.

Parameter paths look like ``encoder/layer_000/self_attention/q``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import truncnorm

from .config import ModelConfig
from .cost import count_params
from .relpos import bucket_matrix

PAD_ID = 0
EOS_ID = 1
START_ID = PAD_ID
RMS_EPS = 1e-6
MASK_VALUE = -1e30
DEFAULT_MAX_PARAMS = 50_000_000
DTYPES = {"single": np.float32, "double": np.float64}


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]
    precision: str = "single"
    scale_tied_output: bool = True

    @property
    def dtype(self):
        return DTYPES[self.precision]

    def n_params(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}


@dataclass
class Batch:
    encoder_tokens: np.ndarray
    decoder_input_tokens: np.ndarray
    target_tokens: np.ndarray
    encoder_mask: Optional[np.ndarray] = None
    target_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.encoder_tokens = np.asarray(self.encoder_tokens, dtype=np.int64)
        self.decoder_input_tokens = np.asarray(self.decoder_input_tokens, dtype=np.int64)
        self.target_tokens = np.asarray(self.target_tokens, dtype=np.int64)
        if self.encoder_mask is None:
            self.encoder_mask = self.encoder_tokens != PAD_ID
        if self.target_mask is None:
            self.target_mask = self.target_tokens != PAD_ID
        if self.decoder_input_tokens.shape != self.target_tokens.shape:
            raise ValueError("decoder inputs and targets must have the same shape")

    @classmethod
    def from_sequences(cls, encoder_seqs, target_seqs) -> "Batch":
        """Pad variable-length sequences and build shifted-right decoder inputs."""
        b = len(encoder_seqs)
        s = max(len(x) for x in encoder_seqs)
        t = max(len(x) for x in target_seqs)
        enc = np.full((b, s), PAD_ID, dtype=np.int64)
        tgt = np.full((b, t), PAD_ID, dtype=np.int64)
        for i, (e, y) in enumerate(zip(encoder_seqs, target_seqs)):
            enc[i, :len(e)] = e
            tgt[i, :len(y)] = y
        dec = np.full_like(tgt, PAD_ID)
        dec[:, 0] = START_ID
        dec[:, 1:] = tgt[:, :-1]
        return cls(enc, dec, tgt)

    @property
    def n_target_tokens(self) -> int:
        return int(self.target_mask.sum())


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    c = config
    d, inner = c.d_model, c.inner_dim
    width = c.d_kv if c.shared_heads else inner
    shapes: dict[str, tuple[int, ...]] = {"shared/embedding": (c.vocab_size, d)}

    def attention(prefix):
        shapes[f"{prefix}/norm"] = (d,)
        shapes[f"{prefix}/q"] = (d, width)
        if c.tied_kv:
            shapes[f"{prefix}/kv"] = (d, width)
        else:
            shapes[f"{prefix}/k"] = (d, width)
            shapes[f"{prefix}/v"] = (d, width)
        shapes[f"{prefix}/o"] = (inner, d)

    def ffn(prefix):
        shapes[f"{prefix}/norm"] = (d,)
        shapes[f"{prefix}/wi"] = (d, c.d_ff)
        shapes[f"{prefix}/wo"] = (c.d_ff, d)

    shapes["encoder/relative_bias"] = (c.rel_bias_buckets, c.n_heads)
    for i in range(c.enc_layers):
        attention(f"encoder/layer_{i:03d}/self_attention")
        ffn(f"encoder/layer_{i:03d}/ffn")
    shapes["encoder/final_norm"] = (d,)
    shapes["decoder/relative_bias"] = (c.rel_bias_buckets, c.n_heads)
    for i in range(c.dec_layers):
        attention(f"decoder/layer_{i:03d}/self_attention")
        attention(f"decoder/layer_{i:03d}/cross_attention")
        ffn(f"decoder/layer_{i:03d}/ffn")
    shapes["decoder/final_norm"] = (d,)
    if not c.tie_embedding_softmax:
        shapes["decoder/lm_head"] = (c.vocab_size, d)
    return shapes


def _init_std(name: str, shape: tuple[int, ...], config: ModelConfig) -> Optional[float]:
    leaf = name.rsplit("/", 1)[-1]
    if leaf.endswith("norm"):
        return None
    if leaf in ("embedding", "lm_head", "relative_bias"):
        return config.d_model ** -0.5
    return shape[0] ** -0.5


def materialize(config: ModelConfig, seed: int = 0, precision: str = "single",
                max_params: int = DEFAULT_MAX_PARAMS) -> Model:
    """Build a model with truncated-normal (+-2 sigma) weights and unit norm scales."""
    if precision not in DTYPES:
        raise ValueError(f"precision must be one of {tuple(DTYPES)}")
    expected = count_params(config).total
    if expected > max_params:
        raise ValueError(f"{config.name}: {expected} parameters exceeds the desk-scale limit "
                         f"of {max_params}; pass max_params to override")
    rng = np.random.default_rng(seed)
    dtype = DTYPES[precision]
    params = {}
    for name, shape in parameter_shapes(config).items():
        std = _init_std(name, shape, config)
        if std is None:
            params[name] = np.ones(shape, dtype=dtype)
        else:
            draw = truncnorm.rvs(-2.0, 2.0, size=shape, random_state=rng)
            params[name] = (draw * std).astype(dtype)
    return Model(config, params, precision)


# building blocks: each *_fwd returns (output, cache), each *_bwd accumulates into grads

def _rms_fwd(x, g):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x * r * g, (x, r, g)


def _rms_bwd(dy, cache):
    x, r, g = cache
    u = dy * g
    dg = (dy * x * r).reshape(-1, x.shape[-1]).sum(0)
    dx = r * u - x * (r ** 3) * np.mean(u * x, axis=-1, keepdims=True)
    return dx, dg


def _matmul_grad(x, dy):
    """dW for y = x @ W over any leading batch dims."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _split_heads(t, n_heads, shared):
    b, s, w = t.shape
    if shared:
        return np.broadcast_to(t[:, None], (b, n_heads, s, w))
    return t.reshape(b, s, n_heads, w // n_heads).transpose(0, 2, 1, 3)


def _merge_heads_grad(dt, shared):
    if shared:
        return dt.sum(axis=1)
    b, h, s, k = dt.shape
    return dt.transpose(0, 2, 1, 3).reshape(b, s, h * k)


def _attn_fwd(p, prefix, xq, xkv, bias, mask, cfg):
    wq = p[f"{prefix}/q"]
    wk = p[f"{prefix}/kv"] if cfg.tied_kv else p[f"{prefix}/k"]
    wv = p[f"{prefix}/kv"] if cfg.tied_kv else p[f"{prefix}/v"]
    wo = p[f"{prefix}/o"]
    h, shared = cfg.n_heads, cfg.shared_heads
    scale = cfg.d_kv ** -0.5
    qh = _split_heads(xq @ wq, h, shared)
    kh = _split_heads(xkv @ wk, h, shared)
    vh = _split_heads(xkv @ wv, h, shared)
    s = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    if bias is not None:
        s = s + bias[None]
    s = np.where(mask, s, MASK_VALUE)
    pr = softmax(s)
    ctx = pr @ vh
    b, _, tq, _ = ctx.shape
    merged = ctx.transpose(0, 2, 1, 3).reshape(b, tq, cfg.inner_dim)
    return merged @ wo, (xq, xkv, qh, kh, vh, pr, merged, scale)


def _attn_bwd(dout, p, prefix, cache, cfg, grads):
    xq, xkv, qh, kh, vh, pr, merged, scale = cache
    shared = cfg.shared_heads
    wo = p[f"{prefix}/o"]
    grads[f"{prefix}/o"] += _matmul_grad(merged, dout)
    dmerged = dout @ wo.T
    b, tq, _ = dmerged.shape
    dctx = dmerged.reshape(b, tq, cfg.n_heads, cfg.d_kv).transpose(0, 2, 1, 3)
    dpr = dctx @ vh.transpose(0, 1, 3, 2)
    dvh = pr.transpose(0, 1, 3, 2) @ dctx
    ds = pr * (dpr - np.sum(dpr * pr, axis=-1, keepdims=True))
    dqh = (ds @ kh) * scale
    dkh = (ds.transpose(0, 1, 3, 2) @ qh) * scale
    dq = _merge_heads_grad(dqh, shared)
    dk = _merge_heads_grad(dkh, shared)
    dv = _merge_heads_grad(dvh, shared)
    wq = p[f"{prefix}/q"]
    grads[f"{prefix}/q"] += _matmul_grad(xq, dq)
    dxq = dq @ wq.T
    if cfg.tied_kv:
        w = p[f"{prefix}/kv"]
        dkv = dk + dv
        grads[f"{prefix}/kv"] += _matmul_grad(xkv, dkv)
        dxkv = dkv @ w.T
    else:
        grads[f"{prefix}/k"] += _matmul_grad(xkv, dk)
        grads[f"{prefix}/v"] += _matmul_grad(xkv, dv)
        dxkv = dk @ p[f"{prefix}/k"].T + dv @ p[f"{prefix}/v"].T
    dbias = ds.sum(axis=0)
    return dxq, dxkv, dbias


def _ffn_fwd(p, prefix, x):
    h = x @ p[f"{prefix}/wi"]
    a = np.maximum(h, 0)
    return a @ p[f"{prefix}/wo"], (x, h, a)


def _ffn_bwd(dy, p, prefix, cache, grads):
    x, h, a = cache
    grads[f"{prefix}/wo"] += _matmul_grad(a, dy)
    dh = (dy @ p[f"{prefix}/wo"].T) * (h > 0)
    grads[f"{prefix}/wi"] += _matmul_grad(x, dh)
    return dh @ p[f"{prefix}/wi"].T


def _bias_fwd(table, buckets):
    return table[buckets].transpose(2, 0, 1)


def _bias_bwd(dbias, buckets, n_buckets):
    flat = buckets.ravel()
    return np.stack([np.bincount(flat, weights=dbias[h].ravel(), minlength=n_buckets)
                     for h in range(dbias.shape[0])], axis=1)


def _check_batch(model: Model, batch: Batch) -> None:
    v = model.config.vocab_size
    for name in ("encoder_tokens", "decoder_input_tokens", "target_tokens"):
        t = getattr(batch, name)
        if t.size and (t.min() < 0 or t.max() >= v):
            raise ValueError(f"{name}: token id out of range [0, {v})")
    if batch.n_target_tokens == 0:
        raise ValueError("batch has no non-pad target tokens")
    if not batch.encoder_mask.any(axis=1).all():
        raise ValueError("every encoder sequence needs at least one non-pad token")


def _encode(model, tokens, enc_mask, tape):
    cfg, p = model.config, model.params
    s = tokens.shape[1]
    buckets = bucket_matrix(s, s, True, cfg.rel_bias_buckets, cfg.rel_bias_max_distance)
    bias = _bias_fwd(p["encoder/relative_bias"], buckets)
    mask = enc_mask[:, None, None, :]
    x = p["shared/embedding"][tokens]
    layers = []
    for i in range(cfg.enc_layers):
        pre = f"encoder/layer_{i:03d}"
        hn, c_n1 = _rms_fwd(x, p[f"{pre}/self_attention/norm"])
        a, c_a = _attn_fwd(p, f"{pre}/self_attention", hn, hn, bias, mask, cfg)
        x = x + a
        hn2, c_n2 = _rms_fwd(x, p[f"{pre}/ffn/norm"])
        f, c_f = _ffn_fwd(p, f"{pre}/ffn", hn2)
        x = x + f
        layers.append((c_n1, c_a, c_n2, c_f))
    out, c_final = _rms_fwd(x, p["encoder/final_norm"])
    if tape is not None:
        tape["encoder"] = (tokens, buckets, layers, c_final)
    return out


def encode(model: Model, tokens, encoder_mask=None) -> np.ndarray:
    """Final encoder hidden states, shape (batch, enc_len, d_model)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    mask = tokens != PAD_ID if encoder_mask is None else np.asarray(encoder_mask, dtype=bool)
    return _encode(model, tokens, mask, None)


def _decode(model, tokens, enc_out, enc_mask, tape):
    cfg, p = model.config, model.params
    t = tokens.shape[1]
    buckets = bucket_matrix(t, t, False, cfg.rel_bias_buckets, cfg.rel_bias_max_distance)
    bias = _bias_fwd(p["decoder/relative_bias"], buckets)
    causal = np.tril(np.ones((t, t), dtype=bool))[None, None]
    cross_mask = enc_mask[:, None, None, :]
    y = p["shared/embedding"][tokens]
    layers = []
    for i in range(cfg.dec_layers):
        pre = f"decoder/layer_{i:03d}"
        hn, c_n1 = _rms_fwd(y, p[f"{pre}/self_attention/norm"])
        a, c_a = _attn_fwd(p, f"{pre}/self_attention", hn, hn, bias, causal, cfg)
        y = y + a
        hn2, c_n2 = _rms_fwd(y, p[f"{pre}/cross_attention/norm"])
        ca, c_c = _attn_fwd(p, f"{pre}/cross_attention", hn2, enc_out, None, cross_mask, cfg)
        y = y + ca
        hn3, c_n3 = _rms_fwd(y, p[f"{pre}/ffn/norm"])
        f, c_f = _ffn_fwd(p, f"{pre}/ffn", hn3)
        y = y + f
        layers.append((c_n1, c_a, c_n2, c_c, c_n3, c_f))
    out, c_final = _rms_fwd(y, p["decoder/final_norm"])
    if tape is not None:
        tape["decoder"] = (tokens, buckets, layers, c_final)
    return out


def _output_matrix(model):
    if model.config.tie_embedding_softmax:
        return model.params["shared/embedding"]
    return model.params["decoder/lm_head"]


def _output_scale(model) -> float:
    if model.config.tie_embedding_softmax and model.scale_tied_output:
        return model.config.d_model ** -0.5
    return 1.0


def token_nll(logits, targets, mask):
    """Per-position negative log-likelihood, zeroed at masked positions."""
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    return np.where(mask, nll, 0.0)


def _forward(model, batch, tape):
    _check_batch(model, batch)
    enc_out = _encode(model, batch.encoder_tokens, batch.encoder_mask, tape)
    dec_out = _decode(model, batch.decoder_input_tokens, enc_out, batch.encoder_mask, tape)
    scale = _output_scale(model)
    z = dec_out * scale
    logits = z @ _output_matrix(model).T
    nll = token_nll(logits, batch.target_tokens, batch.target_mask)
    loss = nll.sum() / batch.n_target_tokens
    if tape is not None:
        tape.update(enc_out=enc_out, z=z, logits=logits, scale=scale)
    return logits, float(loss)


def forward(model: Model, batch: Batch):
    """Return (logits, mean cross-entropy over non-pad target positions)."""
    return _forward(model, batch, None)


class _GradStore(dict):
    """Gradient buffers created on first write, so untouched parameters are detectable."""

    def __init__(self, params):
        super().__init__()
        self._params = params

    def __missing__(self, key):
        buf = np.zeros_like(self._params[key])
        self[key] = buf
        return buf


def loss_and_grads(model: Model, batch: Batch, loss_scale: float = 1.0):
    cfg, p = model.config, model.params
    tape: dict = {}
    logits, loss = _forward(model, batch, tape)
    grads = _GradStore(p)
    dtype = model.dtype

    # softmax cross-entropy
    probs = softmax(logits)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, batch.target_tokens[..., None], 1.0, axis=-1)
    weight = (batch.target_mask * (loss_scale / batch.n_target_tokens)).astype(dtype)
    dlogits = (probs - onehot) * weight[..., None]

    w_out = _output_matrix(model)
    out_key = "shared/embedding" if cfg.tie_embedding_softmax else "decoder/lm_head"
    grads[out_key] += _matmul_grad(dlogits, tape["z"])
    d_dec = (dlogits @ w_out) * tape["scale"]

    # decoder
    dec_tokens, dec_buckets, dec_layers, dec_final = tape["decoder"]
    dy, dg = _rms_bwd(d_dec, dec_final)
    grads["decoder/final_norm"] += dg
    d_enc_out = np.zeros_like(tape["enc_out"])
    d_dec_bias = np.zeros((cfg.n_heads,) + dec_buckets.shape, dtype=dtype)
    for i in reversed(range(cfg.dec_layers)):
        pre = f"decoder/layer_{i:03d}"
        c_n1, c_a, c_n2, c_c, c_n3, c_f = dec_layers[i]
        dh = _ffn_bwd(dy, p, f"{pre}/ffn", c_f, grads)
        dx, dg = _rms_bwd(dh, c_n3)
        grads[f"{pre}/ffn/norm"] += dg
        dy = dy + dx
        dq, dkv, _ = _attn_bwd(dy, p, f"{pre}/cross_attention", c_c, cfg, grads)
        d_enc_out += dkv
        dx, dg = _rms_bwd(dq, c_n2)
        grads[f"{pre}/cross_attention/norm"] += dg
        dy = dy + dx
        dq, dkv, dbias = _attn_bwd(dy, p, f"{pre}/self_attention", c_a, cfg, grads)
        d_dec_bias += dbias
        dx, dg = _rms_bwd(dq + dkv, c_n1)
        grads[f"{pre}/self_attention/norm"] += dg
        dy = dy + dx
    grads["decoder/relative_bias"] += _bias_bwd(d_dec_bias, dec_buckets, cfg.rel_bias_buckets)
    np.add.at(grads["shared/embedding"], dec_tokens, dy)

    # encoder
    enc_tokens, enc_buckets, enc_layers, enc_final = tape["encoder"]
    dx_stream, dg = _rms_bwd(d_enc_out, enc_final)
    grads["encoder/final_norm"] += dg
    d_enc_bias = np.zeros((cfg.n_heads,) + enc_buckets.shape, dtype=dtype)
    for i in reversed(range(cfg.enc_layers)):
        pre = f"encoder/layer_{i:03d}"
        c_n1, c_a, c_n2, c_f = enc_layers[i]
        dh = _ffn_bwd(dx_stream, p, f"{pre}/ffn", c_f, grads)
        dx, dg = _rms_bwd(dh, c_n2)
        grads[f"{pre}/ffn/norm"] += dg
        dx_stream = dx_stream + dx
        dq, dkv, dbias = _attn_bwd(dx_stream, p, f"{pre}/self_attention", c_a, cfg, grads)
        d_enc_bias += dbias
        dx, dg = _rms_bwd(dq + dkv, c_n1)
        grads[f"{pre}/self_attention/norm"] += dg
        dx_stream = dx_stream + dx
    grads["encoder/relative_bias"] += _bias_bwd(d_enc_bias, enc_buckets, cfg.rel_bias_buckets)
    np.add.at(grads["shared/embedding"], enc_tokens, dx_stream)

    missing = set(p) - set(grads)
    if missing:
        raise RuntimeError(f"no gradient reached {sorted(missing)}")
    return loss, {k: grads[k] for k in p}


def backward(model: Model, batch: Batch, loss_scale: float = 1.0) -> dict[str, np.ndarray]:
    """Gradient of ``loss_scale * mean loss`` for every parameter, keyed like ``model.params``."""
    return loss_and_grads(model, batch, loss_scale)[1]


# checkpoints: magic, version, JSON header, then (path, shape, raw array) entries

_MAGIC = b"DNCK"
_VERSION = 1


def save_checkpoint(model: Model, path) -> None:
    header = json.dumps({"config": model.config.to_dict(), "precision": model.precision,
                         "scale_tied_output": model.scale_tied_output,
                         "n_entries": len(model.params)}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<II", _VERSION, len(header)) + header)
        for name, arr in model.params.items():
            key = name.encode()
            fh.write(struct.pack("<I", len(key)) + key)
            fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    header = json.loads(data[pos:pos + hlen])
    pos += hlen
    config = ModelConfig.from_dict(header["config"])
    dtype = np.dtype(DTYPES[header["precision"]]).newbyteorder("<")
    params = {}
    for _ in range(header["n_entries"]):
        (klen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + klen].decode()
        pos += klen
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) * dtype.itemsize
        params[name] = np.frombuffer(data[pos:pos + n], dtype=dtype).reshape(shape).astype(
            DTYPES[header["precision"]])
        pos += n
    return Model(config, params, header["precision"], header["scale_tied_output"])
