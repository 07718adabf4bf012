"""Analytic parameter and FLOP accounting for encoder-decoder transformers.

Conventions: one multiply-accumulate is 2 FLOPs, backward costs 2x forward,
no bias vectors, RMS norms carry a single scale vector.  All counts are exact
Python integers.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .config import ModelConfig

DEFAULT_ENC_LEN = 512
DEFAULT_DEC_LEN = 114
MACS_PER_FLOP = 2
BACKWARD_MULTIPLIER = 2


@dataclass(frozen=True)
class ParamBreakdown:
    embedding: int
    enc_attention: int
    enc_ffn: int
    dec_self_attention: int
    dec_cross_attention: int
    dec_ffn: int
    layer_norms: int
    rel_bias: int
    total: int

    def to_dict(self) -> dict[str, int]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


@dataclass(frozen=True)
class FlopsBreakdown:
    per_token_enc: int
    per_token_dec: int
    attention_quadratic: int
    per_step_train: int
    assumptions: dict = field(default_factory=dict)
    components: dict = field(default_factory=dict)

    @property
    def forward_per_sequence(self) -> int:
        a = self.assumptions
        return (a["enc_len"] * self.per_token_enc + a["dec_len"] * self.per_token_dec
                + self.attention_quadratic)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class HardwareModel:
    n_chips: int
    peak_flops_per_chip: float
    utilization: float = 1.0
    per_layer_latency: float = 0.0

    def __post_init__(self):
        if self.n_chips < 1 or self.peak_flops_per_chip <= 0:
            raise ValueError("n_chips and peak_flops_per_chip must be positive")
        if not 0 < self.utilization <= 1:
            raise ValueError(f"utilization must be in (0, 1], got {self.utilization}")
        if self.per_layer_latency < 0:
            raise ValueError("per_layer_latency must be non-negative")


def attention_block_params(config: ModelConfig) -> int:
    """Q, K, V and output projections of one attention block."""
    proj_width = config.d_kv if config.shared_heads else config.inner_dim
    n_input_proj = 2 if config.tied_kv else 3
    return n_input_proj * config.d_model * proj_width + config.inner_dim * config.d_model


def count_params(config: ModelConfig, per_layer_bias: bool = False) -> ParamBreakdown:
    d = config.d_model
    block = attention_block_params(config)
    ffn = 2 * d * config.d_ff
    n_emb = 1 if config.tie_embedding_softmax else 2
    bias_tables = config.enc_layers + config.dec_layers if per_layer_bias else 2
    parts = dict(
        embedding=n_emb * config.vocab_size * d,
        enc_attention=config.enc_layers * block,
        enc_ffn=config.enc_layers * ffn,
        dec_self_attention=config.dec_layers * block,
        dec_cross_attention=config.dec_layers * block,
        dec_ffn=config.dec_layers * ffn,
        layer_norms=(2 * config.enc_layers + 3 * config.dec_layers + 2) * d,
        rel_bias=bias_tables * config.rel_bias_buckets * config.n_heads,
    )
    return ParamBreakdown(total=sum(parts.values()), **parts)


def forward_flops_per_token(
    config: ModelConfig,
    enc_len: int = DEFAULT_ENC_LEN,
    dec_len: int = DEFAULT_DEC_LEN,
    batch: int = 1,
) -> FlopsBreakdown:
    """Forward-pass FLOPs split into per-token matmul work and per-sequence attention work.

    Cross-attention K/V projections run over encoder positions, so they are
    charged to ``per_token_enc``.  Causal self-attention sees dec_len/2 keys
    on average.
    """
    if enc_len < 1 or dec_len < 1:
        raise ValueError("enc_len and dec_len must be >= 1")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    c = config
    d, inner = c.d_model, c.inner_dim
    proj_width = c.d_kv if c.shared_heads else inner
    q_params = d * proj_width
    kv_params = (1 if c.tied_kv else 2) * d * proj_width
    o_params = inner * d
    block = q_params + kv_params + o_params
    ffn = 2 * d * c.d_ff
    out_proj = c.vocab_size * d

    per_token = {
        "enc_self_attention_proj": MACS_PER_FLOP * c.enc_layers * block,
        "enc_ffn": MACS_PER_FLOP * c.enc_layers * ffn,
        "dec_cross_kv_proj": MACS_PER_FLOP * c.dec_layers * kv_params,
        "dec_self_attention_proj": MACS_PER_FLOP * c.dec_layers * block,
        "dec_cross_qo_proj": MACS_PER_FLOP * c.dec_layers * (q_params + o_params),
        "dec_ffn": MACS_PER_FLOP * c.dec_layers * ffn,
        "softmax_proj": MACS_PER_FLOP * out_proj,
    }
    enc_keys = ("enc_self_attention_proj", "enc_ffn", "dec_cross_kv_proj")
    per_token_enc = sum(per_token[k] for k in enc_keys)
    per_token_dec = sum(v for k, v in per_token.items() if k not in enc_keys)

    # scores (QK^T) and weighted values (PV): 2 matmuls x 2 FLOPs per MAC
    quad = {
        "enc_self_attention_scores": 4 * c.enc_layers * enc_len * enc_len * inner,
        "dec_self_attention_scores": 2 * c.dec_layers * dec_len * dec_len * inner,
        "dec_cross_attention_scores": 4 * c.dec_layers * dec_len * enc_len * inner,
    }
    attention_quadratic = sum(quad.values())

    forward_seq = enc_len * per_token_enc + dec_len * per_token_dec + attention_quadratic
    per_step_train = batch * forward_seq * (1 + BACKWARD_MULTIPLIER)

    components = {k: v * (enc_len if k in enc_keys else dec_len) for k, v in per_token.items()}
    components.update(quad)
    return FlopsBreakdown(
        per_token_enc=per_token_enc,
        per_token_dec=per_token_dec,
        attention_quadratic=attention_quadratic,
        per_step_train=per_step_train,
        assumptions={
            "enc_len": enc_len,
            "dec_len": dec_len,
            "batch": batch,
            "macs_per_flop": MACS_PER_FLOP,
            "backward_multiplier": BACKWARD_MULTIPLIER,
        },
        components=components,
    )


def train_step_flops(
    config: ModelConfig,
    batch: int = 1,
    enc_len: int = DEFAULT_ENC_LEN,
    dec_len: int = DEFAULT_DEC_LEN,
) -> int:
    return forward_flops_per_token(config, enc_len, dec_len, batch=batch).per_step_train


def estimate_steps_per_sec(
    config: ModelConfig,
    hardware: HardwareModel,
    batch: int = 128,
    enc_len: int = DEFAULT_ENC_LEN,
    dec_len: int = DEFAULT_DEC_LEN,
) -> float:
    flops = train_step_flops(config, batch, enc_len, dec_len)
    throughput = hardware.n_chips * hardware.peak_flops_per_chip * hardware.utilization
    serial = (config.enc_layers + config.dec_layers) * hardware.per_layer_latency
    return 1.0 / (flops / throughput + serial)


def calibrate_utilization(
    reference: ModelConfig,
    measured_steps_per_sec: float,
    hardware: HardwareModel,
    batch: int = 128,
    enc_len: int = DEFAULT_ENC_LEN,
    dec_len: int = DEFAULT_DEC_LEN,
) -> HardwareModel:
    """Return ``hardware`` with utilization solved so ``reference`` runs at the measured rate."""
    step_time = 1.0 / measured_steps_per_sec
    serial = (reference.enc_layers + reference.dec_layers) * hardware.per_layer_latency
    compute_time = step_time - serial
    if compute_time <= 0:
        raise ValueError("per-layer latency alone exceeds the measured step time")
    flops = train_step_flops(reference, batch, enc_len, dec_len)
    util = flops / (compute_time * hardware.n_chips * hardware.peak_flops_per_chip)
    return dataclasses.replace(hardware, utilization=util)
