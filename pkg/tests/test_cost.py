import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from deepnarrow import cost
from deepnarrow.config import ModelConfig, lookup_standard, resolve
from deepnarrow.cost import (HardwareModel, calibrate_utilization, count_params,
                             estimate_steps_per_sec, forward_flops_per_token, train_step_flops)
from deepnarrow.transformer import parameter_shapes

ANCHORS = {
    "SM": 61e6, "B": 223e6, "LG": 738e6, "XL": 2.9e9, "XXL": 11.3e9,
    "NL16-SM": 134e6, "NL20-SM": 164e6, "NL22-SM": 179e6, "NL24-SM": 193e6,
    "EL32-SM": 143e6, "NL36-B": 621e6, "NL36-LG": 1.1e9, "NL32-XL": 3.8e9,
}


@pytest.mark.parametrize("code,published", sorted(ANCHORS.items()))
def test_param_anchor(code, published):
    total = count_params(resolve(code)).total
    assert abs(total - published) / published < 0.02


@pytest.mark.parametrize("code,published", [("TY", 16e6), ("MI", 31e6)])
def test_small_registry_sizes_within_wide_tolerance(code, published):
    total = count_params(resolve(code)).total
    assert abs(total - published) / published < 0.15


def test_base_within_tighter_band():
    assert abs(count_params(lookup_standard("base")).total - 223e6) / 223e6 < 0.015


ONES = ModelConfig("ones", 1, 1, 1, 1, 1, 1, vocab_size=4)


def test_all_ones_by_hand():
    p = count_params(ONES)
    # emb 4 | attn 4+4+4 | ffn 2+2 | norms 2+3+2 | bias 2 stacks x 32 buckets x 1 head
    assert (p.embedding, p.enc_attention, p.dec_self_attention, p.dec_cross_attention) == (4, 4, 4, 4)
    assert (p.enc_ffn, p.dec_ffn, p.layer_norms, p.rel_bias) == (2, 2, 7, 64)
    assert p.total == 91


def test_all_ones_flops_by_hand():
    f = forward_flops_per_token(ONES, enc_len=1, dec_len=1)
    assert f.per_token_enc == 2 * 4 + 2 * 2 + 2 * 2        # enc attn, enc ffn, cross k/v
    assert f.per_token_dec == 2 * 4 + 2 * 2 + 2 * 2 + 2 * 4  # self attn, cross q/o, ffn, softmax
    assert f.attention_quadratic == 4 + 2 + 4
    assert f.per_step_train == 3 * (16 + 24 + 10)


def test_breakdown_additive_and_json_keys():
    p = count_params(lookup_standard("base"))
    d = p.to_dict()
    assert sum(v for k, v in d.items() if k != "total") == p.total
    assert set(json.loads(p.to_json())) == {"embedding", "enc_attention", "enc_ffn", "dec_self_attention",
                                           "dec_cross_attention", "dec_ffn", "layer_norms", "rel_bias", "total"}


def test_untied_doubles_embedding():
    b = lookup_standard("base")
    assert count_params(b.replace(tie_embedding_softmax=False)).embedding == 2 * b.vocab_size * b.d_model


def test_per_layer_bias_flag():
    b = lookup_standard("base")
    assert count_params(b, per_layer_bias=True).rel_bias == 24 * 32 * 12


def test_shared_heads_and_tied_kv():
    b = lookup_standard("base")
    d, inner, dkv = b.d_model, b.inner_dim, b.d_kv
    assert cost.attention_block_params(b.replace(shared_heads=True)) == 3 * d * dkv + inner * d
    assert cost.attention_block_params(b.replace(tied_kv=True)) == 2 * d * inner + inner * d


def _oracle_forward(config, enc_len, dec_len):
    """Independent total: walk every weight matrix and charge 2 FLOPs per MAC per token it sees."""
    total = 0
    for path, shape in parameter_shapes(config).items():
        if len(shape) != 2 or path.endswith("relative_bias"):
            continue
        rows, cols = shape
        if path == "shared/embedding":
            tokens = dec_len if config.tie_embedding_softmax else 0
        elif path == "decoder/lm_head":
            tokens = dec_len
        elif path.startswith("encoder/"):
            tokens = enc_len
        elif "/cross_attention/" in path and path.rsplit("/", 1)[-1] in ("k", "v", "kv"):
            tokens = enc_len
        else:
            tokens = dec_len
        total += 2 * rows * cols * tokens
    inner = config.inner_dim
    for _ in range(config.enc_layers):
        total += 2 * 2 * enc_len * enc_len * inner
    for _ in range(config.dec_layers):
        total += 2 * 2 * dec_len * (dec_len / 2) * inner
        total += 2 * 2 * dec_len * enc_len * inner
    return total


@pytest.mark.parametrize("code", ["B", "SM", "NL24-SM", "SH1-B", "SKV1-B", "SH1-SKV1-TY"])
def test_flops_match_per_matrix_oracle(code):
    cfg = resolve(code)
    f = forward_flops_per_token(cfg, 512, 114)
    assert f.forward_per_sequence == _oracle_forward(cfg, 512, 114)


def test_flops_untied_oracle():
    cfg = lookup_standard("small").replace(tie_embedding_softmax=False)
    assert forward_flops_per_token(cfg, 64, 16).forward_per_sequence == _oracle_forward(cfg, 64, 16)


def test_components_sum_to_sequence_total():
    f = forward_flops_per_token(lookup_standard("base"))
    assert sum(f.components.values()) == f.forward_per_sequence


def test_doubling_ff_doubles_only_ffn_terms():
    b = lookup_standard("base")
    f1 = forward_flops_per_token(b).components
    f2 = forward_flops_per_token(b.replace(d_ff=2 * b.d_ff)).components
    for k in f1:
        if "ffn" in k:
            assert f2[k] == 2 * f1[k]
        else:
            assert f2[k] == f1[k]


def test_train_step_definition_and_linearity():
    b = lookup_standard("base")
    f = forward_flops_per_token(b)
    assert train_step_flops(b, 1) == 3 * f.forward_per_sequence
    assert train_step_flops(b, 2) == 2 * train_step_flops(b, 1)


def test_base_small_flop_ratio_brackets_published():
    r = train_step_flops(lookup_standard("base")) / train_step_flops(lookup_standard("small"))
    assert 2.5 <= r <= 5.5


def test_rejects_bad_lengths():
    with pytest.raises(ValueError):
        forward_flops_per_token(lookup_standard("base"), enc_len=0)


dims = st.sampled_from(["enc_layers", "dec_layers", "d_model", "d_ff", "d_kv", "n_heads", "vocab_size"])


@given(dims, st.integers(1, 4), st.sampled_from(["tiny", "small", "base"]))
def test_monotone_in_every_dimension(field, bump, size):
    a = lookup_standard(size)
    b = a.replace(**{field: getattr(a, field) + bump})
    assert count_params(b).total >= count_params(a).total
    assert train_step_flops(b) > train_step_flops(a)


def test_steps_per_sec_formula(monkeypatch):
    monkeypatch.setattr(cost, "train_step_flops", lambda *a, **k: 4)
    hw = HardwareModel(1, 1.0, 1.0, 0.0)
    assert estimate_steps_per_sec(lookup_standard("base"), hw) == 0.25


def test_deeper_is_slower_at_equal_flops(monkeypatch):
    monkeypatch.setattr(cost, "train_step_flops", lambda *a, **k: 1e12)
    hw = HardwareModel(8, 1e12, 0.5, 1e-3)
    shallow, deep = lookup_standard("base"), resolve("NL24-B")
    assert estimate_steps_per_sec(deep, hw) < estimate_steps_per_sec(shallow, hw)


def test_calibrated_ordering_small16l_faster_than_base():
    hw = calibrate_utilization(lookup_standard("base"), 9.0, HardwareModel(16, 1e14, 1.0, 1e-4))
    assert 0 < hw.utilization <= 1
    assert estimate_steps_per_sec(lookup_standard("base"), hw) == pytest.approx(9.0)
    assert estimate_steps_per_sec(resolve("NL16-SM"), hw) > estimate_steps_per_sec(lookup_standard("base"), hw)


@pytest.mark.parametrize("kw", [dict(n_chips=0, peak_flops_per_chip=1.0),
                                dict(n_chips=1, peak_flops_per_chip=1.0, utilization=1.5),
                                dict(n_chips=1, peak_flops_per_chip=-1.0)])
def test_hardware_validation(kw):
    with pytest.raises(ValueError):
        HardwareModel(**kw)
