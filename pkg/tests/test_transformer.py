import math

import numpy as np
import pytest

from deepnarrow.config import ModelConfig, resolve
from deepnarrow.cost import count_params
from deepnarrow.pretrain import desk_config
from deepnarrow.relpos import relative_bucket
from deepnarrow.transformer import (Batch, backward, encode, forward, load_checkpoint,
                                    loss_and_grads, materialize, parameter_shapes,
                                    save_checkpoint, softmax)

MICRO = ModelConfig("micro", 2, 2, d_model=16, d_ff=24, d_kv=4, n_heads=2, vocab_size=40,
                    rel_bias_buckets=8, rel_bias_max_distance=16)


def micro_batch(seed=0, b=2, s=7, t=5, vocab=40):
    rng = np.random.default_rng(seed)
    enc = [rng.integers(2, vocab, s - i).tolist() for i in range(b)]
    tgt = [rng.integers(2, vocab, t - i).tolist() + [1] for i in range(b)]
    return Batch.from_sequences(enc, tgt)


@pytest.mark.parametrize("code", ["TY", "NL2-TY", "SH1-TY", "SKV1-TY", "SH1-SKV1-NL2-TY", "DM128-FF512-NL1-TY"])
def test_materialized_count_equals_analytic(code):
    cfg = desk_config(code)
    assert materialize(cfg).n_params() == count_params(cfg).total


def test_untied_count_equals_analytic():
    cfg = MICRO.replace(tie_embedding_softmax=False)
    assert materialize(cfg).n_params() == count_params(cfg).total


def test_paths_unique_and_ordered():
    shapes = parameter_shapes(MICRO)
    assert list(materialize(MICRO).params) == list(shapes)
    assert "encoder/layer_000/self_attention/q" in shapes


def test_same_seed_same_model():
    assert materialize(MICRO, seed=3).checksum() == materialize(MICRO, seed=3).checksum()
    assert materialize(MICRO, seed=3).checksum() != materialize(MICRO, seed=4).checksum()


def test_size_guard():
    with pytest.raises(ValueError, match="desk-scale"):
        materialize(resolve("B"))


def test_init_is_truncated():
    m = materialize(MICRO, seed=0, precision="double")
    emb = m.params["shared/embedding"]
    assert np.abs(emb).max() <= 2 * MICRO.d_model ** -0.5 + 1e-12
    wi = m.params["encoder/layer_000/ffn/wi"]
    assert np.abs(wi).max() <= 2 * MICRO.d_model ** -0.5 + 1e-12


def test_zero_model_uniform_loss():
    cfg = MICRO.replace(vocab_size=32)
    m = materialize(cfg, precision="double")
    for k in m.params:
        m.params[k][...] = 0
    logits, loss = forward(m, micro_batch(vocab=32))
    assert loss == pytest.approx(math.log(32), abs=1e-12)
    assert np.allclose(logits, 0)


def test_batch_permutation():
    m = materialize(MICRO, precision="double")
    rng = np.random.default_rng(1)
    enc = [rng.integers(2, 40, 6).tolist() for _ in range(3)]
    tgt = [rng.integers(2, 40, 4).tolist() for _ in range(3)]
    _, l1 = forward(m, Batch.from_sequences(enc, tgt))
    order = [2, 0, 1]
    _, l2 = forward(m, Batch.from_sequences([enc[i] for i in order], [tgt[i] for i in order]))
    assert l1 == pytest.approx(l2, rel=1e-12)


def test_logits_shape_and_softmax_rows():
    m = materialize(MICRO)
    b = micro_batch()
    logits, _ = forward(m, b)
    assert logits.shape == (2, b.target_tokens.shape[1], MICRO.vocab_size)
    assert np.abs(softmax(logits).sum(-1) - 1).max() < 1e-6
    md = materialize(MICRO, precision="double")
    assert np.abs(softmax(forward(md, b)[0]).sum(-1) - 1).max() < 1e-12


def test_causality():
    m = materialize(MICRO, precision="double")
    b = micro_batch(b=1, t=8)
    logits, _ = forward(m, b)
    for j in range(1, b.decoder_input_tokens.shape[1]):
        dec = b.decoder_input_tokens.copy()
        dec[0, j] = (dec[0, j] + 7) % 38 + 2
        perturbed, _ = forward(m, Batch(b.encoder_tokens, dec, b.target_tokens))
        assert np.array_equal(perturbed[0, :j], logits[0, :j])
        assert not np.allclose(perturbed[0, j:], logits[0, j:])


def test_encoder_permutation_equivariance_without_bias():
    m = materialize(MICRO, precision="double")
    m.params["encoder/relative_bias"][...] = 0
    tokens = np.array([[5, 9, 11, 3, 20, 7]])
    perm = np.array([3, 0, 5, 1, 4, 2])
    out = encode(m, tokens)
    out_p = encode(m, tokens[:, perm])
    assert np.allclose(out_p, out[:, perm], atol=1e-12)


def test_token_errors():
    m = materialize(MICRO)
    with pytest.raises(ValueError, match="out of range"):
        forward(m, Batch.from_sequences([[2, 99]], [[3]]))
    with pytest.raises(ValueError, match="non-pad"):
        forward(m, Batch.from_sequences([[2, 3]], [[0]]))


def _fd_check(model, batch, n_coords, seed, h=1e-5):
    _, grads = loss_and_grads(model, batch)
    rng = np.random.default_rng(seed)
    names = list(model.params)
    worst = 0.0
    for _ in range(n_coords):
        name = names[rng.integers(len(names))]
        p = model.params[name]
        idx = tuple(rng.integers(s) for s in p.shape)
        old = p[idx]
        p[idx] = old + h
        up = forward(model, batch)[1]
        p[idx] = old - h
        down = forward(model, batch)[1]
        p[idx] = old
        fd = (up - down) / (2 * h)
        a = grads[name][idx]
        worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-6))
    return worst


@pytest.mark.parametrize("changes", [{}, {"shared_heads": True}, {"tied_kv": True},
                                     {"tie_embedding_softmax": False},
                                     {"shared_heads": True, "tied_kv": True}])
def test_gradients_match_finite_differences(changes):
    m = materialize(MICRO.replace(**changes), seed=1, precision="double")
    assert _fd_check(m, micro_batch(), 60, seed=2) < 1e-4


def test_unused_embedding_rows_have_zero_gradient_untied():
    m = materialize(MICRO.replace(tie_embedding_softmax=False), precision="double")
    b = micro_batch()
    g = backward(m, b)
    used = set(b.encoder_tokens.ravel()) | set(b.decoder_input_tokens.ravel())
    unused = [i for i in range(MICRO.vocab_size) if i not in used]
    assert unused
    assert np.all(g["shared/embedding"][unused] == 0)
    assert np.any(g["decoder/lm_head"][unused] != 0)


def test_loss_scale_linearity():
    m = materialize(MICRO, precision="double")
    b = micro_batch()
    g1, g3 = backward(m, b), backward(m, b, loss_scale=3.0)
    for k in g1:
        assert np.allclose(g3[k], 3 * g1[k], rtol=1e-12, atol=1e-15)


def test_missing_gradient_is_an_error():
    m = materialize(MICRO)
    m.params["decoder/orphan"] = np.zeros(3, dtype=np.float32)
    with pytest.raises(RuntimeError, match="orphan"):
        backward(m, micro_batch())


def test_checkpoint_round_trip_and_byte_stable(tmp_path):
    m = materialize(MICRO, seed=5)
    save_checkpoint(m, tmp_path / "a.bin")
    save_checkpoint(m, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    back = load_checkpoint(tmp_path / "a.bin")
    assert back.config == m.config and back.checksum() == m.checksum()
    assert back.params["shared/embedding"].dtype == np.float32


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(p)


# independent scalar re-computation for a 1-layer, d_model=2 model

def _rms(v, g):
    r = 1 / math.sqrt(sum(x * x for x in v) / len(v) + 1e-6)
    return [x * r * gi for x, gi in zip(v, g)]


def _matvec(v, w):
    return [sum(v[i] * w[i][j] for i in range(len(v))) for j in range(len(w[0]))]


def _attend(p, pre, queries, keys, cfg, bias_table=None, bidirectional=True, causal=False):
    out = []
    for qi, xq in enumerate(queries):
        q = _matvec(xq, p[f"{pre}/q"])
        heads = []
        for h in range(cfg.n_heads):
            sl = slice(h * cfg.d_kv, (h + 1) * cfg.d_kv)
            scores = []
            for kj, xk in enumerate(keys):
                if causal and kj > qi:
                    continue
                k = _matvec(xk, p[f"{pre}/k"])
                s = sum(a * b for a, b in zip(q[sl], k[sl])) / math.sqrt(cfg.d_kv)
                if bias_table is not None:
                    bucket = relative_bucket(kj - qi, bidirectional, cfg.rel_bias_buckets,
                                             cfg.rel_bias_max_distance)
                    s += bias_table[bucket][h]
                scores.append((kj, s))
            mx = max(s for _, s in scores)
            z = sum(math.exp(s - mx) for _, s in scores)
            ctx = [0.0] * cfg.d_kv
            for kj, s in scores:
                v = _matvec(keys[kj], p[f"{pre}/v"])[sl]
                ctx = [c + math.exp(s - mx) / z * vi for c, vi in zip(ctx, v)]
            heads += ctx
        out.append(_matvec(heads, p[f"{pre}/o"]))
    return out


def _ffn(p, pre, x):
    hn = _rms(x, p[f"{pre}/norm"])
    h = [max(0.0, a) for a in _matvec(hn, p[f"{pre}/wi"])]
    return _matvec(h, p[f"{pre}/wo"])


def scalar_loss(model, enc_tokens, dec_inputs, targets):
    cfg = model.config
    p = {k: v.tolist() for k, v in model.params.items()}
    emb = p["shared/embedding"]
    x = [emb[t] for t in enc_tokens]
    pre = "encoder/layer_000"
    normed = [_rms(v, p[f"{pre}/self_attention/norm"]) for v in x]
    att = _attend(p, f"{pre}/self_attention", normed, normed, cfg, p["encoder/relative_bias"])
    x = [[a + b for a, b in zip(u, v)] for u, v in zip(x, att)]
    x = [[a + b for a, b in zip(u, _ffn(p, f"{pre}/ffn", u))] for u in x]
    enc = [_rms(v, p["encoder/final_norm"]) for v in x]

    y = [emb[t] for t in dec_inputs]
    pre = "decoder/layer_000"
    normed = [_rms(v, p[f"{pre}/self_attention/norm"]) for v in y]
    att = _attend(p, f"{pre}/self_attention", normed, normed, cfg, p["decoder/relative_bias"],
                  bidirectional=False, causal=True)
    y = [[a + b for a, b in zip(u, v)] for u, v in zip(y, att)]
    normed = [_rms(v, p[f"{pre}/cross_attention/norm"]) for v in y]
    att = _attend(p, f"{pre}/cross_attention", normed, enc, cfg)
    y = [[a + b for a, b in zip(u, v)] for u, v in zip(y, att)]
    y = [[a + b for a, b in zip(u, _ffn(p, f"{pre}/ffn", u))] for u in y]
    dec = [_rms(v, p["decoder/final_norm"]) for v in y]

    total = 0.0
    for h, t in zip(dec, targets):
        logits = [sum(h[i] * row[i] for i in range(cfg.d_model)) / math.sqrt(cfg.d_model) for row in emb]
        mx = max(logits)
        lse = mx + math.log(sum(math.exp(l - mx) for l in logits))
        total += lse - logits[t]
    return total / len(targets)


def test_scalar_oracle_one_layer_d2():
    cfg = ModelConfig("d2", 1, 1, d_model=2, d_ff=3, d_kv=1, n_heads=2, vocab_size=6,
                      rel_bias_buckets=4, rel_bias_max_distance=4)
    m = materialize(cfg, seed=11, precision="double")
    rng = np.random.default_rng(0)
    for k in m.params:
        if k.endswith("norm") or k.endswith("relative_bias"):
            m.params[k] = rng.normal(1.0 if k.endswith("norm") else 0.0, 0.3, m.params[k].shape)
    batch = Batch.from_sequences([[3, 4]], [[5, 1]])
    _, loss = forward(m, batch)
    want = scalar_loss(m, [3, 4], batch.decoder_input_tokens[0].tolist(), [5, 1])
    assert loss == pytest.approx(want, rel=1e-10)
