# %% [markdown]
# # Desk-scale span-corruption pretraining
#
# A small numpy encoder-decoder trains on a synthetic order-2 Markov corpus.
# The goal is to show directional trends at micro scale, not to reproduce
# full-scale curves.

# %%
import numpy as np

from deepnarrow.pretrain import (desk_config, evaluate_ppl, span_corrupt, split_corpus,
                                 synth_corpus, train)
from deepnarrow.transformer import materialize

corpus = synth_corpus(seed=0, n_sequences=2000, seq_len=48, vocab_size=512)
train_rows, held_out = split_corpus(corpus)
ex = span_corrupt(corpus[0][:16], 0.15, 3.0, seed=0, vocab_size=512)
print("original ", corpus[0][:16].tolist())
print("encoder  ", ex.encoder_tokens.tolist())
print("target   ", ex.target_tokens.tolist())

# %% [markdown]
# ## Depth at fixed width
#
# Three tiny models that differ only in depth, trained identically.

# %%
STEPS = 200
results = {}
for code in ("NL2-TY", "NL4-TY", "NL8-TY"):
    model = materialize(desk_config(code), seed=0, precision="double")
    before = evaluate_ppl(model, held_out)
    metrics = train(model, train_rows, STEPS, batch_size=8, learning_rate=1e-3, seed=0,
                    held_out=held_out, clock=None)
    results[code] = metrics.held_out_log_ppl
    print(f"{code:7s} params {model.n_params():>9,d}  held-out log-ppl {before:.3f} -> "
          f"{metrics.held_out_log_ppl:.3f}  probe loss {metrics.initial_loss:.3f} -> {metrics.final_loss:.3f}")

# %%
vals = np.array(list(results.values()))
print("weakly improving with depth:", bool(np.all(np.diff(vals) >= 0)))
print("deepest >= shallowest:", bool(vals[-1] >= vals[0]))
