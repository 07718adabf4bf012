# %% [markdown]
# # Scaling fits and upstream/downstream disagreement
#
# Upstream quality is negative log-perplexity; it is negated into a positive
# loss before fitting `loss = a * params ** b` in log-log space.

# %%
from deepnarrow.fit import compare_fit_quality, find_inversions, fit_runs, plot_series_csv
from deepnarrow.runs import load_runs

runs = load_runs()
by = {r.name: r for r in runs}
canonical = [by[n] for n in ("Small", "Base", "Large", "XL", "XXL")]
fit = fit_runs(canonical)
print(f"canonical sizes: loss = {fit.a:.3f} * params^{fit.b:.4f}, r2 = {fit.r_squared:.4f}")
print(plot_series_csv(canonical, fit))

# %% [markdown]
# ## Does downstream quality follow the same law?
#
# Fitting both upstream loss and SuperGLUE against parameters on every row
# shows a looser fit downstream.

# %%
cmp = compare_fit_quality(runs)
print(f"upstream r2 {cmp.upstream.r_squared:.3f}  downstream r2 {cmp.downstream.r_squared:.3f}  "
      f"gap {cmp.r_squared_gap:.3f}")

# %% [markdown]
# ## Inversions
#
# An inversion is a pair of runs within 2x of each other in size where the
# one with better perplexity is worse on every downstream task.

# %%
report = find_inversions(runs)
for p in report.pairs:
    print(f"{p.better_upstream.name:9s} beats {p.better_downstream.name:9s} upstream by "
          f"{p.upstream_gap:.3f} yet trails on "
          + ", ".join(f"{t} {g:+.2f}" for t, g in p.downstream_gaps.items()))

# %% [markdown]
# The NL12-XXL versus NL32-XL pair is the clearest case, but the table holds
# several more, for example Base against Small 24L.  Narrowing the
# neighborhood does not isolate the single pair either:

# %%
for ratio in (1.1, 1.25, 1.5, 2.0):
    print(ratio, find_inversions(runs, neighborhood_ratio=ratio).names())
