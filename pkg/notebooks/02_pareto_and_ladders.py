# %% [markdown]
# # Pareto frontiers, recommendations and depth ladders
#
# The bundled runs table holds measured cost and quality for canonical sizes
# and their deep-narrow alternatives, grouped into compute regions.

# %%
from deepnarrow.config import resolve
from deepnarrow.pareto import (deepnarrow_ladder, frontier, markdown_table, recommend_alternatives,
                               region_frontiers)
from deepnarrow.runs import load_runs

runs = load_runs()
fr = frontier(runs, "params", "sglue")
print(markdown_table(runs, fr))

# %% [markdown]
# Frontiers depend on the cost axis.  Parameters, FLOPs and step rate do not
# always agree, so each is examined on its own.

# %%
for cost in ("params", "tflops", "steps_per_s"):
    print(cost, "->", frontier(runs, cost, "sglue").names)

# %% [markdown]
# ## Per-region view

# %%
tagged = [r for r in runs if r.compute_region]
report = region_frontiers(tagged)
for region, f in report.frontiers.items():
    print(f"{region:6s} {f.names}")
print("knobs on a frontier:", report.on_frontier)
print("knobs tried but off the frontier:", report.off_frontier)
print("non-transferring:", report.non_transferring)

# %% [markdown]
# ## Cheaper alternatives

# %%
by = {r.name: r for r in runs}
for target, quality in [("Base", "sglue"), ("XL", "avg"), ("XXL", "avg")]:
    alts = recommend_alternatives(by[target], runs, "params", quality)
    print(f"{target:5s} ({quality}) <- {[a.name for a in alts]}")

# %% [markdown]
# ## Depth ladders
#
# Deepening stops at 36 layers; beyond that the returns from depth flatten.

# %%
for rung in deepnarrow_ladder(resolve("SM"), [12, 16, 20, 24, 32, 36]):
    print(f"{rung.spec.code:8s} params {rung.params.total / 1e6:7.1f}M  step FLOPs {rung.step_flops:.3e}")
