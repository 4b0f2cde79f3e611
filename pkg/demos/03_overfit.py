# %% [markdown]
# # Overfitting the toy model
# 16 synthetic samples, oracle geometry, two refinement steps.  A full
# 2000-step run takes about five minutes on one core; pass a smaller step
# count on the command line to skim.

# %%
import sys

from geohand.config import Config
from geohand.data import synth_generate
from geohand.train import evaluate, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
cfg = Config()
ds = synth_generate(cfg)
print(len(ds), "samples", ds.image_hw, "images")

# %%
res = train(cfg, ds, max_steps=steps,
            progress=lambda r: r["step"] % 50 == 0 and print(r["step"], round(r["total"], 4),
                                                             "gate", round(r["sigma_g"], 4)))
print(f"{steps} steps in {res.seconds:.0f}s, loss {res.initial_loss:.4f} -> {res.final_loss:.4f}")

# %% refined vs coarse on the training set
ev = evaluate(res.model, ds)
for k in ev.metrics:
    print(f"{k:9s} refined {ev.metrics[k]:8.3f}   coarse {ev.coarse[k]:8.3f}")
