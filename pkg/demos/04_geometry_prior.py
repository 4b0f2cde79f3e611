# %% [markdown]
# # Does the geometry prior help?
# Same config and seed, only the frozen geometry stub differs: the oracle
# version sees the rendered point map, the frozen-random one sees a fixed
# random projection of the image.  Compare on held-out samples.

# %%
import sys

from geohand.config import Config
from geohand.data import synth_generate
from geohand.train import evaluate, train

n, steps = (int(a) for a in sys.argv[1:3]) if len(sys.argv) > 2 else (512, 800)

held = None
for mode in ("oracle", "frozen-random"):
    cfg = Config()
    cfg.data.samples = n
    cfg.model.geo_mode = mode
    if held is None:
        held = synth_generate(cfg, seed=cfg.seed + 10_000, n=64)
    res = train(cfg, synth_generate(cfg), max_steps=steps)
    m = evaluate(res.model, held).metrics
    print(f"{mode:14s} held-out MPJPE {m['MPJPE']:6.2f} mm  PA-MPJPE {m['PA-MPJPE']:6.2f} mm  "
          f"final sigma_g {res.model.sigma_g():.3f}")
