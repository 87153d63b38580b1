# %% [markdown]
# # The network, one stage at a time
#
# Builds the tiny preset, runs a few recursive stages on a synthetic
# utterance, and trains for a handful of epochs to watch the per-stage
# losses separate. Runs in well under a minute on one core.

# %%
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from darcn import tensor as T
from darcn.data import build_corpus, Manifest
from darcn.model import PAPER, TINY, DarcnModel, count_parameters
from darcn.training import TrainConfig, train

# %%
rows, total = count_parameters(DarcnModel(PAPER, dtype=np.float32))
print(f"paper preset: {total:,} parameters")
for name, n in rows[:6]:
    print(f"  {name:<28}{n:>9,}")

# %% [markdown]
# Stage outputs from an untrained tiny model. Every stage shares one set
# of weights, and the SRNN state travels from stage to stage.

# %%
model = DarcnModel(replace(TINY, stages=3), seed=0)
x = np.random.default_rng(1).uniform(0, 2, (1, 20, TINY.n_freq))
with T.no_grad():
    traces = model(x)
for q, tr in enumerate(traces, 1):
    gates = [float(m.data.mean()) for m in tr.attention.maps]
    print(f"stage {q}: estimate {tr.estimate.shape}, mean gate values {np.round(gates, 3)}")

# %% [markdown]
# A miniature corpus and a few epochs. The log has one line per epoch:
# epoch, lr, train L, train D per stage, val L, val D per stage.

# %%
root = Path(tempfile.mkdtemp(prefix="darcn-demo-"))
paths = build_corpus(root / "corpus", seed=0, splits={"train": 16, "val": 4, "test": 1})
print({k: len(Manifest.load(v)) for k, v in paths.items()})

cfg = TrainConfig(preset="tiny", stages=3, seed=0, max_epochs=4, batch_size=4,
                  train_manifest=str(paths["train"]), val_manifest=str(paths["val"]), out_dir=str(root / "run"))
result = train(cfg)
print(result.log.read_text())

# %%
last = result.history[-1]
print("validation D per stage:", [round(float(d), 4) for d in last.val_stage])
