"""
Label-free training on a small corpus
=====================================

A reduced version of the end-to-end experiment: a few recordings, a few epochs,
then a paired comparison with POS on the same evaluation windows.
"""

# %%
import logging

from beatkit.data import synth_corpus
from beatkit.evaluation import evaluate_run, method_callable
from beatkit.model import ModelConfig, orthonormal_loss
from beatkit.training import TrainRunConfig, train

logging.basicConfig(level=logging.INFO, format="%(message)s")

corpus = synth_corpus(12, duration_s=20, seed=11)
train_set, test_set = corpus[:10], corpus[10:]
cfg = ModelConfig()

# %% Spectral contrastive learning: no PPG is used for training.
result = train(train_set, TrainRunConfig(mode="scl", epochs=4, train_stride=10, seed=0), cfg)
for row in result.history:
    print({k: round(v, 4) if isinstance(v, float) else v for k, v in row.items()})
print("orthonormal penalty:", float(orthonormal_loss(result.params, cfg).data))

# %% Paired evaluation on 300-frame windows.
for name, method in (("beatformer", method_callable("beatformer", result.params, cfg)),
                     ("pos", method_callable("pos"))):
    r = evaluate_run(method, test_set)
    print(f"{name:10s} MAE {r.mae_bpm:.2f} BPM over {r.n_windows} windows")
