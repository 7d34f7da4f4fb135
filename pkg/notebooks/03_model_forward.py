"""
Inside the spectral transformer
===============================

Shapes, parameter budget and the per-block energy weights of an untrained model.
"""

# %%
import numpy as np

from beatkit.data import SynthConfig, synth_trace
from beatkit.model import (
    ModelConfig,
    forward_many,
    init_params,
    materialized_projections,
    param_count,
    trace_spectra,
)
from beatkit.signal import estimate_hr, postprocess

cfg = ModelConfig()
params = init_params(cfg, seed=0)
print("trainable parameters:", param_count(params))
for name, arr in params.arrays.items():
    print(f"  {name:28s} {arr.shape}")

# %% Every query/key/value projection starts with the intensity direction.
w = materialized_projections(params, cfg)["blocks.0.heads.0.w_q"]
print(np.round(w, 4))
print("W W^T =\n", np.round(w @ w.T, 12))

# %% One 10 s recording becomes a stack of zoomed window spectra.
s = synth_trace(SynthConfig(duration_s=10, hr_bpm=96, motion="drift", seed=2))
F = trace_spectra(s.trace, cfg)
print("spectra [windows, 2m, channels]:", F.shape)

# %% Energy weights S per block for the first window.
acts = []
pulse = forward_many([s.trace], params, cfg, chunk=None, activations=acts)[0]
for b, a in enumerate(acts):
    s_w = a.energy[0, :, 0]
    print(f"block {b}: S in [{s_w.min():.2e}, {s_w.max():.2e}], peak at bin {np.argmax(s_w)}")
print("untrained estimate %.1f BPM (truth 96)" % estimate_hr(postprocess(pulse)))
