"""The seven fusion steps side by side: output shapes, parameter counts, and the skip path.

    python3 demos/02_fusion_steps.py
"""

import numpy as np

from robustfusion import tensor as T
from robustfusion.fusion import TABLE_NAMES, VARIANTS, FusionConfig, make_step

cfg = FusionConfig(fc_hidden=32)
rng = np.random.default_rng(0)
L = T.Tensor(rng.normal(size=(1, cfg.C1, cfg.H, cfg.W)))
C = T.Tensor(rng.normal(size=(1, cfg.C2, cfg.H, cfg.W)))

print(f"LiDAR {L.shape}, camera {C.shape}\n")
print(f"{'variant':16s} {'output':18s} {'params':>8s}  name")
for v in VARIANTS:
    step = make_step(v, cfg, 0).eval()
    y = step(L, C)
    print(f"{v:16s} {str(y.shape):18s} {step.param_count:8d}  {TABLE_NAMES[v]}")

# The SE gate is a per-channel weight in (0, 1) computed from the features themselves.
se = make_step("conv_se", cfg, 0).eval()
se(L, C)
print("\nconv_se channel gate:", np.round(se.last_gate[0], 3))

# Zeroing the last convolution of every encoder branch silences conv_ed, while
# conv_ed_se keeps an unencoded path through branch 1.
for v, branches in (("conv_ed", ["channel", "spatial"]), ("conv_ed_se", ["2", "3"])):
    step = make_step(v, cfg, 0).eval()
    step.zero_branches(branches)
    a = step(L, C).data
    b = step(T.Tensor(rng.normal(size=L.shape)), T.Tensor(rng.normal(size=C.shape))).data
    print(f"{v:11s} with branches {branches} zeroed: output changes with input? {not np.array_equal(a, b)}")
