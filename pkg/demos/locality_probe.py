"""
How far does one revealed token reach?
======================================

On the running-sum task every answer token is the previous one plus a prompt
symbol, so revealing a token should mostly move its neighbours. The probe
reveals one masked ground-truth token and measures the Jensen-Shannon
divergence it causes at every other masked position.
"""

import numpy as np

from slotdiff import toy_run, train
from slotdiff.probe import dependency_probe

res = train(toy_run("modsum-chain"), progress=True)
corpus = [(s["prompt"], s["response"]) for s in res.train[:500]]
curves = dependency_probe(res.model, corpus, t_levels=(0.3, 0.5, 0.8), samples=2000, rng=np.random.default_rng(0))

for c in curves:
    print(f"t={c.t}: JS at |d|=1 {c.mean_at(1, 1):.3e}, |d|=2..4 {c.mean_at(2, 4):.3e}, |d|>=8 {c.mean_at(8):.3e}")

###############################################################################
# Signed distances for one masking ratio. Negative means the revealed token
# sits to the right of the position being measured.
for d, (mean, n) in curves[1].bins.items():
    if abs(d) <= 8:
        print(f"{d:+3d} {mean:.3e} {'#' * int(60 * mean / max(m for m, _ in curves[1].bins.values()))}")
