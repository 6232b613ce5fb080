"""
Trading accuracy for parallelism
================================

Sweep the token acceptance threshold on a trained copy model. Lower
thresholds accept longer draft prefixes per verification pass, so TPF rises;
the accepted prefix length never grows as the threshold rises.
"""

from slotdiff import PRESETS, toy_run, train
from slotdiff.evaluate import sweep

res = train(toy_run("copy"))
samples = res.eval[:100]

rows = sweep(
    res.model,
    samples,
    PRESETS["toy"],
    tau_slot=[0.6],
    tau_token=[0.1, 0.3, 0.5, 0.7, 0.9],
    k=[2, 4],
    b=[16],
)
print(f"{'k':>2} {'tau_token':>9} {'accuracy':>8} {'TPF':>5}")
for r in rows:
    print(f"{r['k']:>2} {r['tau_token']:>9.1f} {r['accuracy']:>8.3f} {r['tpf']:>5.2f}")
