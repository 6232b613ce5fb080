"""
Slots, corruption and the training buffer
=========================================

A response is cut into fixed-size slots. During training a fraction of the
slots is masked, the clean ones are shuffled, and everything is laid out in
one causal buffer whose tokens keep their true position IDs.
"""

import numpy as np
import torch

from slotdiff.objective import arm_loss, mdm_loss
from slotdiff.slotting import corrupt, count_masking_patterns, partition, restore_order

PAD, MASK = 0, 1
rng = np.random.default_rng(0)

# a 10-token response in slots of 4: the last slot gets two pads
response = list(range(10, 20))
prompt = [3, 7, 7, 4]
part = partition(response, 4, pad_id=PAD, offset=len(prompt))
print("slots:", part.slots, "pads:", part.pad_count, "origins:", part.origins)

# mask floor(t*K) slots, shuffle the rest
inst = corrupt(prompt, part, 0.5, rng, mask_id=MASK, pad_id=PAD)
print("tokens:   ", inst.buffer.tokens.tolist())
print("positions:", inst.buffer.position_ids.tolist())
print("clean order:", [o for _, o in inst.clean], "masked:", [o for _, o in inst.masked])

# next-token targets live inside clean slots; denoising targets sit on the masks
print("ARM rows -> targets:", [(int(r), int(t)) for r, t in zip(inst.arm_rows, inst.arm_targets)])
print("MDM rows -> targets:", [(int(r), int(t)) for r, t in zip(inst.mdm_rows, inst.mdm_targets)])

# with uniform logits both losses are ln V
V = 32
flat = torch.zeros(len(inst.buffer), V)
print(f"uniform logits: arm {float(arm_loss(flat, inst)):.4f} mdm {float(mdm_loss(flat, inst)):.4f} ln V {np.log(V):.4f}")

# putting slots back in position order recovers the response
filled = list(inst.clean) + [(t, o) for t, (_, o) in zip(inst.masked_truth, inst.masked)]
print("restored:", restore_order(filled)[: len(response)] == response)

###############################################################################
# How many distinct contexts does a model see? Token-level masking grows like
# 2^L, slot-level ordering like floor(n!e) in the number of slots, and
# block-wise masking stays linear in the block count.
for L, k in [(8, 2), (12, 4), (16, 4), (32, 8)]:
    row = {s: count_masking_patterns(L, k, s) for s in ("full-MDM", "block", "slot")}
    print(f"L={L:2d} k={k}:", row)
