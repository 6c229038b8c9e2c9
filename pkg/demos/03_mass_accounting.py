"""Audit where the probability mass goes, layer by layer.

The backward pass is a conservation law: the prior carries total mass 1,
and at every depth the delivered mass plus everything dropped at parents
without excitatory children still sums to 1. The contrastive map instead
sums to zero by construction.
"""

import numpy as np

from ebr import (
    PriorSpec,
    SynthSpec,
    build_toy_model,
    eb_recurrent_backward,
    forward_clip,
    gen_synthetic_clip,
    run_saliency,
)

model = build_toy_model(4, (1, 32, 32), 16)
spec = SynthSpec(num_classes=4, gt_class=0, rand_class=3, layout="rand-first",
                 gt_length=8, clip_length=16, noise=0.05, seed=21)
sc = gen_synthetic_clip(spec)
prior = PriorSpec.one_hot(4, sc.gt_class, step=15)

cache = forward_clip(model, sc.clip)
raw, leaked = eb_recurrent_backward(cache, prior)
print("head (classifier + unrolled recurrence):")
print(f"  emitted onto frame features: {raw.sum():.12f}")
print(f"  leaked past the first step:  {leaked:.12f}")
print(f"  total:                       {raw.sum() + leaked:.12f}")

seq = run_saliency(model, sc.clip, prior, "EB-R", "input")
print("\ndescent through the frame CNN (after joint space-time normalization):")
for name, mass, leak_above in seq.layer_records:
    print(f"  {name:>6}: delivered {mass:.12f}  leaked above {leak_above:.12f}  "
          f"sum {mass + leak_above:.12f}")

ceb = run_saliency(model, sc.clip, prior, "cEB-R", "conv1")
total = sum(m.sum() for m in ceb.maps)
print(f"\ncontrastive map global sum: {total:+.2e} (zero up to roundoff)")
print(f"branch leak diagnostics: { {k: round(v, 6) for k, v in ceb.leaked.items()} }")
