"""Render signed saliency overlays as PPM images.

Positive evidence blends the frame toward red, negative toward blue.
Writes into ./demo_overlays; any image viewer opens .ppm files.
"""

import os

from ebr import (
    PriorSpec,
    SynthSpec,
    build_toy_model,
    gen_synthetic_clip,
    overlay_sequence,
    run_saliency,
    write_ppm,
)

out = os.path.join(os.path.dirname(__file__), "demo_overlays")
os.makedirs(out, exist_ok=True)

model = build_toy_model(4, (1, 32, 32), 16)
spec = SynthSpec(num_classes=4, gt_class=2, rand_class=0, layout="gt-first",
                 gt_length=8, clip_length=16, noise=0.05, seed=5)
sc = gen_synthetic_clip(spec)
prior = PriorSpec.one_hot(4, sc.gt_class, step=15)
seq = run_saliency(model, sc.clip, prior, "cEB-R", "conv1")

images = overlay_sequence(sc.clip.frames, seq.spatial_maps())
for t, rgb in enumerate(images):
    write_ppm(os.path.join(out, f"frame_{t:02d}.ppm"), rgb)

print(f"wrote {len(images)} overlays to {out}")
print("frames 0-7 glow red on the queried pattern, 8-15 blue on the distractor")
