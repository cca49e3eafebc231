"""
Filter planes on a synthetic fundus
===================================

Builds one synthetic image, runs the preprocessing chain and the three
hand-written filters, then packs everything into an FSTK1 stack.
"""

import numpy as np

from trio_fundus import imgproc as ip
from trio_fundus.synthetic import generate_synthetic

records, images = generate_synthetic(20, ("DN", "MYA"), seed=1)
raw = images[0]
print("record", records[0].id, "labels", sorted(records[0].labels), "shape", raw.shape)

# crop the black border, resize, equalise the luma channel
prepped = ip.preprocess(raw, 64)
print("preprocessed", prepped.shape, prepped.dtype)

sobel = ip.sobel_magnitude(prepped)
poster = ip.posterize(prepped, 2)
emb = ip.emboss(prepped)
for name, plane in (("sobel", sobel), ("posterize", poster), ("emboss", emb)):
    print(f"{name:>9}: min={plane.min():3d} max={plane.max():3d} mean={plane.mean():6.2f}")

# posterize with 2 bits leaves at most 4 levels per channel
print("posterize levels", np.unique(poster))

blob = ip.pack_stack({"original": prepped, "sobel_mag": sobel, "posterized": poster, "embossed": emb})
back = ip.unpack_stack(blob)
print("stack bytes", len(blob), "planes", list(back))
assert all(np.array_equal(back[k], v) for k, v in
           zip(back, (prepped, sobel, poster, emb)))
