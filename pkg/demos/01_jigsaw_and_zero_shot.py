"""
Jigsaw inputs and zero-shot prompts
===================================

Cut an image into a 4x4 grid, shuffle the patches, and put it back together.
Then score a few images with hand-written prompts on the stand-in backbone,
before any training has happened.
"""

import tempfile
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from csaw.backbone import StandInBackbone
from csaw.data import generate_synthetic_dataset
from csaw.jigsaw import apply_jigsaw, inverse, load_image, sample_permutation, to_uint8_image
from csaw.vatp import predict_probs

torch.set_num_threads(1)
out_dir = Path("demo_out")
out_dir.mkdir(exist_ok=True)

# a tiny dataset of coloured, striped images
root = Path(tempfile.mkdtemp()) / "colours"
manifest = generate_synthetic_dataset(root, K=4, per_class=4, seed=0)
print("classes:", manifest.classes)

# shuffle the patches of one image; every random choice comes from a seed list
x = load_image(manifest.path(0))
p = sample_permutation(grid=4, rng_seed=[1, 0, 0])
x_jig = apply_jigsaw(x, p)
assert torch.equal(apply_jigsaw(x_jig, inverse(p)), x)
print("patch order:", p.perm)

panel = np.concatenate([to_uint8_image(x), to_uint8_image(x_jig)], axis=1)
Image.fromarray(panel).save(out_dir / "jigsaw.png")

# %%
# Zero-shot classification with fixed prompts
# --------------------------------------------
# The stand-in backbone's colour words are tied to the colour of a flat image,
# which plays the part of a pretrained vision-language alignment.

bb = StandInBackbone(seed=0)
images = torch.stack([load_image(manifest.path(i)) for i in range(len(manifest.samples))])
emb, _ = bb.encode_image(images)
prompts = bb.text_encode([bb.token_embed(f"a photo of a {c}") for c in manifest.classes])
probs = predict_probs(emb, prompts, bb.logit_temperature)
labels = torch.tensor([c for _, c in manifest.samples])
print("zero-shot accuracy on clean images:", (probs.argmax(1) == labels).float().mean().item())

jig = torch.stack([apply_jigsaw(img, sample_permutation(4, [1, 0, i])) for i, img in enumerate(images)])
emb_jig, _ = bb.encode_image(jig)
probs_jig = predict_probs(emb_jig, prompts, bb.logit_temperature)
print("zero-shot accuracy on jumbled images:", (probs_jig.argmax(1) == labels).float().mean().item())
