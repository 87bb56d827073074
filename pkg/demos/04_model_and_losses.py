"""
The segmentation model and its four losses
==========================================

Build the compact anchor-free model, inspect its outputs and take a few
optimisation steps on one synthetic patch.
"""

import torch

from noiseseg.losses import LossWeights, Targets, compute_loss
from noiseseg.model import ModelConfig, build_model, count_parameters, decode
from noiseseg.train import Sample, TrainConfig, fit, validation_map
from noiseseg.pipeline import ExperimentConfig, SlideRecord, _patches
from noiseseg.synth import generate_slide

# %%
# The default configuration stays in the one-to-three million parameter range.
print("default model parameters:", count_parameters(build_model(ModelConfig())))

cfg = ModelConfig(input_size=128, base_channels=16)
model = build_model(cfg, seed=0)
raw = model(torch.zeros(1, 3, 128, 128))
print("grid sizes:", [c.shape[-1] for c in raw.class_logits], "prototypes:", tuple(raw.protos.shape))

# %%
# Loss breakdown for one target box with a mask; weights are box 7.5, cls 0.5, dfl 1.5, seg 1.0.
mask = torch.zeros(1, 32, 32)
mask[0, 8:20, 6:22] = 1
t = Targets(torch.tensor([[24.0, 32.0, 88.0, 80.0]]), torch.tensor([0]), mask)
br = compute_loss(model(torch.rand(1, 3, 128, 128)), [t], cfg, LossWeights())
print({k: round(v, 4) for k, v in br.as_floats().items()})

# %%
# A short fit on the osteoclast patches of one slide.
s = generate_slide("mouse", 0, 512)
rec = SlideRecord("demo", s.image, s.annotations(), "M1", s.domain)
patches = [p for p in _patches([rec], ExperimentConfig(), "osteoclast") if p.ann.instances]
res = fit(model, patches, [], TrainConfig(epochs=40, batch_size=len(patches), augment=False))
print(f"{len(patches)} patches, train mask mAP50 after 40 epochs: "
      f"{validation_map(res.model, patches, 'mask', [0]):.3f}")
dets = decode(res.model(torch.stack([torch.from_numpy(patches[0].image).permute(2, 0, 1).float() / 255])),
              cfg, 0.25)[0]
print("decoded on the first patch:", [(round(d.score, 2), d.mask.area) for d in dets])
