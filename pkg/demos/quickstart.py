"""Pretrain on band classification, then compare Base and Ours on richness.

A few minutes on one CPU core:

    python demos/quickstart.py [output_dir]

Synthesises a small 32 px sky, trains the five-way band classifier, then
fine-tunes the richness head twice on the same 30% subset of the training
folds, once over a random extractor (Base) and once over the pretrained one
(Ours). Finishes with an occlusion map for one held-out u-band image.
"""

import sys
from pathlib import Path

from bandssl.core_types import BandLabel, normalize_pixels
from bandssl.model import ModelConfig, RegressionHeadConfig
from bandssl.occlusion import OcclusionConfig, dataset_mean_value, marker_saliency_score, occlusion_map, render_overlay
from bandssl.synthsky import SynthConfig, generate_dataset
from bandssl.trainer import FinetuneConfig, PretrainConfig, finetune, make_splits, pretrain

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")

sky = generate_dataset(SynthConfig(image_side=32, richness_range=(1, 20), seed=0), 150)
plan = make_splits(sky, seed=0)
print(f"{len(sky)} clusters, {len(plan.pretext_train)} pretext-train / {len(plan.pretext_test)} pretext-test")

pre = pretrain(sky, PretrainConfig(epochs=5, lr=3e-3), plan)
for h in pre.history:
    print(f"  pretext epoch {h['epoch']}: held-out accuracy {h['test_acc']:.3f}")

# a narrow head and a frozen extractor keep fine-tuning cheap
head = ModelConfig(head=RegressionHeadConfig((4, 8), (64, 32)))
cfg = FinetuneConfig(lr=1e-4, epochs=40, extractor_mode="fixed", fraction=0.3)
for name, init in (("Base", None), ("Ours", pre.model)):
    res = finetune(sky, init, cfg, plan, fold=0, model_cfg=head)
    print(f"{name}: MAE {res.mae:.2f}  Sigma {res.sigma:.2f}  ({len(res.train_ids)} labels, stopped: {res.stop_reason})")

# occlusion: which pixels does the band classifier rely on?
fill = dataset_mean_value(normalize_pixels(im) for o in sky for im in o.images.values())
obs = next(o for o in sky if o.cluster_id in plan.pretext_test)
img = normalize_pixels(obs.images[BandLabel.u])
omap = occlusion_map(pre.model, img, "u", OcclusionConfig(patch_size=8, stride=4), fill)
print(f"p(u) = {omap.base_probability:.3f}; mean drop over members "
      f"{marker_saliency_score(omap, obs.truth.members):+.3f}")
overlay = render_overlay(omap, img, obs.truth.members, obs.truth.stars, out / "occlusion_u.png")
print("overlay written to", overlay.path)
