"""Loss and edge-weight ablations at desk scale.

Trains the plain predictor three times (positive only, positive+negative,
all three losses) and sweeps the edge-cost weight for the full model. The
orderings mirror the full-scale ablations: background supervision is what
makes the boxes usable, and a moderate edge weight beats none or too much.
"""

from dataclasses import replace

from pointbox import (
    FilterBankSpec,
    LabelGenConfig,
    SceneSpec,
    TrainConfig,
    TrainSample,
    evaluate,
    extract_features,
    generate_scene,
    generate_instance_labels,
    sample_dataset_specs,
    train,
)
from pointbox.training import predict_scores

STRIDE = 6
features_spec = FilterBankSpec(stride=STRIDE)
scene_spec = SceneSpec(
    height=72, width=72, categories=(1, 2), shape_families={1: "rect", 2: "rect"},
    scale_range=(5, 8), min_gap=2, background="noise", noise_sigma=5.0,
    companion_fraction=1.0, align=STRIDE, point_center_bias=0.6,
)

samples, scenes = [], []
for i, spec in enumerate(sample_dataset_specs(80, scene_spec, (3, 7), 0.3, seed=4)):
    scene = generate_scene(spec)
    samples.append(TrainSample(f"img{i}", scene.image,
                               extract_features(scene.image, features_spec),
                               scene.points, scene.boxes))
    scenes.append(scene)


def score(model, labeling=LabelGenConfig()):
    pseudo, gt = [], []
    for sample, scene in zip(samples, scenes):
        sem = predict_scores(model, sample.features)
        result = generate_instance_labels(sample.image, sem, sample.points, labeling)
        pseudo.append([inst.box for inst in result.instances])
        gt.append(list(scene.boxes))
    return evaluate(pseudo, gt).miou


base = TrainConfig(epochs=12, lr=0.01, miou_subset=0, sfg=False, seed=0)

print("loss ablation:")
variants = {
    "positive only": replace(base, use_negative=False, use_color=False),
    "positive+negative": replace(base, use_color=False),
    "all three": base,
}
full_model = None
for name, config in variants.items():
    model = train(samples, config).model
    if name == "all three":
        full_model = model
    print(f"  {name:<18} mIoU {score(model):.3f}")

print("\nedge-weight sweep (full loss):")
for lam in (0.0, 0.5, 1.0, 1.5, 2.0):
    print(f"  lambda={lam:<4} mIoU {score(full_model, LabelGenConfig(lam=lam)):.3f}")
