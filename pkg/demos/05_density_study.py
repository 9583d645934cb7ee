"""How object density erodes pseudo-box quality.

One object is copy-pasted at increasing counts. The "dense" arm runs the
trained model on each dense image; the "control" arm shifts and fuses the
single-object response instead, keeping the response density identical but
the features clean. The gap between the two curves is the feature-side cost
of crowding.
"""

from dataclasses import replace
from pathlib import Path

import numpy as np

from pointbox import (
    FilterBankSpec,
    LabelGenConfig,
    SceneSpec,
    TrainSample,
    TrainConfig,
    extract_features,
    generate_scene,
    sample_dataset_specs,
    train,
)
from pointbox.studies import density_study, write_study_csv

STRIDE = 6
features_spec = FilterBankSpec(stride=STRIDE)
scene_spec = SceneSpec(
    height=72, width=72, categories=(1, 2), shape_families={1: "rect", 2: "rect"},
    scale_range=(5, 8), min_gap=2, background="noise", noise_sigma=5.0,
    companion_fraction=1.0, align=STRIDE, point_center_bias=0.6,
)

samples = []
for i, spec in enumerate(sample_dataset_specs(80, scene_spec, (3, 7), 0.3, seed=4)):
    scene = generate_scene(spec)
    samples.append(TrainSample(f"img{i}", scene.image,
                               extract_features(scene.image, features_spec),
                               scene.points, scene.boxes))
model = train(samples, TrainConfig(epochs=12, lr=0.01, miou_subset=0, sfg=False)).model

out_dir = Path("demo_out")
out_dir.mkdir(exist_ok=True)
base_spec = replace(scene_spec, height=120, width=120, object_count=1,
                    companion_fraction=0.0)
counts = (1, 2, 4, 8, 12)
labeling = LabelGenConfig(lam=0.0)  # semantic-only, isolating the feature side

for mode in ("dense", "control"):
    rows = density_study(model, base_spec, counts, gaps=(3,), seeds=(0, 1, 2),
                         feature_spec=features_spec, labeling=labeling, mode=mode,
                         obj_size=(12, 12), margin=6)
    write_study_csv(rows, out_dir / f"density_{mode}.csv")
    by_count = {}
    for row in rows:
        by_count.setdefault(row["count"], []).append(row["miou"])
    curve = {k: round(float(np.mean(v)), 3) for k, v in sorted(by_count.items())}
    print(f"{mode:<8} mIoU by count: {curve}")

print(f"CSVs written under {out_dir}/")
