"""Why the edge-aware cost matters for densely packed objects.

Builds two identical touching rectangles whose semantic response cannot tell
them apart, then runs label generation with and without the edge term. The
likelihood maps (1 - cost) are exported as PGM images so the diffusion of
each labeled point is visible.
"""

from pathlib import Path

import numpy as np

from pointbox import LabelGenConfig, adjacent_pair_scene, iou, likelihood_maps, generate_instance_labels, save_image
from pointbox.core import write_pgm

out_dir = Path("demo_out/edges")
out_dir.mkdir(parents=True, exist_ok=True)

scene, merged_sem = adjacent_pair_scene(height=64, width=96, obj_h=20, obj_w=24, gap=1)
save_image(out_dir / "pair.ppm", scene.image)

for lam in (0.0, 0.5):
    result = generate_instance_labels(scene.image, merged_sem, scene.points, LabelGenConfig(lam=lam, tau=0.5))
    ious = [iou(inst.box, gtb) for inst, gtb in zip(result.instances, scene.boxes)]
    supports = [int((result.assignment.labels == k).sum()) for k in (1, 2)]
    print(f"lam={lam}: per-object IoU {[round(v, 3) for v in ious]}, "
          f"pixel supports {supports}")

    # likelihood maps show how far each point diffuses
    for cost_map, pmap in zip(result.cost_maps, likelihood_maps(result.cost_maps)):
        write_pgm(out_dir / f"lam{lam}_inst{cost_map.instance_id}_pmap.pgm",
                  np.rint(255 * pmap).astype(np.uint8))
    write_pgm(out_dir / f"lam{lam}_assignment.pgm",
              (result.assignment.labels * 100).astype(np.uint8))

print(f"\nedge map max at the seam column: "
      f"{generate_instance_labels(scene.image, merged_sem, scene.points).edge.values.max():.2f}")
print(f"maps written under {out_dir}/")
