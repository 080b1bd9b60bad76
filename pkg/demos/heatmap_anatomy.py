"""One slide, step by step: tissue, overlap-tile stitching, features.

Builds a single synthetic slide with a known tumor disk, then walks the
per-slide half of the pipeline and prints what each stage sees. Writes its
artifacts into ./demo_output/anatomy.

    python3 demos/heatmap_anatomy.py
"""

from pathlib import Path

import numpy as np

from pnstage.heatmap import (extract_features, stitch_heatmap,
                             threshold_regions, tissue_cells, write_heatmap,
                             write_heatmap_png)
from pnstage.roi import tissue_mask
from pnstage.scoring import ConstantScorer, OracleScorer
from pnstage.slide_io import SyntheticSpec, synthesize_slide

OUT = Path("demo_output/anatomy")
OUT.mkdir(parents=True, exist_ok=True)

# A 1280x1280 slide: one tissue blob, one 300 px tumor disk snapped to a
# heatmap cell center (multiples of 128, plus 64) so the geometry is tidy.
spec = SyntheticSpec(seed=21, width_0=1280, height_0=1280, tissue_blobs=2,
                     tumor_lesions=[((640 + 64, 640 + 64), 300.0)])
bundle, annotation = synthesize_slide(spec, OUT / "slide", slide_id="demo")
print(f"slide: {bundle.width}x{bundle.height}, "
      f"{len(bundle.levels)} pyramid levels")

# Tissue is whatever is darker than the near-white background at the
# 32x-downsampled level; the mask drives which patches get scored at all.
tissue = tissue_mask(bundle)
print(f"tissue mask: {tissue.grid.shape[1]}x{tissue.grid.shape[0]} px at "
      f"level {tissue.level}, {tissue.grid.mean():.1%} tissue")

# Overlap-tile mechanics: with 256 px patches on a 128 px grid, every
# interior heatmap cell is covered by four patches and gets their mean.
# A constant scorer therefore yields a constant heatmap on tissue - a
# useful sanity check that stitching adds nothing of its own.
flat = stitch_heatmap(bundle, tissue, ConstantScorer(0.5))
cells = tissue_cells(tissue, bundle.width, bundle.height)
print(f"constant scorer: heatmap values on tissue = "
      f"{sorted(set(flat.grid[cells].tolist()))}")

# The oracle scorer returns each patch's true tumor fraction (sigma would
# add noise). Cells deep inside the disk reach 1.0; the rim tapers.
masks = {"demo": annotation.grid}
hm = stitch_heatmap(bundle, tissue, OracleScorer(masks, sigma=0.0))
write_heatmap(OUT / "demo.hmap", hm)
write_heatmap_png(OUT / "demo.png", hm)
print(f"oracle heatmap: max {hm.grid.max():.3f}, "
      f"{(hm.grid >= 0.9).sum()} cells at or above 0.9")

# Coverage comparison: disjoint tiling scores fewer patches, so the
# half-overlap map dominates it cell for cell on nonzero support.
disjoint = stitch_heatmap(bundle, tissue, OracleScorer(masks, sigma=0.0),
                          overlap="none")
print(f"nonzero cells: half={np.count_nonzero(hm.grid)} "
      f"none={np.count_nonzero(disjoint.grid)}")

# Features condense the heatmap into the 11 numbers the classifier uses:
# largest-region shape/intensity, totals over all regions, and two
# tissue-area terms.
regions = threshold_regions(hm, t=0.9)
fv = extract_features(hm, cells, t=0.9)
largest = max(regions, key=lambda r: r.area)
print(f"regions at 0.9: {len(regions)}; largest spans {largest.area} cells")
for name, value in zip(fv.__dataclass_fields__, fv.as_array()):
    print(f"  {name} = {value:.6g}")
