"""Scoring through a child process instead of an in-process scorer.

Spawns the reference adapter (`pip install -e scorer_adapter` first), lets
its checkerboard stub classify patches purely from pixel color over the
stdio wire protocol, and compares the resulting heatmap with the in-process
oracle on the same slide. Artifacts land in ./demo_output/external.

    python3 demos/external_scorer.py
"""

import shutil
import sys
from pathlib import Path

import numpy as np

from pnstage.heatmap import stitch_heatmap
from pnstage.roi import tissue_mask
from pnstage.scoring import OracleScorer, spawn_external
from pnstage.slide_io import SyntheticSpec, synthesize_slide

if shutil.which("pnstage-scorer") is None:
    sys.exit("pnstage-scorer not on PATH - install the scorer_adapter package")

OUT = Path("demo_output/external")
OUT.mkdir(parents=True, exist_ok=True)

spec = SyntheticSpec(seed=5, width_0=1280, height_0=1280, tissue_blobs=2,
                     tumor_lesions=[((576 + 64, 576 + 64), 520.0)])
bundle, annotation = synthesize_slide(spec, OUT / "slide", slide_id="demo")
tissue = tissue_mask(bundle)

# The handshake and every request/response frame cross a process boundary;
# the pipeline only sees the scorer interface.
scorer = spawn_external("pnstage-scorer --stub checkerboard")
try:
    external = stitch_heatmap(bundle, tissue, scorer)
finally:
    scorer.close()

oracle = stitch_heatmap(bundle, tissue,
                        OracleScorer({"demo": annotation.grid}, sigma=0.0))

# The stub votes 1.0 whenever red outweighs green in a patch, so its
# heatmap is a coarser, saturated cousin of the tumor-fraction oracle.
hot_ext = external.grid >= 0.9
hot_orc = oracle.grid >= 0.9
both = np.logical_and(hot_ext, hot_orc).sum()
print(f"cells at or above 0.9: external {hot_ext.sum()}, "
      f"oracle {hot_orc.sum()}, overlap {both}")
print(f"external heatmap values: {sorted(set(external.grid.ravel().tolist()))}")
print("oracle covered by external:",
      bool(np.all(hot_ext | ~hot_orc)))
