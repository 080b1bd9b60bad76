import numpy as np
import pytest

from pnstage.slide_io import write_bundle


@pytest.fixture
def make_bundle(tmp_path):
    """Build a slide bundle from a level-0 array; returns the SlideBundle."""
    counter = [0]

    def build(level0, slide_id=None, n_levels=6):
        counter[0] += 1
        sid = slide_id or f"slide{counter[0]}"
        return write_bundle(tmp_path / sid, sid,
                            np.asarray(level0, dtype=np.uint8),
                            n_levels=n_levels)

    return build


def flat_rgb(width, height, color):
    """Constant-color level-0 image."""
    arr = np.empty((height, width, 3), dtype=np.uint8)
    arr[:] = color
    return arr


# Dark enough to count as tissue everywhere (gray = 0.4), light background
# is (255, 255, 255) with gray exactly 1.0.
TISSUE_RGB = (102, 102, 102)
