import numpy as np
import pytest

from protoadapt.bundle_io import FeatureBundle
from protoadapt.rng import Rng


def make_bundle(image_id="img", h=4, w=4, d=3, n=2, c=2, rng_seed=0,
                pred_masks=None, gt_segments=None, **extra) -> FeatureBundle:
    """Small random bundle for plumbing tests."""
    rng = Rng(rng_seed)
    bundle = FeatureBundle(
        image_id=image_id,
        features=rng.gauss_n(h * w * d).reshape(h, w, d).astype(np.float32),
        queries=rng.gauss_n(n * d).reshape(n, d).astype(np.float32),
        text_logits=rng.gauss_n(n * (c + 1)).reshape(n, c + 1).astype(np.float32),
        pred_masks=pred_masks,
        gt_segments=gt_segments,
        **extra,
    )
    return bundle.validate()


def rect_mask(h, w, y0, y1, x0, x1):
    m = np.zeros((h, w), dtype=np.uint8)
    m[y0:y1, x0:x1] = 1
    return m


@pytest.fixture
def rng():
    return Rng(1234)
