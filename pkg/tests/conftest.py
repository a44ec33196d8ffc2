import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))


def perturb(model, rng, scale):
    """Move every parameter (including identity modulators and zero tokens) off its init."""
    for t in model.params.values():
        t.data = t.data + scale * rng.standard_normal(t.shape)
