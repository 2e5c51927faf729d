"""Two-stage query-transformer bootstrapping on a synthetic multimodal world.

Stage 1 aligns a query transformer to a frozen image encoder with joint
contrastive / generation / matching objectives; stage 2 teaches a frozen toy
language model to read the projected query outputs as soft visual prompts.
"""

import os as _os

# The dense kernels here are small; oversubscribed BLAS thread pools slow
# them down badly. Only takes effect if qfkit is imported before numpy.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

from . import autodiff, checkpoint, data, frozen, objectives, optim, qformer, vocab  # noqa: E402

__version__ = "0.1.0"
