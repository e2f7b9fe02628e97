"""Attention-guided deformable-convolution crowd counting at desk scale.

Two networks share one small numpy autodiff core (:mod:`attncount.tensor`):
an attention map generator (:mod:`attncount.amg`) classifies crowd vs
background and turns its class feature maps into an attention map, and a
density map estimator (:mod:`attncount.dme`) built from deformable
convolutions regresses density maps, optionally guided by that attention.
"""

__version__ = "0.1.0"
