"""posefield: weakly-supervised 6D object pose estimation at desk scale.

The pipeline learns an implicit object model (density/color/feature MLPs)
from posed segmented images, distills view-invariant per-pixel features
into a CNN with a contrastive loss, and recovers 6D poses by matching CNN
features against a featured surface cloud with robust PnP.
"""

__version__ = "0.1.0"
