"""Direct white-matter tract segmentation from diffusion tensors.

Volumes and NIfTI I/O live in ``volgrid``, tensor fitting in ``dti``, the
layer operators in ``autograd`` (hot loops in ``kernels``), networks and
losses in ``nets``, optimizers in ``optim``, the training loop in ``train``,
statistics in ``metrics`` and synthetic data in ``phantom``.
"""
from .errors import WmtractError
from .volgrid import RoiBox, Volume, read_nifti, write_nifti

__all__ = ["RoiBox", "Volume", "WmtractError", "read_nifti", "write_nifti"]
__version__ = "0.1.0"
