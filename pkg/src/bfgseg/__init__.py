"""Few-shot point cloud segmentation with sparse prototypes and
bidirectional feature globalization."""
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
__all__ = ["KERNEL_BACKEND", "__version__"]
