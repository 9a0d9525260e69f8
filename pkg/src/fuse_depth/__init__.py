"""Image + event monocular depth at toy scale.

Event voxelization, frequency-decoupled fusion, two-stage LoRA transfer from
an image-only teacher, losses, degradation, metrics and a synthetic data
generator, all runnable on CPU.
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"
