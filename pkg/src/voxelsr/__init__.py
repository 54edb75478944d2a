"""voxelsr: 3D single-image super-resolution for volumetric MRI.

Subpackages by concern: ``autodiff`` (reverse-mode engine), ``models``
(generator/critic), ``kspace`` (resolution degradation), ``patches``
(tiling and merge), ``training`` (losses, Adam, schedules), ``metrics``
(SSIM/PSNR/NRMSE), ``volumes`` (I/O, splits, phantoms), ``cli``.
"""

__version__ = "0.1.0"
