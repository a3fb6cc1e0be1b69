"""deblat: tracking of fast-moving blurred objects by deblurring + matting."""

from deblat.imaging import Psf, RasterImage, Region

__version__ = "0.1.0"

__all__ = ["Psf", "RasterImage", "Region", "__version__"]
