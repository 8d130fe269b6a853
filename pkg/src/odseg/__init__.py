"""Multi-scale ODConv3D U-Net segmentation toolkit."""
__version__ = "0.1.0"
