"""NV-centre / interface-trap / hole-injection photocurrent simulator and fitter."""

__version__ = "0.1.0"
