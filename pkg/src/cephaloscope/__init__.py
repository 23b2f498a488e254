"""Age estimation from lateral cephalograms with saliency-guided retesting."""

__version__ = "0.1.0"
