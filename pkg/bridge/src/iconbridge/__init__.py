"""Exporter bridging pretrained volumetric models to the iconprobe
interchange formats (IPFEA1 features, IPAFF1/IPDSP1 transforms)."""

__version__ = "0.1.0"
