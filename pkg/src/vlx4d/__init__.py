"""Desk-scale 4D object pipeline: dynamic tokens from spatiotemporal point
clouds, flow-matching surface decoding, Gaussian splatting, point tracking,
and conditional token generation on procedural synthetic scenes."""

__version__ = "0.1.0"
