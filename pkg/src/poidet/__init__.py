"""poidet: a query-based multi-modal 3D detection decoder on synthetic scenes."""

__version__ = "0.1.0"
