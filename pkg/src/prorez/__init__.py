"""Two-stage progressive-resizing transfer learning for patch-based slide classification."""

__version__ = "0.1.0"
