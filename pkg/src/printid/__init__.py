"""printid: identify additively manufactured objects from synthetic
transmission images of their infill geometry."""

__version__ = "0.1.0"
