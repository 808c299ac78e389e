"""Feature-level cooperative perception toolkit for connected vehicles.

Sparse voxel and BEV feature extraction from LiDAR, maxout fusion between
vehicles, a compact wire format, a link/latency simulator and an
evaluation kit with a synthetic occlusion scene generator.
"""

__version__ = "0.1.0"
