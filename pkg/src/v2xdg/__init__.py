"""Weather-robust cooperative LiDAR perception toolkit (desk-scale)."""

__version__ = "0.1.0"
