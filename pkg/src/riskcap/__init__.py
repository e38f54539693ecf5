"""Joint traffic-scene captioning and risk-object localization at desk scale."""

__version__ = "0.1.0"
