"""signforge: joint optimization of traffic-sign standards and robust classifiers."""

__version__ = "0.1.0"
