"""Robot-arm perception from a single colour image: synthetic scenes, a small
two-branch multi-objective CNN written against numpy, and its evaluation."""

__version__ = "0.1.0"
