"""Dynamic prediction of acute brain dysfunction states and transitions in ICU stays."""

__version__ = "0.1.0"
