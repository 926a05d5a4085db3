"""Dynamic filter networks: sample-specific generated filters on a numpy autodiff core."""

__version__ = "0.1.0"
