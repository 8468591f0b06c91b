"""Domain-specific batch normalization with two-stage pseudo-label adaptation,
built on a small numpy autodiff core and run on synthetic domain shift."""

__version__ = "0.1.0"
