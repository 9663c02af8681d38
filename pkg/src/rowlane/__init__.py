"""Row-wise classification lane marker detection with horizontal reduction modules."""

__version__ = "0.1.0"
