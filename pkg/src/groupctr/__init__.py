"""CTR prediction over lifelong behavior sequences via interest-group attention."""

__version__ = "0.1.0"
