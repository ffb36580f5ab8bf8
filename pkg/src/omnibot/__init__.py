"""omnibot: one transformer policy driving four toy robot embodiments."""

__version__ = "0.1.0"
