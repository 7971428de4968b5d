"""Profile-targeted quality measurement of provider organizations."""

__version__ = "0.1.0"
