"""Cascaded multi-resolution generator trained with conditional IMLE."""
__version__ = "0.1.0"
