"""Instance-aware low-rank soft prompts on a desk-scale transformer."""

__version__ = "0.1.0"
