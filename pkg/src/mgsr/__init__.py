"""Multi-granularity semantic revision for language-model distillation."""

__version__ = "0.1.0"
