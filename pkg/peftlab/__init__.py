"""PEFT Lab package.

Parameter-efficient fine-tuning on a tiny numpy transformer: autodiff core,
method registry with plugin discovery, toy datasets, metrics and the
experiment runner behind the ``pf`` command.
"""

__version__ = "1.0.0"

__all__ = ["__version__"]
