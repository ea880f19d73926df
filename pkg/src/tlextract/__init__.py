"""Desk-scale toolkit for studying weight extraction from fine-tuned models.

Three stages, each usable on its own:

1. generate synthetic fine-tuned checkpoints and simulated kernel traces,
2. recover architecture facts (encoder count, size family, vendor/framework)
   from the traces,
3. plan and run similarity-guided bit probing to reconstruct the victim's
   weights from a related base checkpoint.

See the README for the CLI walk-through; the acceptance suite in
``tests/test_acceptance.py`` exercises every stage end to end.
"""

__version__ = "0.1.0"

from .errors import ToolkitError

__all__ = ["ToolkitError", "__version__"]
