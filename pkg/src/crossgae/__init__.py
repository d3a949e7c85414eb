"""Graph autoencoders with cross-correlation decoding, built on a small numpy autodiff core."""
from __future__ import annotations

__version__ = "0.1.0"

from .graphdata import Graph, GraphSet, load_tu_dataset  # noqa: E402
from .models import GraphAutoencoder, ModelConfig, reconstruct  # noqa: E402
from .training import train  # noqa: E402

__all__ = ["Graph", "GraphSet", "load_tu_dataset", "GraphAutoencoder", "ModelConfig", "reconstruct", "train",
           "__version__"]
