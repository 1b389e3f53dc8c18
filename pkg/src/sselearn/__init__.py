"""Self-supervised speech sequence embeddings: stretch pretraining, kNN self-labeling, MAP and NED/COV evaluation."""

__version__ = "0.1.0"
