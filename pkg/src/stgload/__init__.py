"""Graph-based multi-building load forecasting with a learned building-similarity graph."""
from .dataio import BuildingDataset, make_windows, split_chrono, synth_generate
from .graph import init_embeddings, refresh_graph
from .model import AttGcnModel, ModelConfig, load_model, save_model
from .train_eval import TrainConfig, metrics, naive_forecast, train

__all__ = [
    "AttGcnModel", "BuildingDataset", "ModelConfig", "TrainConfig", "init_embeddings",
    "load_model", "make_windows", "metrics", "naive_forecast", "refresh_graph", "save_model",
    "split_chrono", "synth_generate", "train",
]
__version__ = "0.1.0"
