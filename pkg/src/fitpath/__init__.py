"""Joint mixed-precision quantization and pruning by Fisher-guided path planning."""
from .compression import CompressionConfig, PruneMask, quantize_acts, quantize_weights
from .fisher import FisherEstimate, estimate_fisher, fit
from .models import Model, build_lenet, build_mlp, forward
from .planner import InfeasibleError, Schedules, SearchOptions, fitcompress_search, sequential_baselines

__all__ = [
    "CompressionConfig", "PruneMask", "quantize_acts", "quantize_weights",
    "FisherEstimate", "estimate_fisher", "fit",
    "Model", "build_lenet", "build_mlp", "forward",
    "InfeasibleError", "Schedules", "SearchOptions", "fitcompress_search", "sequential_baselines",
]
