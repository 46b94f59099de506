"""Dense-inference 3D CNN segmentation with a fully connected CRF refiner."""
from .network import NetworkParams, NetworkSpec, LayerSpec, preset, init_params, forward
from .tensor import Volume

__all__ = ["LayerSpec", "NetworkParams", "NetworkSpec", "Volume", "forward", "init_params", "preset"]
__version__ = "0.1.0"
