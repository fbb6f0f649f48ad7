"""Data-parallel training of a scaled AlexNet-shaped network with NumPy.

Replicas update on disjoint shards and then exchange and average their
weights, biases and momentum every step; a double-buffered loader
overlaps batch preparation with training.
"""
from .model import Hyper, NetworkSpec, ParamState, build_alexnet_scaled, init_params
from .replicasync import TransportMode, WorkloadStub, train_replicated

__all__ = ["Hyper", "NetworkSpec", "ParamState", "build_alexnet_scaled", "init_params",
           "TransportMode", "WorkloadStub", "train_replicated"]
