from fedhbn.nn.gradcheck import finite_difference_check, finite_difference_report
from fedhbn.nn.layers import (ConfigError, Conv2d, Dense, Flatten, Layer, MaxPool2d, Mode, ReLU,
                              Sequential, StateError)
from fedhbn.nn.losses import DataError, softmax_cross_entropy
from fedhbn.nn.models import build_simple_cnn
from fedhbn.nn.optim import SGD, sgd_step

__all__ = [
    "ConfigError", "Conv2d", "DataError", "Dense", "Flatten", "Layer", "MaxPool2d", "Mode",
    "ReLU", "SGD", "Sequential", "StateError", "build_simple_cnn", "finite_difference_check",
    "finite_difference_report", "sgd_step", "softmax_cross_entropy",
]
