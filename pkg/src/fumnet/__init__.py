"""Few-shot classification by sequence prediction over feature channels."""

from .episodes import (
    ChannelVectorSequence,
    Dataset,
    DatasetError,
    Episode,
    build_channel_vector_sequence,
    class_level_average,
    generate_synthetic_dataset,
    load_folder_dataset,
    preprocess,
    sample_episode,
)
from .model import FumModel, ModelConfig, model_forward
from .tensor import Tensor, backward, gradcheck, no_grad, precision

__version__ = "0.1.0"

__all__ = [
    "ChannelVectorSequence", "Dataset", "DatasetError", "Episode", "FumModel", "ModelConfig", "Tensor",
    "backward", "build_channel_vector_sequence", "class_level_average", "generate_synthetic_dataset",
    "gradcheck", "load_folder_dataset", "model_forward", "no_grad", "precision", "preprocess",
    "sample_episode",
]
