"""LDR-guided hierarchical training of split autoencoders with entropy-scaled
latent quantization and a simulated rate-limited channel."""

from .errors import *  # noqa: F401,F403
from .ldr import LdrConfig, Partition, class_rate, coding_rate, delta_r, delta_r_grad, ldr_ssl_loss
from .nn import Model, build_model, classify, encode, load_model, save_model, side_features
from .codec import QuantizationProfile, decode_stream, dequantize, encode_stream, fit_profile, quantize, total_entropy
from .trainer import TrainConfig, TrainReport, three_step_train

__version__ = "0.1.0"
