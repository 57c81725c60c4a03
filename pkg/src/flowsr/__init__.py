"""flowsr: conditional continuous-time diffusion engine for image
super-resolution with probability-flow sampling and adjoint-trained
image quality loss."""

from .autodiff import Tensor, backward, no_grad, vjp
from .imaging import SrSample, bicubic_resize, make_synthetic_dataset, psnr, ssim
from .network import NetworkConfig, ScoreNetwork
from .process import BetaSchedule, ConditionalForwardProcess
from .sampler import SamplerConfig, SampleResult, probability_flow_sample
from .training import FeatureExtractor, TrainConfig, estimate_sigma2, train

__version__ = "0.1.0"
