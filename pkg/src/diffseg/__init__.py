"""Diffusion-based binary segmentation with dual-encoder conditioning,
Fourier-space feature filtering, and EM consensus fusion of sampled masks."""

from .schedule import NoiseSchedule, build_schedule, forward_noise, loss, reverse_step
from .ffparser import SpectralFilter, fft2, ifft2, modulate, ffparser_apply
from .network import ModelConfig, NoisePredictor, dynamic_condition, predict_noise
from .sampler import SamplerConfig, EnsembleResult, sample_one, sample_ensemble
from .staple import RaterStack, StapleEstimate, staple_fuse
from .metrics import dice, iou
from .synthdata import CorpusSpec, SegSample, generate_corpus, load_corpus
from .trainer import TrainConfig, train, save_checkpoint, load_checkpoint

__version__ = "0.1.0"
