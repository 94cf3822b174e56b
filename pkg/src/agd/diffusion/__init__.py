"""Conditional 2-D diffusion: data, schedule, denoiser, CFG, samplers."""

from agd.diffusion.data import GaussianMixture, ToyDataset, ring_dataset
from agd.diffusion.schedule import NoiseSchedule
from agd.diffusion.denoiser import BaseTrainConfig, Denoiser, cfg_combine, train_base
from agd.diffusion.sampling import (
    CfgTeacher,
    OracleDenoiser,
    SamplerKind,
    forward_perturb,
    sample_batch,
)

__all__ = [
    "BaseTrainConfig",
    "GaussianMixture",
    "ToyDataset",
    "ring_dataset",
    "NoiseSchedule",
    "Denoiser",
    "cfg_combine",
    "train_base",
    "CfgTeacher",
    "OracleDenoiser",
    "SamplerKind",
    "forward_perturb",
    "sample_batch",
]
