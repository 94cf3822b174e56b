"""Toy-scale guidance distillation: frozen diffusion base + trainable adapters.

Subpackages/modules:
    nn           dense f64 kernel: tensors with reverse-mode gradients, MLPs,
                 attention, Fourier features, Adam
    diffusion    2-D mixture data, noise schedule, denoiser, CFG, samplers
    trajectories guided-trajectory generation and the .agdt binary cache
    adapters     condition encoders + the four adapter architectures
    distill      adapter distillation loop and the full-finetune baseline
    evaluation   endpoint MSE, energy distance, kNN precision/recall, sweeps
    cli          experiment driver
"""

__version__ = "0.1.0"
