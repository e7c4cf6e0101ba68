"""Tiny seeded models shared by the unit tests."""
import torch

from acmo.data import SyntheticDatasetSpec, generate_synthetic_dataset
from acmo.diffusion import Denoiser, DenoiserConfig
from acmo.vae import MotionVAE, VAEConfig

D = torch.float64
TINY_VAE = VAEConfig(latent_tokens=2, latent_dim=8, width=16, heads=2, max_len=48)
TINY_DEN = DenoiserConfig(latent_tokens=2, latent_dim=8, width=16, layers=2, heads=2, K=50)


def tiny_vae(seed: int = 2) -> MotionVAE:
    torch.manual_seed(seed)
    return MotionVAE(TINY_VAE).double().eval()


def tiny_denoiser(seed: int = 1, **overrides) -> Denoiser:
    torch.manual_seed(seed)
    return Denoiser(DenoiserConfig(**{**TINY_DEN.__dict__, **overrides})).double().eval()


def tiny_styled(per_family: int = 1, length: int = 12):
    spec = SyntheticDatasetSpec(per_family=per_family, length_range=(length, length), styles=("amplitude",))
    return generate_synthetic_dataset(spec)
