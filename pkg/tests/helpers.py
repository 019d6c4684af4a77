"""Small model configurations shared by the backbone tests."""

from semapop.gan import GanTrainingConfig
from semapop.vae import VaeTrainingConfig


def tiny_gan_cfg(**kw) -> GanTrainingConfig:
    base = dict(
        g_hidden=(16, 16), d_hidden=(16, 16), adapter_hidden=16, cond_dim=8, noise_dim=8,
        batch_size=32, steps=3, lr_G=1e-3, lr_D=1e-3,
    )
    base.update(kw)
    return GanTrainingConfig(**base)


def tiny_vae_cfg(**kw) -> VaeTrainingConfig:
    base = dict(
        latent_dim=4, hidden=(16, 16), prior_hidden=8, adapter_hidden=16, cond_dim=8,
        batch_size=64, epochs=2, lr=1e-3,
    )
    base.update(kw)
    return VaeTrainingConfig(**base)


# acceptance outcomes, printed in the terminal summary by conftest
ACCEPTANCE: dict[int, str] = {}
