"""Persona-conditioned WGAN-GP backbone.

The generator maps ``[z; adapter(e)]`` through an MLP whose hidden layers are
FiLM-modulated by the conditioning vector, then emits categorical logits
(sampled with Gumbel-Softmax) and standardized numerical values.  The critic
is either a projection critic ``h(x) + <phi(x), psi(c)>`` or a FiLM-modulated
trunk with a scalar head.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from semapop.checkpoint import ModelCheckpoint, save_checkpoint, tensors_from_modules, write_metrics
from semapop.conditioning import Adapter, FiLM
from semapop.marginal import MarginalSpec, build_marginal_spec, marginal_terms
from semapop.population import Population, decode, encode
from semapop.schema import AttributeSchema

logger = logging.getLogger(__name__)

GUMBEL_EPS = 1e-20


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class GanTrainingConfig:
    lambda_gp: float = 10.0
    lambda_m: float = 0.4
    lr_G: float = 2e-5
    lr_D: float = 2e-5
    betas: tuple[float, float] = (0.9, 0.999)
    n_critic: int = 5
    noise_dim: int = 128
    batch_size: int = 512
    steps: int = 20000
    gumbel_tau: float = 0.66
    g_cond: str = "film"
    d_cond: str = "projection"
    marg_reg: bool = True
    seed: int = 0
    adapter_hidden: int = 1024
    cond_dim: int = 128
    adapter_dropout: float = 0.1
    g_hidden: tuple[int, ...] = (256, 512, 256)
    d_hidden: tuple[int, ...] = (256, 512, 256)
    film_position: str = "post_activation"
    shared_adapter: bool = False
    marg_bins: int = 10
    marg_eps: float = 1e-8
    checkpoint_every: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.g_hidden = tuple(self.g_hidden)
        self.d_hidden = tuple(self.d_hidden)
        if self.lambda_gp < 0 or self.lambda_m < 0:
            raise ValueError("loss weights must be non-negative")
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")
        if self.gumbel_tau <= 0:
            raise ValueError("gumbel_tau must be positive")
        if self.g_cond not in ("film", "concat"):
            raise ValueError(f"g_cond must be 'film' or 'concat', got {self.g_cond!r}")
        if self.d_cond not in ("projection", "film"):
            raise ValueError(f"d_cond must be 'projection' or 'film', got {self.d_cond!r}")
        if self.film_position not in ("post_activation", "pre_activation"):
            raise ValueError(f"unknown film_position {self.film_position!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("betas", "g_hidden", "d_hidden"):
            d[k] = list(d[k])
        return d


def gumbel_softmax(logits: torch.Tensor, tau: float, hard: bool, generator: torch.Generator | None = None):
    """Gumbel-Softmax over the last axis.

    With ``hard=True`` the forward value is an exact one-hot and gradients flow
    through the relaxed sample (straight-through).
    """
    u = torch.rand(logits.shape, generator=generator, dtype=logits.dtype)
    g = -torch.log(-torch.log(u + GUMBEL_EPS) + GUMBEL_EPS)
    y = torch.softmax((logits + g) / tau, dim=-1)
    if not hard:
        return y
    index = y.argmax(dim=-1, keepdim=True)
    y_hard = torch.zeros_like(y).scatter_(-1, index, 1.0)
    # y - y.detach() is exactly zero in value, so the forward pass is y_hard
    return y_hard + (y - y.detach())


class Generator(nn.Module):
    def __init__(self, schema: AttributeSchema, embed_dim: int, cfg: GanTrainingConfig, adapter: Adapter | None = None):
        super().__init__()
        self.schema = schema
        self.noise_dim = cfg.noise_dim
        self.use_film = cfg.g_cond == "film"
        self.film_position = cfg.film_position
        self.adapter = adapter or Adapter(embed_dim, cfg.adapter_hidden, cfg.cond_dim, cfg.adapter_dropout)
        cond_dim = self.adapter.cond_dim
        dims = (cfg.noise_dim + cond_dim, *cfg.g_hidden)
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.films = nn.ModuleList(FiLM(cond_dim, d) for d in cfg.g_hidden) if self.use_film else nn.ModuleList()
        self.act = nn.ReLU()
        self.head = nn.Linear(dims[-1], schema.encoded_width)

    def hidden(self, z: torch.Tensor, c: torch.Tensor, use_film: bool = True) -> torch.Tensor:
        h = torch.cat([z, c], dim=-1)
        modulate = self.use_film and use_film
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if modulate and self.film_position == "pre_activation":
                h = self.films[i](h, c)
            h = self.act(h)
            if modulate and self.film_position == "post_activation":
                h = self.films[i](h, c)
        return h

    def raw(self, z: torch.Tensor, e: torch.Tensor, generator=None, use_film: bool = True) -> torch.Tensor:
        c = self.adapter(e, generator=generator)
        return self.head(self.hidden(z, c, use_film=use_film))

    def forward(self, z, e, tau: float, hard: bool, generator=None, use_film: bool = True) -> torch.Tensor:
        out = self.raw(z, e, generator=generator, use_film=use_film)
        parts = []
        for s, sl in self.schema.blocks():
            block = out[:, sl]
            parts.append(gumbel_softmax(block, tau, hard, generator) if s.is_categorical else block)
        return torch.cat(parts, dim=1)


class Critic(nn.Module):
    def __init__(self, schema: AttributeSchema, embed_dim: int, cfg: GanTrainingConfig, adapter: Adapter | None = None):
        super().__init__()
        self.mode = cfg.d_cond
        self.adapter = adapter or Adapter(embed_dim, cfg.adapter_hidden, cfg.cond_dim, cfg.adapter_dropout)
        cond_dim = self.adapter.cond_dim
        dims = (schema.encoded_width, *cfg.d_hidden)
        self.trunk = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.act = nn.LeakyReLU(0.2)
        self.head = nn.Linear(dims[-1], 1)
        if self.mode == "projection":
            self.psi = nn.Linear(cond_dim, dims[-1])
            self.films = nn.ModuleList()
        else:
            self.psi = None
            self.films = nn.ModuleList(FiLM(cond_dim, d) for d in cfg.d_hidden)

    def features(self, x: torch.Tensor, c: torch.Tensor | None = None) -> torch.Tensor:
        h = x
        for i, layer in enumerate(self.trunk):
            h = self.act(layer(h))
            if self.mode == "film":
                h = self.films[i](h, c)
        return h

    def forward(self, x: torch.Tensor, e: torch.Tensor, generator=None) -> torch.Tensor:
        return self.score(x, self.adapter(e, generator=generator))

    def score(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        """Critic value for samples and already-adapted conditioning vectors."""
        if self.mode == "projection":
            phi = self.features(x)
            return self.head(phi).squeeze(-1) + (phi * self.psi(c)).sum(dim=-1)
        return self.head(self.features(x, c)).squeeze(-1)


def critic_score(x, e, critic: Critic, mode: str | None = None) -> torch.Tensor:
    if mode is not None and mode != critic.mode:
        raise ValueError(f"critic was built in {critic.mode!r} mode, not {mode!r}")
    return critic(torch.as_tensor(x, dtype=torch.float32), torch.as_tensor(e, dtype=torch.float32))


def gradient_penalty(critic, x_real, x_fake, e, generator: torch.Generator | None = None, seed: int | None = None):
    """Mean of ``(||grad_x D(x_interp, e)||_2 - 1)^2`` over random interpolates."""
    if x_real.shape != x_fake.shape:
        raise ValueError("real and fake batches must have equal shapes")
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    alpha = torch.rand((x_real.shape[0], 1), generator=generator, dtype=x_real.dtype)
    x_interp = (alpha * x_real + (1 - alpha) * x_fake.detach()).requires_grad_(True)
    scores = critic(x_interp, e)
    (grad,) = torch.autograd.grad(scores.sum(), x_interp, create_graph=True)
    return ((grad.norm(2, dim=1) - 1) ** 2).mean()


def critic_loss(x_real, x_fake, e, critic: Critic, lambda_gp: float, generator=None):
    """``E[D(fake)] - E[D(real)] + lambda_gp * GP`` in a single critic pass.

    Real, fake and interpolated rows share one adapted conditioning batch and
    are scored together, which matches three separate calls but dispatches a
    third of the operations.
    """
    b = x_real.shape[0]
    x_fake = x_fake.detach()
    c = critic.adapter(e, generator=generator)
    if lambda_gp > 0:
        alpha = torch.rand((b, 1), generator=generator, dtype=x_real.dtype)
        x_interp = (alpha * x_real + (1 - alpha) * x_fake).requires_grad_(True)
        scores = critic.score(torch.cat([x_real, x_fake, x_interp]), torch.cat([c, c, c]))
        (grad,) = torch.autograd.grad(scores[2 * b:].sum(), x_interp, create_graph=True)
        gp = ((grad.norm(2, dim=1) - 1) ** 2).mean()
    else:
        # separate passes keep E[D(x)] - E[D(x)] exactly zero for identical batches
        scores = torch.cat([critic.score(x_real, c), critic.score(x_fake, c)])
        gp = x_real.new_zeros(())
    return scores[b:2 * b].mean() - scores[:b].mean() + lambda_gp * gp, gp


def generator_loss(x_fake, e, critic, cfg: GanTrainingConfig, spec: MarginalSpec | None, schema, generator=None):
    adv = -critic(x_fake, e, generator=generator).mean()
    if not cfg.marg_reg:
        return adv, x_fake.new_zeros(())
    cat, cont = marginal_terms(x_fake, spec, schema, cfg.marg_eps)
    marg = cont + cat
    return adv + cfg.lambda_m * marg, marg


def wgan_losses(x_real, e, z, G: Generator, D: Critic, cfg: GanTrainingConfig, spec=None, seed: int = 0):
    """Critic and generator objectives on one batch (no parameter updates)."""
    gen = torch.Generator().manual_seed(seed)
    x_fake = G(z, e, cfg.gumbel_tau, hard=False, generator=gen)
    loss_d, _ = critic_loss(x_real, x_fake, e, D, cfg.lambda_gp, gen)
    loss_g, _ = generator_loss(x_fake, e, D, cfg, spec, G.schema, gen)
    return loss_d, loss_g


@dataclass
class GanModel:
    generator: Generator
    critic: Critic
    schema: AttributeSchema
    spec: MarginalSpec
    cfg: GanTrainingConfig
    metrics: list[dict] = field(default_factory=list)

    def checkpoint(self) -> ModelCheckpoint:
        return ModelCheckpoint(
            backbone="gan",
            schema=self.schema,
            marginal_spec=self.spec,
            config=self.cfg.to_dict(),
            embed_dim=self.generator.adapter.embed_dim,
            tensors=tensors_from_modules(generator=self.generator, critic=self.critic),
            metrics=list(self.metrics),
        )


def build_models(schema: AttributeSchema, embed_dim: int, cfg: GanTrainingConfig) -> tuple[Generator, Critic]:
    torch.manual_seed(cfg.seed)
    adapter = Adapter(embed_dim, cfg.adapter_hidden, cfg.cond_dim, cfg.adapter_dropout) if cfg.shared_adapter else None
    G = Generator(schema, embed_dim, cfg, adapter)
    D = Critic(schema, embed_dim, cfg, adapter)
    return G, D


def model_from_checkpoint(ckpt: ModelCheckpoint) -> GanModel:
    if ckpt.backbone != "gan":
        raise ValueError(f"checkpoint backbone is {ckpt.backbone!r}, expected 'gan'")
    cfg = GanTrainingConfig(**ckpt.config)
    G, D = build_models(ckpt.schema, ckpt.embed_dim, cfg)
    G.load_state_dict(ckpt.state_dict("generator"))
    D.load_state_dict(ckpt.state_dict("critic"))
    G.eval()
    D.eval()
    return GanModel(G, D, ckpt.schema, ckpt.marginal_spec, cfg, list(ckpt.metrics))


def _check_finite(step: int, **values):
    for name, v in values.items():
        if not math.isfinite(v):
            raise TrainingDiverged(f"step {step}: {name} became non-finite ({v})")


def train(
    train_pop: Population,
    embeddings,
    schema: AttributeSchema | None = None,
    cfg: GanTrainingConfig | None = None,
    spec: MarginalSpec | None = None,
    out_dir: str | Path | None = None,
) -> GanModel:
    """Alternate ``n_critic`` critic updates with one generator update.

    Fully deterministic given ``cfg.seed``: parameter initialization, batch
    indices, noise, Gumbel draws, dropout masks, and interpolation weights
    all come from seeded generators.
    """
    cfg = cfg or GanTrainingConfig()
    schema = schema or train_pop.schema
    E = torch.as_tensor(np.asarray(getattr(embeddings, "matrix", embeddings)), dtype=torch.float32)
    if E.shape[0] != train_pop.n:
        raise ValueError(f"{E.shape[0]} embeddings for {train_pop.n} agents")
    spec = spec or build_marginal_spec(train_pop, schema, cfg.marg_bins)
    X = torch.as_tensor(encode(train_pop, schema), dtype=torch.float32)
    G, D = build_models(schema, E.shape[1], cfg)
    opt_g = torch.optim.Adam(G.parameters(), lr=cfg.lr_G, betas=cfg.betas, foreach=True)
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.lr_D, betas=cfg.betas, foreach=True)
    gen = torch.Generator().manual_seed(cfg.seed)
    n, bs = X.shape[0], min(cfg.batch_size, X.shape[0])
    model = GanModel(G, D, schema, spec, cfg)
    G.train()
    D.train()
    started = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        for _ in range(cfg.n_critic):
            idx = torch.randint(n, (bs,), generator=gen)
            x_real, e = X[idx], E[idx]
            z = torch.randn((bs, cfg.noise_dim), generator=gen)
            with torch.no_grad():
                x_fake = G(z, e, cfg.gumbel_tau, hard=False, generator=gen)
            loss_d, gp = critic_loss(x_real, x_fake, e, D, cfg.lambda_gp, gen)
            opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            opt_d.step()
        idx = torch.randint(n, (bs,), generator=gen)
        e = E[idx]
        z = torch.randn((bs, cfg.noise_dim), generator=gen)
        x_fake = G(z, e, cfg.gumbel_tau, hard=False, generator=gen)
        loss_g, marg = generator_loss(x_fake, e, D, cfg, spec, schema, gen)
        opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        opt_g.step()
        row = {"step": step, "L_D": loss_d.item(), "L_G": loss_g.item(), "L_marg": marg.item(), "gp": gp.item()}
        _check_finite(step, L_D=row["L_D"], L_G=row["L_G"])
        model.metrics.append(row)
        if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(model.checkpoint(), Path(out_dir) / f"step_{step:07d}")
    G.eval()
    D.eval()
    logger.info("trained GAN for %d steps in %.1fs", cfg.steps, time.perf_counter() - started)
    if out_dir is not None:
        save_checkpoint(model.checkpoint(), out_dir)
        write_metrics(model.metrics, Path(out_dir) / "metrics.csv")
    return model


def draw_noise(n: int, noise_dim: int, seed: int) -> torch.Tensor:
    return torch.randn((n, noise_dim), generator=torch.Generator().manual_seed(seed))


@torch.no_grad()
def generate_encoded(model: GanModel, embeddings, z: torch.Tensor, seed: int, batch_size: int = 8192) -> np.ndarray:
    """Hard straight-through samples for given noise; Gumbel draws seeded by ``seed``."""
    G = model.generator
    G.eval()
    E = torch.as_tensor(np.asarray(getattr(embeddings, "matrix", embeddings)), dtype=torch.float32)
    if E.shape[1] != G.adapter.embed_dim:
        raise ValueError(f"embedding dim {E.shape[1]} != model {G.adapter.embed_dim}")
    gen = torch.Generator().manual_seed(seed + 1)
    chunks = [
        G(z[i:i + batch_size], E[i:i + batch_size], model.cfg.gumbel_tau, hard=True, generator=gen)
        for i in range(0, E.shape[0], batch_size)
    ]
    return torch.cat(chunks).double().numpy()


def sample_population(model: GanModel | ModelCheckpoint, embeddings, seed: int) -> Population:
    """One agent per embedding row: ``z ~ N(0, I)``, hard generation, decode."""
    if isinstance(model, ModelCheckpoint):
        model = model_from_checkpoint(model)
    E = np.asarray(getattr(embeddings, "matrix", embeddings))
    z = draw_noise(E.shape[0], model.cfg.noise_dim, seed)
    return decode(generate_encoded(model, E, z, seed), model.schema)
