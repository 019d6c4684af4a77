"""Prior-conditioned VAE backbone.

The encoder sees only the encoded attributes.  Persona conditioning enters
twice: an adapted vector parameterizes a Gaussian prior over the latent, and
FiLM layers modulate every hidden layer of the decoder.
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
from torch.nn import functional as F

from semapop.checkpoint import ModelCheckpoint, save_checkpoint, tensors_from_modules, write_metrics
from semapop.conditioning import Adapter, FiLM, seeded_dropout
from semapop.gan import TrainingDiverged
from semapop.marginal import MarginalSpec, build_marginal_spec, marginal_terms
from semapop.population import Population, decode, encode
from semapop.schema import AttributeSchema

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)


@dataclass
class VaeTrainingConfig:
    beta: float = 1.0
    lambda_m: float = 2.0
    lr: float = 2e-4
    batch_size: int = 512
    epochs: int = 300
    seed: int = 0
    latent_dim: int = 128
    hidden: tuple[int, ...] = (512, 512, 512)
    prior_hidden: int = 512
    dropout: float = 0.1
    adapter_hidden: int = 1024
    cond_dim: int = 128
    adapter_dropout: float = 0.1
    logvar_clamp: float = 7.0
    marg_reg: bool = True
    marg_bins: int = 10
    marg_eps: float = 1e-8

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.beta < 0 or self.lambda_m < 0:
            raise ValueError("beta and lambda_m must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(d["hidden"])
        return d


def _mlp(dims) -> nn.ModuleList:
    return nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))


class Encoder(nn.Module):
    def __init__(self, width: int, cfg: VaeTrainingConfig):
        super().__init__()
        self.width = width
        self.layers = _mlp((width, *cfg.hidden))
        self.out = nn.Linear(cfg.hidden[-1], 2 * cfg.latent_dim)
        self.dropout = cfg.dropout

    def forward(self, x: torch.Tensor, generator=None) -> tuple[torch.Tensor, torch.Tensor]:
        if x.shape[-1] != self.width:
            raise ValueError(f"encoded width {x.shape[-1]} != encoder input {self.width}")
        h = x
        for layer in self.layers:
            h = seeded_dropout(torch.relu(layer(h)), self.dropout, self.training, generator)
        mu, logvar = self.out(h).chunk(2, dim=-1)
        return mu, logvar


class PriorNet(nn.Module):
    """Conditioning vector to diagonal Gaussian; the output layer starts at zero."""

    def __init__(self, cond_dim: int, cfg: VaeTrainingConfig):
        super().__init__()
        self.fc = nn.Linear(cond_dim, cfg.prior_hidden)
        self.out = nn.Linear(cfg.prior_hidden, 2 * cfg.latent_dim)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, c: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if c.shape[-1] != self.fc.in_features:
            raise ValueError(f"conditioning dim {c.shape[-1]} != prior input {self.fc.in_features}")
        mu, logvar = self.out(torch.relu(self.fc(c))).chunk(2, dim=-1)
        return mu, logvar


class Decoder(nn.Module):
    """FiLM-modulated MLP emitting ``(mu, logvar)`` per numerical attribute and logits per categorical one."""

    def __init__(self, schema: AttributeSchema, cond_dim: int, cfg: VaeTrainingConfig):
        super().__init__()
        self.schema = schema
        self.layers = _mlp((cfg.latent_dim, *cfg.hidden))
        self.films = nn.ModuleList(FiLM(cond_dim, d) for d in cfg.hidden)
        self.n_num = len(schema.numerical)
        self.cat_width = sum(s.width for s in schema.categorical)
        self.num_head = nn.Linear(cfg.hidden[-1], 2 * self.n_num) if self.n_num else None
        self.cat_head = nn.Linear(cfg.hidden[-1], self.cat_width) if self.cat_width else None
        self.dropout = cfg.dropout
        self.logvar_clamp = cfg.logvar_clamp

    def forward(self, z: torch.Tensor, c: torch.Tensor, generator=None, use_film: bool = True):
        """Returns ``(mu, logvar, logits)`` for numerical and categorical columns."""
        h = z
        for layer, film in zip(self.layers, self.films):
            h = torch.relu(layer(h))
            if use_film:
                h = film(h, c)
            h = seeded_dropout(h, self.dropout, self.training, generator)
        if self.num_head is not None:
            mu, logvar = self.num_head(h).chunk(2, dim=-1)
            logvar = logvar.clamp(-self.logvar_clamp, self.logvar_clamp)
        else:
            mu = logvar = h.new_zeros((h.shape[0], 0))
        logits = self.cat_head(h) if self.cat_head is not None else h.new_zeros((h.shape[0], 0))
        return mu, logvar, logits

    def assemble(self, num: torch.Tensor, cat: torch.Tensor) -> torch.Tensor:
        """Interleave numerical values and categorical blocks into schema column order."""
        parts, i, j = [], 0, 0
        for s, _ in self.schema.blocks():
            if s.is_categorical:
                parts.append(cat[:, j:j + s.width])
                j += s.width
            else:
                parts.append(num[:, i:i + 1])
                i += 1
        return torch.cat(parts, dim=1)

    def split(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Inverse of :meth:`assemble`."""
        num = [x[:, sl] for s, sl in self.schema.blocks() if not s.is_categorical]
        cat = [x[:, sl] for s, sl in self.schema.blocks() if s.is_categorical]
        empty = x.new_zeros((x.shape[0], 0))
        return (torch.cat(num, dim=1) if num else empty), (torch.cat(cat, dim=1) if cat else empty)

    def soft_output(self, mu: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
        probs = [torch.softmax(b, dim=1) for b in self._cat_blocks(logits)]
        return self.assemble(mu, torch.cat(probs, dim=1) if probs else logits)

    def hard_output(self, mu: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
        hard = [F.one_hot(b.argmax(dim=1), b.shape[1]).to(mu.dtype) for b in self._cat_blocks(logits)]
        return self.assemble(mu, torch.cat(hard, dim=1) if hard else logits)

    def _cat_blocks(self, logits: torch.Tensor):
        j = 0
        for s in self.schema.categorical:
            yield logits[:, j:j + s.width]
            j += s.width


class SemaPopVAE(nn.Module):
    def __init__(self, schema: AttributeSchema, embed_dim: int, cfg: VaeTrainingConfig):
        super().__init__()
        self.schema = schema
        self.adapter = Adapter(embed_dim, cfg.adapter_hidden, cfg.cond_dim, cfg.adapter_dropout)
        self.encoder = Encoder(schema.encoded_width, cfg)
        self.prior = PriorNet(self.adapter.cond_dim, cfg)
        self.decoder = Decoder(schema, self.adapter.cond_dim, cfg)


def encode_posterior(x, params: SemaPopVAE, generator=None):
    return params.encoder(torch.as_tensor(x, dtype=torch.float32), generator=generator)


def conditional_prior(c, params: SemaPopVAE):
    return params.prior(torch.as_tensor(c, dtype=torch.float32))


def gaussian_kl(mu, logvar, mu_p, logvar_p) -> torch.Tensor:
    """KL(N(mu, e^logvar) || N(mu_p, e^logvar_p)), summed over dims and averaged over rows."""
    mu, logvar, mu_p, logvar_p = (torch.as_tensor(t) for t in (mu, logvar, mu_p, logvar_p))
    kl = 0.5 * (logvar_p - logvar + (logvar.exp() + (mu - mu_p) ** 2) / logvar_p.exp() - 1)
    if kl.ndim == 1:
        kl = kl.unsqueeze(0)
    return kl.sum(dim=-1).mean()


def gaussian_nll(x, mu, logvar) -> torch.Tensor:
    """Per-element Gaussian negative log-likelihood."""
    return 0.5 * (LOG_2PI + logvar + (x - mu) ** 2 / logvar.exp())


def vae_loss(
    x,
    c,
    params: SemaPopVAE,
    cfg: VaeTrainingConfig,
    spec: MarginalSpec | None = None,
    seed: int | None = None,
    generator: torch.Generator | None = None,
    eps: torch.Tensor | None = None,
):
    """Total objective and its breakdown for one batch of encoded rows.

    ``c`` is the adapted conditioning batch.  The reparameterization noise is
    ``eps`` when given, otherwise drawn from ``generator`` (or a fresh one
    seeded with ``seed``).
    """
    x = torch.as_tensor(x, dtype=params.encoder.out.weight.dtype)
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    dec = params.decoder
    mu_q, logvar_q = params.encoder(x, generator=generator)
    mu_p, logvar_p = params.prior(c)
    if eps is None:
        eps = torch.randn(mu_q.shape, generator=generator, dtype=mu_q.dtype)
    z = mu_q + (0.5 * logvar_q).exp() * eps
    mu_x, logvar_x, logits = dec(z, c, generator=generator)
    x_num, x_cat = dec.split(x)
    zero = x.new_zeros(())
    rec_cont = gaussian_nll(x_num, mu_x, logvar_x).mean(dim=1).mean() if dec.n_num else zero
    rec_cat = zero
    if dec.cat_width:
        j, total = 0, x.new_zeros(x.shape[0])
        for s in params.schema.categorical:
            block = logits[:, j:j + s.width]
            total = total + F.cross_entropy(block, x_cat[:, j:j + s.width].argmax(dim=1), reduction="none")
            j += s.width
        rec_cat = (total / len(params.schema.categorical)).mean()
    kl = gaussian_kl(mu_q, logvar_q, mu_p, logvar_p)
    marg = zero
    if cfg.marg_reg and cfg.lambda_m > 0 and spec is not None:
        cat_m, cont_m = marginal_terms(dec.soft_output(mu_x, logits), spec, params.schema, cfg.marg_eps)
        marg = cat_m + cont_m
    total = rec_cont + rec_cat + cfg.beta * kl + cfg.lambda_m * marg
    return total, {"rec_cont": rec_cont, "rec_cat": rec_cat, "kl": kl, "marg": marg}


@dataclass
class VaeModel:
    net: SemaPopVAE
    schema: AttributeSchema
    spec: MarginalSpec
    cfg: VaeTrainingConfig
    metrics: list[dict] = field(default_factory=list)

    def checkpoint(self) -> ModelCheckpoint:
        return ModelCheckpoint(
            backbone="vae",
            schema=self.schema,
            marginal_spec=self.spec,
            config=self.cfg.to_dict(),
            embed_dim=self.net.adapter.embed_dim,
            tensors=tensors_from_modules(vae=self.net),
            metrics=list(self.metrics),
        )


def build_vae(schema: AttributeSchema, embed_dim: int, cfg: VaeTrainingConfig) -> SemaPopVAE:
    torch.manual_seed(cfg.seed)
    return SemaPopVAE(schema, embed_dim, cfg)


def vae_from_checkpoint(ckpt: ModelCheckpoint) -> VaeModel:
    if ckpt.backbone != "vae":
        raise ValueError(f"checkpoint backbone is {ckpt.backbone!r}, expected 'vae'")
    cfg = VaeTrainingConfig(**ckpt.config)
    net = build_vae(ckpt.schema, ckpt.embed_dim, cfg)
    net.load_state_dict(ckpt.state_dict("vae"))
    net.eval()
    return VaeModel(net, ckpt.schema, ckpt.marginal_spec, cfg, list(ckpt.metrics))


def train_vae(
    train_pop: Population,
    embeddings,
    schema: AttributeSchema | None = None,
    cfg: VaeTrainingConfig | None = None,
    spec: MarginalSpec | None = None,
    out_dir: str | Path | None = None,
) -> VaeModel:
    """Epochs of shuffled mini-batches under Adam; one log row per epoch (batch means)."""
    cfg = cfg or VaeTrainingConfig()
    schema = schema or train_pop.schema
    E = torch.as_tensor(np.asarray(getattr(embeddings, "matrix", embeddings)), dtype=torch.float32)
    if E.shape[0] != train_pop.n:
        raise ValueError(f"{E.shape[0]} embeddings for {train_pop.n} agents")
    spec = spec or build_marginal_spec(train_pop, schema, cfg.marg_bins)
    X = torch.as_tensor(encode(train_pop, schema), dtype=torch.float32)
    net = build_vae(schema, E.shape[1], cfg)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr, foreach=True)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = VaeModel(net, schema, spec, cfg)
    n = X.shape[0]
    net.train()
    started = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        perm = torch.randperm(n, generator=gen)
        sums: dict[str, float] = {}
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            c = net.adapter(E[idx], generator=gen)
            loss, parts = vae_loss(X[idx], c, net, cfg, spec, generator=gen)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"epoch {epoch}: loss became non-finite ({value})")
            for k, v in (("loss", value), *((k, v.item()) for k, v in parts.items())):
                sums[k] = sums.get(k, 0.0) + v
            batches += 1
        model.metrics.append({"epoch": epoch, **{k: v / batches for k, v in sums.items()}})
    net.eval()
    logger.info("trained VAE for %d epochs in %.1fs", cfg.epochs, time.perf_counter() - started)
    if out_dir is not None:
        save_checkpoint(model.checkpoint(), out_dir)
        write_metrics(model.metrics, Path(out_dir) / "metrics.csv")
    return model


def draw_latent_noise(n: int, latent_dim: int, seed: int) -> torch.Tensor:
    return torch.randn((n, latent_dim), generator=torch.Generator().manual_seed(seed))


@torch.no_grad()
def generate_vae_encoded(model: VaeModel, embeddings, eps: torch.Tensor) -> np.ndarray:
    """Hard decoded rows for ``z = mu_p(c) + sigma_p(c) * eps``."""
    net = model.net
    net.eval()
    E = torch.as_tensor(np.asarray(getattr(embeddings, "matrix", embeddings)), dtype=torch.float32)
    if E.shape[1] != net.adapter.embed_dim:
        raise ValueError(f"embedding dim {E.shape[1]} != model {net.adapter.embed_dim}")
    c = net.adapter(E)
    mu_p, logvar_p = net.prior(c)
    z = mu_p + (0.5 * logvar_p).exp() * eps
    mu, _, logits = net.decoder(z, c)
    return net.decoder.hard_output(mu, logits).double().numpy()


def sample_vae(model: VaeModel | ModelCheckpoint, embeddings, seed: int) -> Population:
    """``z`` from the persona prior, decoded to argmax categories and mean numerical values."""
    if isinstance(model, ModelCheckpoint):
        model = vae_from_checkpoint(model)
    n = np.asarray(getattr(embeddings, "matrix", embeddings)).shape[0]
    eps = draw_latent_noise(n, model.cfg.latent_dim, seed)
    return decode(generate_vae_encoded(model, embeddings, eps), model.schema)
