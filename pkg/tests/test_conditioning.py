import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from semapop.conditioning import (
    CONDITION_DIM,
    Adapter,
    FiLM,
    adapt,
    build_initial_hidden,
    film,
    seeded_dropout,
)
from semapop.embeddings import zero_embeddings
from semapop.gan import GanTrainingConfig, Generator
from semapop.toy import default_toy_spec


def test_adapter_output_dim_and_determinism():
    torch.manual_seed(0)
    a = Adapter(16)
    e = torch.randn(5, 16)
    assert adapt(e, a).shape == (5, CONDITION_DIM) and CONDITION_DIM == 128
    assert torch.equal(adapt(e, a), adapt(e, a))


def test_adapter_dropout_only_in_training():
    torch.manual_seed(0)
    a = Adapter(8, hidden_dim=64, cond_dim=4, dropout=0.5)
    e = torch.randn(3, 8)
    train1 = adapt(e, a, training=True, seed=1)
    assert torch.equal(train1, adapt(e, a, training=True, seed=1))
    assert not torch.equal(train1, adapt(e, a, training=True, seed=2))
    assert not torch.equal(train1, adapt(e, a, training=False))


def test_zero_adapter_gives_zero():
    a = Adapter(6, hidden_dim=10, cond_dim=3)
    for p in a.parameters():
        torch.nn.init.zeros_(p)
    out = adapt(torch.randn(4, 6), a)
    assert torch.equal(out, torch.zeros(4, 3))


def test_adapter_rejects_wrong_dim():
    with pytest.raises(ValueError):
        Adapter(6, hidden_dim=4, cond_dim=2)(torch.zeros(1, 5))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_film_identity_at_init(seed):
    g = torch.Generator().manual_seed(seed)
    layer = FiLM(5, 7)
    h = torch.randn(4, 7, generator=g)
    c = torch.randn(4, 5, generator=g) * 100
    assert torch.equal(film(h, c, layer), h)


def _film_with(gamma, beta):
    layer = FiLM(1, len(gamma))
    with torch.no_grad():
        layer.gamma.bias.copy_(torch.tensor(gamma))
        layer.beta.bias.copy_(torch.tensor(beta))
    return layer


def test_film_doubling():
    out = film(torch.tensor([[2.0, 3.0]]), torch.zeros(1, 1), _film_with([1.0, 1.0], [0.0, 0.0]))
    assert out.tolist() == [[4.0, 6.0]]


def test_film_jacobian_matches_finite_differences():
    torch.manual_seed(3)
    layer = FiLM(3, 4).double()
    for p in layer.parameters():
        torch.nn.init.normal_(p)
    c = torch.randn(1, 3, dtype=torch.float64)
    h = torch.randn(1, 4, dtype=torch.float64)
    analytic = torch.diag(1 + layer.gamma(c)[0]).detach()
    step = 1e-6
    fd = torch.zeros(4, 4, dtype=torch.float64)
    for j in range(4):
        dh = torch.zeros_like(h)
        dh[0, j] = step
        fd[:, j] = ((layer(h + dh, c) - layer(h - dh, c)) / (2 * step))[0]
    np.testing.assert_allclose(fd.detach().numpy(), analytic.numpy(), atol=1e-5)


def test_initial_hidden_concat():
    assert build_initial_hidden(torch.tensor([1.0]), torch.tensor([2.0, 3.0])).tolist() == [1.0, 2.0, 3.0]
    z, c = torch.randn(2, 128), torch.randn(2, 128)
    x = build_initial_hidden(z, c)
    assert x.shape == (2, 256)
    assert torch.equal(x[:, :128], z)
    with pytest.raises(ValueError):
        build_initial_hidden(torch.tensor([float("nan")]), torch.tensor([0.0]))


def test_seeded_dropout_scale():
    x = torch.ones(10_000, dtype=torch.float64)
    out = seeded_dropout(x, 0.25, True, torch.Generator().manual_seed(0))
    assert set(out.unique().tolist()) <= {0.0, 1 / 0.75}
    assert seeded_dropout(x, 0.25, False) is x


def test_zero_embeddings_leave_generator_unmodulated():
    schema = default_toy_spec().schema()
    cfg = GanTrainingConfig(g_hidden=(16, 16), d_hidden=(16, 16), adapter_hidden=8, cond_dim=4, noise_dim=4)
    torch.manual_seed(0)
    gen = Generator(schema, 6, cfg)
    # move FiLM weights away from zero: only a nonzero c could now modulate
    for m in gen.films:
        torch.nn.init.normal_(m.gamma.weight)
        torch.nn.init.normal_(m.beta.weight)
    for p in gen.adapter.parameters():
        torch.nn.init.zeros_(p)
    gen.eval()
    e = torch.as_tensor(zero_embeddings(3, 6).matrix, dtype=torch.float32)
    z = torch.randn(3, 4)
    with torch.no_grad():
        c = gen.adapter(e)
        assert torch.equal(c, torch.zeros(3, 4))
        assert torch.equal(gen.hidden(z, c), gen.hidden(z, c, use_film=False))
