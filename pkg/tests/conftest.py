import warnings

import numpy as np
import pandas as pd
import pytest
import torch

from semapop.embeddings import mock_embed
from semapop.persona import mock_persona
from semapop.population import Population
from semapop.schema import AttributeSchema, AttributeSpec, fit_schema_stats
from semapop.toy import default_toy_spec, make_toy_population

torch.set_num_threads(1)


def fitted(pop: Population) -> Population:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        schema = fit_schema_stats(pop.schema, pop)
    return Population(pop.frame, schema)


@pytest.fixture(scope="session")
def toy_pop() -> Population:
    return fitted(make_toy_population(default_toy_spec(), 2000, 0))


@pytest.fixture(scope="session")
def toy_embeddings(toy_pop):
    texts = [mock_persona(r, toy_pop.schema, "implicit") for r in toy_pop.frame.to_dict("records")]
    return mock_embed(texts, 32, 0)


def mixed_schema() -> AttributeSchema:
    return AttributeSchema([
        AttributeSpec("Color", "categorical", "demographic", ("red", "green", "blue")),
        AttributeSpec("Owner", "categorical", "household", ("yes", "no")),
        AttributeSpec("Trips", "numerical", "behavioral", integer_valued=True),
        AttributeSpec("Score", "numerical", "behavioral", integer_valued=False),
    ])


def random_mixed_population(n: int, seed: int) -> Population:
    rng = np.random.default_rng(seed)
    frame = pd.DataFrame({
        "Color": rng.choice(["red", "green", "blue"], size=n, p=[0.5, 0.3, 0.2]),
        "Owner": rng.choice(["yes", "no"], size=n),
        "Trips": rng.poisson(1.5, size=n),
        "Score": np.round(rng.normal(10, 3, size=n), 3),
    })
    return fitted(Population(frame, mixed_schema()))


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
