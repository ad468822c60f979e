import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcbfl.fedsim import (COORDINATOR, AggregationError, AggregationWeights, Bus, MessageKind, ProtocolError,
                          RoundPlan, SiteNode, aggregate, centralized_train, round_mean_loss, run_federated)
from pcbfl.nn import NetLayout, Sequential
from pcbfl.seeding import derive_seed, rng_for


def toy(n_sites=3, seed=0):
    rng = np.random.default_rng(seed)
    model = Sequential(NetLayout.chain([3, 4, 1], ["relu", "sigmoid"]), "bce")
    data = {}
    for s in range(n_sites):
        x = rng.normal(size=(20 + 5 * s, 3))
        data[s] = (x, (x[:, :1] > 0).astype(float))
    return model, data


def nodes(model, data, order=None):
    ids = order or sorted(data)
    return [SiteNode(s, model, (data[s][0],), data[s][1], derive_seed(7, "site", s), batch_size=8) for s in ids]


def test_derive_seed_is_stable_and_label_sensitive():
    assert derive_seed(0, "a", 1) == derive_seed(0, "a", 1)
    assert derive_seed(0, "a", 1) != derive_seed(0, "a", 2) != derive_seed(1, "a", 1)
    assert rng_for(3, "x").random() == rng_for(3, "x").random()


def test_aggregate_is_weighted_mean():
    vecs = {0: np.array([1.0, 0.0]), 1: np.array([0.0, 1.0]), 2: np.array([2.0, 2.0])}
    out = aggregate(vecs, AggregationWeights({0: 1, 1: 3, 2: 0}))
    np.testing.assert_allclose(out, [0.25, 0.75], rtol=0, atol=1e-15)


def test_zero_weights_rejected():
    with pytest.raises(AggregationError):
        aggregate({0: np.zeros(2)}, AggregationWeights({0: 0}))
    with pytest.raises(AggregationError):
        AggregationWeights({0: -1})


def test_layout_change_rejected():
    with pytest.raises(ProtocolError):
        aggregate({0: np.zeros(2), 1: np.zeros(3)}, AggregationWeights({0: 1, 1: 1}))


@settings(max_examples=25, deadline=None)
@given(st.dictionaries(st.integers(0, 20), st.integers(1, 500), min_size=1, max_size=8))
def test_weights_sum_to_one(counts):
    assert sum(AggregationWeights(counts).fractions().values()) == pytest.approx(1.0, abs=1e-12)


def test_federation_of_one_equals_local_training():
    model, data = toy(1)
    init = model.init(np.random.default_rng(1))
    fed, _ = run_federated(nodes(model, data), init, RoundPlan(4, 3, 8), AggregationWeights({0: 20}))
    local, _ = centralized_train(model, (data[0][0],), data[0][1], init, epochs=12, batch_size=8,
                                 seed=derive_seed(7, "site", 0))
    assert np.array_equal(fed, local)


def test_site_order_does_not_change_aggregate():
    model, data = toy(4)
    init = model.init(np.random.default_rng(1))
    weights = AggregationWeights({s: len(data[s][1]) for s in data})
    a, _ = run_federated(nodes(model, data), init, RoundPlan(3, 2, 8), weights)
    b, _ = run_federated(nodes(model, data, [2, 0, 3, 1]), init, RoundPlan(3, 2, 8), weights)
    c, _ = run_federated(nodes(model, data), init, RoundPlan(3, 2, 8), weights, workers=3)
    assert np.array_equal(a, b) and np.array_equal(a, c)


def test_training_reduces_loss_and_trace_shape():
    model, data = toy(3)
    init = model.init(np.random.default_rng(1))
    weights = AggregationWeights({s: len(data[s][1]) for s in data})
    _, trace = run_federated(nodes(model, data), init, RoundPlan(6, 3, 8), weights)
    assert len(trace) == 18
    losses = round_mean_loss(trace)
    assert losses[-1] < losses[0]


def test_zero_rounds_returns_init():
    model, data = toy(2)
    init = model.init(np.random.default_rng(1))
    out, trace = run_federated(nodes(model, data), init, RoundPlan(0, 1), AggregationWeights({0: 1, 1: 1}))
    assert np.array_equal(out, init) and trace == []


def test_bus_logs_metadata_and_copies_payloads():
    bus = Bus()
    payload = np.ones(3)
    got = bus.send("site1", COORDINATOR, MessageKind.PARAMETERS, payload, "local")
    got[0] = 5.0
    assert payload[0] == 1.0
    assert bus.log[0].shape == (3,) and bus.tags()["local"] == 1
    with pytest.raises(ProtocolError):
        bus.send("site1", COORDINATOR, MessageKind.CENTROIDS, payload)


def test_bus_records_parameter_traffic():
    model, data = toy(2)
    bus = Bus()
    run_federated(nodes(model, data), model.init(np.random.default_rng(0)), RoundPlan(2, 1, 8),
                  AggregationWeights({0: 1, 1: 1}), bus=bus)
    assert bus.tags() == {"global": 4, "local": 4, "train_loss": 4}
    assert bus.kinds_from_sites() == {MessageKind.PARAMETERS, MessageKind.METRICS}
