import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nsed import dp
from nsed.encoders import EncoderConfig
from nsed.errors import ConfigError, DataError, VocabularyError
from nsed.losses import LossWeights, bce_from_log_alpha, interpretability_loss
from nsed.matching import classify, log_scores, matching_loss, nonmatch_nll, score_pair, tune_threshold
from nsed.metrics import binary_f1
from nsed.model import EditModel

import gradcheck
import oracles


def uniform_model():
    model = EditModel("match", EncoderConfig(kind="unigram", embed_dim=4, hidden_dim=4, heads=1), 4,
                      dtype=np.float64)
    for name in model.params:
        if name.startswith("head."):
            model.params[name][:] = 0
    return model


def test_uniform_model_matches_enumeration():
    # every cell is uniform over four classes, so each operation has probability 1/4
    model = uniform_model()
    for s, t in (([2], [3]), ([2, 3], [3]), ([], [2, 2]), ([3, 2, 2], [2, 3])):
        table = np.full((len(s) + 1, len(t) + 1), math.log(0.25))
        log_z = oracles.brute_force(table, table, table, len(s), len(t))[0]
        assert math.log(score_pair(model, s, t)) == pytest.approx(log_z, rel=1e-10)


def test_score_range():
    model = gradcheck.small_model("match", "cnn")
    assert score_pair(model, [], []) == 1.0
    for s, t in (([2, 3], [4]), ([4, 4, 4], [2])):
        assert 0 < score_pair(model, s, t) <= 1


def test_unknown_symbol_is_rejected():
    with pytest.raises(VocabularyError):
        score_pair(uniform_model(), [9], [2])


def test_log_scores_are_batch_independent():
    model = gradcheck.small_model("match", "rnn")
    sources = [[2, 3], [4], [2, 2, 3, 4]]
    targets = [[3], [2, 4, 4], []]
    together = log_scores(model, sources, targets)
    apart = np.concatenate([log_scores(model, [s], [t]) for s, t in zip(sources, targets)])
    np.testing.assert_allclose(together, apart, atol=1e-10)
    np.testing.assert_allclose(log_scores(model, sources, targets, batch_size=2), together, atol=1e-10)


def test_bce_values():
    for label in (0, 1):
        loss, _ = bce_from_log_alpha(np.log([0.5]), [label])
        assert loss[0] == pytest.approx(-math.log(0.5))
    loss, grad = bce_from_log_alpha([0.0], [1])
    assert loss[0] == 0 and grad[0] == -1
    loss, _ = bce_from_log_alpha([0.0], [0])
    assert np.isfinite(loss[0])


def test_bce_gradient():
    for log_alpha in (-3.0, -0.7, -0.01):
        for label in (0, 1):
            _, grad = bce_from_log_alpha([log_alpha], [label])
            fn = lambda x: bce_from_log_alpha([x], [label])[0][0]
            numeric = (fn(log_alpha + 1e-6) - fn(log_alpha - 1e-6)) / 2e-6
            assert grad[0] == pytest.approx(numeric, rel=1e-5)


def test_interpretability_examples():
    # diagonal-only mass costs nothing; two off-diagonal cells with mass p cost 2p
    with np.errstate(divide="ignore"):
        diagonal = np.log(np.array([[[1.0, 0.0], [0.0, 0.5]]]))
        p = 0.2
        off = np.log(np.array([[[1.0, p], [p, 0.5]]]))
    assert interpretability_loss(diagonal, [1], [1])[0] == 0
    assert interpretability_loss(off, [1], [1])[0] == pytest.approx(2 * p)


def test_nonmatch_only_counts_negatives():
    model = gradcheck.small_model("match", "unigram")
    batch = gradcheck.small_batch(model, "match")
    grid = model.grid(batch)
    loss, grad = nonmatch_nll(grid, batch.labels)
    assert loss[0] == 0 and loss[2] == 0 and loss[1] > 0
    assert not grad[[0, 2]].any()
    k = grid.offsets["nonmatch"]
    mask = grid.cell_mask()[1].copy()
    mask[0, 0] = False
    assert loss[1] == pytest.approx(-grid.log_probs[1][..., k][mask].mean())


def test_loss_components_and_errors():
    model = gradcheck.small_model("match", "cnn")
    batch = gradcheck.small_batch(model, "match")
    weights = LossWeights(1, 0, 1, 1, 0.1)
    result = matching_loss(model, batch, weights)
    c = result.components
    assert result.total == pytest.approx(c["em"] + c["bce"] + c["nonmatch"] + 0.1 * c["interp"])
    assert min(c.values()) >= 0
    assert set(result.grads) == set(model.params)
    unlabeled = model.make_batch([[2]], [[3]])
    with pytest.raises(DataError):
        matching_loss(model, unlabeled, weights)
    with pytest.raises(ConfigError):
        LossWeights(w_em=-1)


def test_em_term_ignores_negative_pairs():
    model = gradcheck.small_model("match", "unigram")
    batch = gradcheck.small_batch(model, "match")
    only_em = LossWeights(1, 0, 0, 0, 0)
    full = matching_loss(model, batch, only_em).components["em"]
    edges = model.grid(batch).edges()
    per_pair, _ = dp.em_loss(edges, dp.forward(edges), dp.backward(edges))
    assert full == pytest.approx(per_pair[0] + per_pair[2])


def test_tune_threshold_examples():
    assert tune_threshold([0.9, 0.8, 0.1], [1, 1, 0]) == 0.8
    assert tune_threshold([0.4, 0.4, 0.4], [1, 0, 1]) == 0.4
    with pytest.raises(DataError):
        tune_threshold([0.3, 0.2], [1, 1])
    assert classify([-0.1, -2.0], -1.0).tolist() == [True, False]


@settings(max_examples=60)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=2, max_size=15)
       .filter(lambda xs: len({lab for _, lab in xs}) == 2))
def test_threshold_is_as_good_as_every_midpoint(pairs):
    scores = np.array([s for s, _ in pairs])
    labels = np.array([lab for _, lab in pairs])
    best = binary_f1(scores >= tune_threshold(scores, labels), labels)
    values = np.unique(scores)
    candidates = list((values[1:] + values[:-1]) / 2) + [values[0] - 1, values[-1] + 1]
    brute = max(binary_f1(scores >= c, labels) for c in candidates)
    assert best == pytest.approx(brute)


def test_matching_model_separates_identity_pairs():
    from nsed.training import TrainConfig, train

    config = TrainConfig(task="match", encoder="unigram", embed_dim=16, hidden_dim=16, lr=1e-2, batch_size=16,
                         validate_every=20, patience=100, max_decays=100)
    rng = np.random.default_rng(0)
    data = []
    for _ in range(40):
        s = [int(x) for x in rng.integers(2, 7, size=rng.integers(2, 5))]
        data.append((s, list(s), 1))
        other = [int(x) for x in rng.integers(2, 7, size=rng.integers(2, 5))]
        if other != s:
            data.append((s, other, 0))
    model = EditModel("match", config.encoder_config(16), 7, seed=config.seed)
    result = train(model, config, data, data, max_steps=100)
    assert result.best_metric > 0.9
