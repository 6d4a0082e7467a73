import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from corrprior.losses import (PHASE_WEIGHTS, LossWeights, chamfer, embedding_alignment_loss,
                              prediction_refinement_loss, surface_loss, total_loss)

import oracles

T = lambda x: torch.tensor(x, dtype=torch.float64)  # noqa: E731


def test_chamfer_values():
    assert float(chamfer(T([[0, 0, 0]]), T([[1, 0, 0]]))) == 2.0
    assert float(chamfer(T([[0, 0, 0], [1, 0, 0]]), T([[0, 0, 0]]))) == 0.5


def test_chamfer_batched_reduce():
    a = T([[[0, 0, 0]], [[0, 0, 0]]])
    b = T([[[1, 0, 0]], [[2, 0, 0]]])
    assert chamfer(a, b, reduce=False).tolist() == [2.0, 8.0]
    assert float(chamfer(a, b)) == 5.0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8).flatmap(lambda n: arrays(np.float64, (n, 3), elements=st.floats(-5, 5))),
       st.integers(1, 8).flatmap(lambda n: arrays(np.float64, (n, 3), elements=st.floats(-5, 5))))
def test_chamfer_matches_numpy_oracle(a, b):
    assert float(chamfer(T(a), T(b))) == pytest.approx(oracles.chamfer(a, b), rel=1e-9, abs=1e-9)


def test_surface_loss_values():
    v = T([[0, 0, 0]])
    assert float(surface_loss(v, T([[1, 0, 0]]), T([[0, 0, 1]]), alpha=1.0)) == 3.0
    rng = np.random.default_rng(0)
    v = T(rng.normal(size=(5, 3)))
    assert float(surface_loss(v, v, v)) == 0.0


def test_surface_loss_shape_mismatch():
    with pytest.raises(ValueError):
        surface_loss(T(np.zeros((3, 3))), T(np.zeros((2, 3))), T(np.zeros((2, 3))))


def test_alignment_values():
    assert float(embedding_alignment_loss(T([[1.0, 0.0]]), T([[0.0, 0.0]]))) == 1.0
    zs = T([[1.0, 0.0], [1.0, 1.0]])
    zi = T([[0.0, 0.0], [1.0 - np.sqrt(2.0), 0.0]])
    per = ((zs - zi) ** 2).sum(-1)
    assert float(embedding_alignment_loss(zs, zi)) == pytest.approx(float(per.mean()), abs=1e-15)
    assert float(embedding_alignment_loss(zs, zs)) == 0.0


def test_alignment_batch_mean_of_one_and_three():
    zs = T([[1.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
    zi = torch.zeros_like(zs)
    assert float(embedding_alignment_loss(zs, zi)) == 2.0


def test_alignment_does_not_update_teacher():
    zs = T([[1.0, 2.0]]).requires_grad_(True)
    zi = T([[0.0, 0.0]]).requires_grad_(True)
    embedding_alignment_loss(zs, zi).backward()
    assert zs.grad is None
    assert zi.grad is not None


def test_refinement_permutation_invariant():
    rng = np.random.default_rng(3)
    v = T(rng.normal(size=(10, 3)))
    c = T(rng.normal(size=(6, 3)))
    assert float(prediction_refinement_loss(v, c)) == float(prediction_refinement_loss(v, c[torch.randperm(6)]))
    assert float(prediction_refinement_loss(v, v)) == 0.0
    assert float(prediction_refinement_loss(T([[0, 0, 0]]), T([[1, 0, 0]]))) == 2.0


def test_phase_weights():
    w1 = LossWeights.for_phase("surface")
    assert (w1.lambda1, w1.lambda2, w1.lambda3) == (1.0, 0.0, 0.0)
    w2 = LossWeights.for_phase("align")
    assert (w2.lambda1, w2.lambda2, w2.lambda3) == (0.0, 1.0, 0.0)
    w3 = LossWeights.for_phase("refine")
    assert (w3.lambda1, w3.lambda2, w3.lambda3) == (0.0, 1.0, 1.0)
    assert set(PHASE_WEIGHTS) == {"surface", "align", "refine", "baseline"}


def test_total_loss_patterns():
    terms = {"surface": T(0.7), "alignment": T(0.2), "refinement": T(0.3)}
    assert float(total_loss(terms, LossWeights.for_phase("surface"))) == pytest.approx(0.7)
    assert float(total_loss(terms, LossWeights.for_phase("align"))) == pytest.approx(0.2)
    assert float(total_loss(terms, LossWeights.for_phase("refine"))) == pytest.approx(0.5)


def test_total_loss_skips_zero_weight_callables():
    def boom():
        raise AssertionError("evaluated a zero-weight term")

    out = total_loss({"surface": boom, "alignment": T(0.2), "refinement": boom}, LossWeights.for_phase("align"))
    assert float(out) == pytest.approx(0.2)


def test_nonconforming_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(1.0, 1.0, 0.0).check()
    with pytest.raises(ValueError):
        LossWeights.for_phase("warmup")
