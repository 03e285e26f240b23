import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from genrobust.attacks import AttackBudget
from genrobust.classifier import GenerativeClassifier
from genrobust.errors import NumericError
from genrobust.interpret import (FeatureExtractor, GaussianStats, PenultimateFeatures, counterfactual, fid,
                                 fit_class_gaussian, fit_gaussian, frechet_distance, generate_class_samples,
                                 generation_budget, sample_seeds)
from genrobust.models import build_head, build_softmax

from oracles import scalar_frechet


def test_two_point_gaussian():
    s = fit_gaussian([[0.0, 0.0], [2.0, 2.0]], shrinkage=1e-4)
    assert np.allclose(s.mean, [1.0, 1.0])
    assert np.allclose(s.covariance, [[2 + 1e-4, 2], [2, 2 + 1e-4]])
    same = fit_gaussian(np.ones((5, 3)))
    assert np.allclose(same.covariance, 1e-4 * np.eye(3))
    with pytest.raises(ValueError):
        fit_gaussian([[1.0, 2.0]])


def test_class_gaussian_matches_two_pass():
    x = torch.rand(40, 1, 3, 3, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    s = fit_class_gaussian(x)
    flat = x.view(40, -1).numpy()
    mean = flat.sum(0) / 40
    centered = flat - mean
    cov = centered.T @ centered / 39 + 1e-4 * np.eye(9)
    assert np.abs(s.mean - mean).max() < 1e-10
    assert np.abs(s.covariance - cov).max() < 1e-10
    assert s.shape == (1, 3, 3)


def test_stats_round_trip(tmp_path):
    s = fit_class_gaussian(torch.rand(10, 1, 2, 2))
    s.save(tmp_path / "s.npz")
    t = GaussianStats.load(tmp_path / "s.npz")
    assert t.shape == (1, 2, 2) and t.count == 10 and t.extractor_id == "flatten-pixels"
    assert np.array_equal(t.covariance, s.covariance)


def test_seed_sampling():
    s = fit_class_gaussian(torch.full((4, 1, 2, 2), 0.25))
    seeds = sample_seeds(s, 50, np.random.default_rng(0))
    assert seeds.shape == (50, 1, 2, 2)
    assert torch.allclose(seeds, torch.full_like(seeds, 0.25), atol=0.05)
    assert sample_seeds(s, 0, np.random.default_rng(0)).shape == (0, 1, 2, 2)
    a = sample_seeds(s, 5, np.random.default_rng(3))
    assert torch.equal(a, sample_seeds(s, 5, np.random.default_rng(3)))
    bad = GaussianStats(np.zeros(2), -np.eye(2), 2)
    with pytest.raises(NumericError):
        sample_seeds(bad, 3, np.random.default_rng(0))


def test_frechet_examples():
    a = GaussianStats(np.zeros(1), np.eye(1), 2)
    b = GaussianStats(np.ones(1), 4 * np.eye(1), 2)
    assert frechet_distance(a, b) == pytest.approx(2.0, abs=1e-12)
    assert frechet_distance(a, a) < 1e-8
    with pytest.raises(ValueError):
        frechet_distance(a, GaussianStats(np.zeros(2), np.eye(2), 2))
    with pytest.raises(NumericError):
        frechet_distance(GaussianStats(np.zeros(2), np.diag([1.0, -1.0]), 2), GaussianStats(np.zeros(2), np.eye(2), 2))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.integers(1, 64))
def test_frechet_diagonal_matches_coordinate_formula(seed, d):
    rng = np.random.default_rng(seed)
    m1, m2 = rng.standard_normal(d), rng.standard_normal(d)
    v1, v2 = rng.uniform(0.01, 3, d), rng.uniform(0.01, 3, d)
    got = frechet_distance(GaussianStats(m1, np.diag(v1), 2), GaussianStats(m2, np.diag(v2), 2))
    expect = sum(scalar_frechet(m1[i], np.sqrt(v1[i]), m2[i], np.sqrt(v2[i])) for i in range(d))
    assert got == pytest.approx(expect, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.integers(1, 20))
def test_frechet_symmetric_and_non_negative(seed, d):
    rng = np.random.default_rng(seed)
    a = fit_gaussian(rng.standard_normal((30, d)))
    b = fit_gaussian(rng.standard_normal((25, d)) * 2 + 1)
    assert abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-8
    assert frechet_distance(a, b) >= 0
    assert frechet_distance(a, a) < 1e-8


def test_fid_properties():
    x = torch.rand(30, 1, 4, 4, generator=torch.Generator().manual_seed(0))
    y = torch.rand(30, 1, 4, 4, generator=torch.Generator().manual_seed(1)) * 0.5
    ext = FeatureExtractor()
    assert float(fid(ext, x, x)) < 1e-6
    assert abs(float(fid(ext, x, y)) - float(fid(ext, y, x))) < 1e-8
    assert fid(ext, x, y).extractor_id == "flatten-pixels"
    net = build_softmax("smallcnn", (1, 4, 4), 3)
    score = fid(PenultimateFeatures(net), x, y)
    assert score.extractor_id == "trained-classifier-penultimate" and float(score) > 0
    with pytest.raises(ValueError):
        fid(ext, x[:1], y)


def _gc(shape=(1, 4, 4), K=3):
    torch.manual_seed(0)
    return GenerativeClassifier([build_head("mlp-toy", shape, k) for k in range(K)]).double()


def test_generation_contracts():
    gc = _gc()
    seeds = torch.rand(6, 1, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    assert torch.equal(generate_class_samples(gc, 1, 6, generation_budget(10, 1.0, 0.0), seeds=seeds), seeds)
    b = generation_budget(10, 0.1)
    assert b.epsilon == pytest.approx(1.0) and not b.random_start
    out = generate_class_samples(gc, 1, 6, b, seeds=seeds)
    assert (gc.heads[1](out) >= gc.heads[1](seeds) - 1e-12).all()
    assert out.min() >= 0 and out.max() <= 1
    assert ((out - seeds).flatten(1).norm(dim=1) <= 1.0 + 1e-6).all()
    stats = fit_class_gaussian(seeds)
    fresh = generate_class_samples(gc.float(), 0, 4, b, stats=stats, rng=np.random.default_rng(0))
    assert fresh.shape == (4, 1, 4, 4)


class Linear2(torch.nn.Module):
    """Two-class linear classifier on the plane with boundary x0 = 0.5."""

    def forward(self, x):
        z = x.flatten(1)[:, 0] - 0.5
        return torch.stack([z, -z], dim=1)


def test_counterfactual_flips_exactly_past_the_margin():
    x = torch.tensor([[0.8, 0.5], [0.6, 0.2], [0.55, 0.9]], dtype=torch.float64).view(3, 1, 1, 2)
    dist = (x.flatten(1)[:, 0] - 0.5).numpy()  # L2 distance to the boundary
    for eps in (0.04, 0.07, 0.12, 0.35):
        res = counterfactual(Linear2(), x, 1, AttackBudget("L2", eps, 5, step_size=eps))
        assert res.flipped.tolist() == list(eps > dist)
        assert (res.norms <= eps + 1e-9).all()


def test_counterfactual_trivial_cases():
    x = torch.tensor([[0.8, 0.5], [0.2, 0.5]], dtype=torch.float64).view(2, 1, 1, 2)
    res = counterfactual(Linear2(), x, 1, AttackBudget("L2", 0.0, 5))
    assert torch.equal(res.images, x)
    assert res.flipped.tolist() == [False, True]
    already = counterfactual(Linear2(), x[1:], 1, AttackBudget("L2", 0.3, 5))
    assert bool(already.flipped.all())
