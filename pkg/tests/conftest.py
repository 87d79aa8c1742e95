"""Shared fixtures: small hand-built models and point sets."""

import numpy as np
import pytest
from scipy.stats import gennorm

from facade_em.model import (
    LabelSet,
    LpComponent,
    LpMixtureModel,
    PointSet,
    Responsibilities,
    apply_transform,
)

LABELS = LabelSet.from_names(["window", "door"])


def make_model(centers, spreads, labels_idx=None, p=2, ref_dims=(60, 50), weights=None):
    """Mixture from parallel lists; equal weights unless given."""
    m = len(centers)
    labels_idx = labels_idx if labels_idx is not None else [0] * m
    weights = np.full(m, 1.0 / m) if weights is None else np.asarray(weights, float)
    weights = weights / weights.sum()
    components = tuple(
        LpComponent(j, tuple(c), tuple(sp), float(w))
        for j, c, sp, w in zip(labels_idx, centers, spreads, weights)
    )
    return LpMixtureModel(LABELS, components, p=p, ref_dims=ref_dims)


def make_points(xy, dims=(200, 160), priors=None):
    xy = np.asarray(xy, dtype=np.float64)
    if priors is None:
        priors = np.tile([0.8, 0.1], (len(xy), 1))
    return PointSet(xy, priors, dims, LABELS)


def random_instance(rng, n_points=200, n_components=4, p=2, dims=(200, 160)):
    """Random points, a model centred near the origin and normalized responsibilities."""
    centers = rng.uniform(-15.0, 15.0, size=(n_components, 2))
    if p == 2:
        spreads = rng.uniform(10.0, 60.0, size=(n_components, 2))
    else:
        spreads = rng.uniform(200.0, 2000.0, size=(n_components, 2))
    labels_idx = rng.integers(0, 2, size=n_components)
    model = make_model(centers, spreads, labels_idx, p=p)
    xy = rng.uniform([60.0, 50.0], [140.0, 110.0], size=(n_points, 2))
    points = make_points(xy, dims)
    raw = rng.uniform(0.0, 1.0, size=(n_points, n_components + 1))
    raw /= raw.sum(axis=1, keepdims=True)
    resp = Responsibilities(raw[:, :-1], raw[:, -1])
    return points, model, resp


def facade_model(p):
    """Three windows over one door on a 60x50 reference."""
    if p == 2:
        spreads = [(8.0, 10.0)] * 3 + [(12.0, 30.0)]
    else:
        spreads = [(256.0, 625.0)] * 3 + [(625.0, 6561.0)]
    return make_model(
        centers=[(10.0, 10.0), (30.0, 10.0), (50.0, 10.0), (30.0, 35.0)],
        spreads=spreads,
        labels_idx=[0, 0, 0, 1],
        p=p,
    )


def sample_points(model, truth, rng, per_component=60, outliers=30, dims=(200, 160)):
    """Draws from each transformed component plus uniform clutter."""
    xy, priors = [], []
    for comp in model.components:
        center = apply_transform(np.array(comp.center), truth)
        scale = truth.s * np.array(comp.spread) ** (1.0 / model.p)
        draws = gennorm.rvs(model.p, size=(per_component, 2), random_state=rng)
        xy.append(draws * scale + center)
        prior = np.full(2, 0.1)
        prior[comp.label_index] = 0.8
        priors.append(np.tile(prior, (per_component, 1)))
    xy.append(rng.uniform([0.0, 0.0], dims, size=(outliers, 2)))
    priors.append(np.tile([0.45, 0.45], (outliers, 1)))
    xy = np.clip(np.vstack(xy), 0.0, np.array(dims, dtype=float) - 1.0)
    return make_points(xy, dims, np.vstack(priors))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def two_label_model():
    """Three windows and one door, p = 2."""
    return make_model(
        centers=[(10.0, 10.0), (30.0, 10.0), (50.0, 10.0), (30.0, 35.0)],
        spreads=[(8.0, 10.0), (8.0, 10.0), (8.0, 10.0), (12.0, 30.0)],
        labels_idx=[0, 0, 0, 1],
        p=2,
    )
