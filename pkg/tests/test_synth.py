import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scat.evaluation import aca
from scat.synth import SynthSpec, SynthWorld, generate


def _spec(**kw):
    base = dict(num_classes=5, dim=32, concentration=5.0, n_samples=500, seed=0)
    base.update(kw)
    return SynthSpec(**base)


@settings(max_examples=25, deadline=None)
@given(
    C=st.integers(2, 8),
    D=st.integers(2, 40),
    kappa=st.floats(0, 50),
    sigma=st.floats(0, 2),
    seed=st.integers(0, 2**31),
)
def test_rows_unit_norm(C, D, kappa, sigma, seed):
    pool, clf, mu = generate(_spec(num_classes=C, dim=D, concentration=kappa, prototype_perturbation=sigma,
                                   n_samples=50, seed=seed))
    np.testing.assert_allclose(np.linalg.norm(pool.features, axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(clf.W, axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(mu, axis=1), 1.0, atol=1e-9)


def test_directions_orthonormal_when_dim_allows():
    _, _, mu = generate(_spec(num_classes=6, dim=10))
    np.testing.assert_allclose(mu @ mu.T, np.eye(6), atol=1e-12)


def test_tight_clusters_near_perfect_accuracy():
    pool, clf, _ = generate(_spec(concentration=100.0, n_samples=2000))
    assert aca(clf.predict_proba(pool), pool.labels) >= 99.9


def test_no_signal_gives_chance_accuracy():
    accs = []
    for seed in range(10):
        pool, clf, _ = generate(_spec(concentration=0.0, n_samples=2000, seed=seed))
        accs.append(aca(clf.predict_proba(pool), pool.labels))
    # 10 x 2000 draws: standard error of the mean ACA is well under 1 point
    assert np.mean(accs) == pytest.approx(100 / 5, abs=3.0)


def test_one_hot_marginal():
    pool, _, _ = generate(_spec(class_marginal=(0.0, 0.0, 1.0, 0.0, 0.0)))
    assert set(pool.labels.tolist()) == {2}


def test_label_histogram_chi_square():
    # chi-square with 4 dof at p = 0.001 has critical value 18.47
    m = (0.5, 0.2, 0.15, 0.1, 0.05)
    pool, _, _ = generate(_spec(class_marginal=m, n_samples=10_000, dim=8))
    expected = 10_000 * np.array(m)
    stat = float(((np.bincount(pool.labels, minlength=5) - expected) ** 2 / expected).sum())
    assert stat < 18.47


def test_deterministic_per_seed():
    a = generate(_spec(prototype_perturbation=0.3))
    b = generate(_spec(prototype_perturbation=0.3))
    c = generate(_spec(prototype_perturbation=0.3, seed=1))
    assert np.array_equal(a[0].features, b[0].features) and np.array_equal(a[1].W, b[1].W)
    assert not np.array_equal(a[0].features, c[0].features)


def test_independent_streams_differ():
    world = SynthWorld(_spec())
    assert not np.array_equal(world.sample(20, (0, 1)).features, world.sample(20, (0, 2)).features)


def test_perturbation_degrades_zero_shot():
    clean = SynthWorld(_spec(dim=64))
    noisy = SynthWorld(_spec(dim=64, prototype_perturbation=1.0))
    data = clean.sample(2000, 9)
    assert aca(noisy.zero_shot.predict_proba(data), data.labels) < aca(clean.zero_shot.predict_proba(data), data.labels)


@pytest.mark.parametrize(
    "kw",
    [
        dict(dim=1),
        dict(num_classes=1),
        dict(n_samples=0),
        dict(concentration=-1.0),
        dict(concentration=math.inf),
        dict(prototype_perturbation=math.nan),
        dict(class_marginal=(0.5, 0.5)),
    ],
)
def test_invalid_specs(kw):
    with pytest.raises(ValueError):
        _spec(**kw)


def test_json_round_trip(tmp_path):
    spec = _spec(class_marginal=(0.5, 0.2, 0.15, 0.1, 0.05), prototype_perturbation=0.6)
    path = tmp_path / "s.json"
    path.write_text(json.dumps(spec.to_dict()))
    assert SynthSpec.from_json(path) == spec


def test_from_dict_names_missing_field():
    d = _spec().to_dict()
    del d["seed"]
    with pytest.raises(ValueError, match="seed"):
        SynthSpec.from_dict(d)


def test_from_dict_rejects_unknown_field():
    with pytest.raises(ValueError, match="colour"):
        SynthSpec.from_dict({**_spec().to_dict(), "colour": 1})
