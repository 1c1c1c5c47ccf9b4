import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latent_router.analysis import (
    DegenerateVariance,
    LatentMatrix,
    centroid_separation,
    collect_latents,
    linear_probe,
    pca_cumvar,
    project_2d,
    write_latents_csv,
    write_projection_csv,
)
from latent_router.corpus import gen_random
from latent_router.model import ExpertModel, ModelConfig

from oracles import cumvar_oracle, jacobi_eigenvalues


def test_jacobi_oracle_on_known_matrix():
    np.testing.assert_allclose(jacobi_eigenvalues([[2, 1], [1, 2]]), [3, 1], atol=1e-12)


def test_points_on_a_line():
    t = np.linspace(-1, 1, 50)
    X = np.stack([t, 2 * t, -t], axis=1)
    rep = pca_cumvar(LatentMatrix(X))
    assert rep.cumvar[0] == pytest.approx(1.0, abs=1e-12)
    assert rep.intrinsic_dim_95 == 1


def test_isotropic_cloud_is_linear():
    X = np.random.default_rng(0).normal(size=(20000, 4))
    rep = pca_cumvar(LatentMatrix(X))
    np.testing.assert_allclose(rep.cumvar, [0.25, 0.5, 0.75, 1.0], atol=0.02)
    assert rep.intrinsic_dim_95 == 4


def test_matches_jacobi_oracle():
    X = np.random.default_rng(42).normal(size=(100, 16)) @ np.diag(np.linspace(0.2, 3, 16))
    rep = pca_cumvar(LatentMatrix(X))
    np.testing.assert_allclose(rep.cumvar, cumvar_oracle(X), atol=1e-8, rtol=0)


def test_wide_matrix_uses_row_space():
    X = np.random.default_rng(1).normal(size=(6, 30))
    rep = pca_cumvar(LatentMatrix(X))
    assert len(rep.cumvar) == 6
    assert rep.cumvar[-1] == pytest.approx(1.0)
    Xc = X - X.mean(0)
    full = np.sort(np.linalg.eigvalsh(Xc.T @ Xc / 5))[::-1][:6]
    np.testing.assert_allclose(rep.eigenvalues, np.clip(full, 0, None), atol=1e-10)


def test_degenerate_inputs():
    with pytest.raises(DegenerateVariance):
        pca_cumvar(LatentMatrix(np.ones((5, 3))))
    with pytest.raises(DegenerateVariance):
        project_2d(LatentMatrix(np.ones((5, 3))))
    with pytest.raises(ValueError):
        LatentMatrix(np.array([[np.nan, 1.0]]))
    with pytest.raises(ValueError):
        pca_cumvar(LatentMatrix(np.ones((1, 3))))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_cumvar_invariances(seed, shift):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(30, 5)) * rng.uniform(0.5, 3, size=5)
    base = pca_cumvar(LatentMatrix(X)).cumvar
    assert np.all(np.diff(base) >= -1e-12) and base[-1] == pytest.approx(1.0)
    np.testing.assert_allclose(pca_cumvar(LatentMatrix(X[rng.permutation(30)])).cumvar, base, atol=1e-10)
    np.testing.assert_allclose(pca_cumvar(LatentMatrix(X + shift)).cumvar, base, atol=1e-9)


def test_projection_sign_rule_and_centering():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(200, 3)) * [5.0, 2.0, 0.1]
    coords, _ = project_2d(LatentMatrix(X))
    assert coords.shape == (200, 2)
    np.testing.assert_allclose(coords.mean(0), 0.0, atol=1e-10)
    flipped, _ = project_2d(LatentMatrix(-X))
    np.testing.assert_allclose(flipped, -coords, atol=1e-10)
    # dominant axis is (close to) e1 with a positive loading
    assert np.corrcoef(coords[:, 0], X[:, 0])[0, 1] > 0.99


def test_projection_of_one_dimensional_data():
    X = np.arange(10.0)[:, None]
    coords, _ = project_2d(LatentMatrix(X))
    assert np.all(coords[:, 1] == 0.0)


def test_probe_on_separated_clusters():
    rng = np.random.default_rng(0)
    a = LatentMatrix(rng.normal(size=(100, 8)))
    b = LatentMatrix(rng.normal(size=(100, 8)) + 3.0)
    assert linear_probe(a, b) == 1.0
    coords, _ = project_2d(LatentMatrix(np.concatenate([a.data, b.data])))
    between, within = centroid_separation(coords, ["a"] * 100 + ["b"] * 100)
    assert between > 2 * within


def test_probe_on_identical_distributions_is_chance():
    rng = np.random.default_rng(1)
    accs = [linear_probe(LatentMatrix(rng.normal(size=(100, 8))), LatentMatrix(rng.normal(size=(100, 8))),
                        seed=s) for s in range(5)]
    assert abs(np.mean(accs) - 0.5) < 0.1


def test_probe_is_seed_deterministic_and_validates():
    rng = np.random.default_rng(2)
    a, b = LatentMatrix(rng.normal(size=(20, 4))), LatentMatrix(rng.normal(size=(20, 4)) + 1)
    assert linear_probe(a, b, seed=3) == linear_probe(a, b, seed=3)
    with pytest.raises(ValueError, match="width"):
        linear_probe(a, LatentMatrix(np.zeros((3, 5))))
    with pytest.raises(ValueError):
        linear_probe(a, LatentMatrix(np.zeros((0, 4))))


def test_collect_latents_flattens_queries(tmp_path):
    cfg = ModelConfig()
    m = ExpertModel.init(cfg, seed=0)
    lat = collect_latents(m, gen_random(0, 70, cfg))
    assert lat.shape == (70, cfg.M * cfg.d_model)
    assert lat.labels == ["full_ood"] * 70
    write_latents_csv(lat, tmp_path / "l.csv")
    head = (tmp_path / "l.csv").read_text().splitlines()[0].split(",")
    assert head[0] == "label" and len(head) == 1 + 256
    coords, labels = project_2d(lat)
    write_projection_csv(coords, labels, tmp_path / "p.csv")
    rep = pca_cumvar(lat)
    rep.write_csv(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "component_index,eigenvalue,cumvar"
