import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import invwishart

from conftest import toy_dataset
from vbglmm import ClusterData, Dataset, Family, Parametrization, PriorSpec, VariationalState
from vbglmm.errors import ShapeError, SPDError, ValidationError
from vbglmm.model import (
    _iw_moments,
    build_cluster_design,
    build_designs,
    cluster_c_matrix,
    constant_within_clusters,
    posterior_summaries,
    validate_dataset,
)


def test_family_and_parametrization_parsing():
    assert Family.parse("Poisson") is Family.POISSON
    assert Family.parse("logistic") is Family.BERNOULLI
    assert Family.parse(Family.BERNOULLI) is Family.BERNOULLI
    assert Parametrization.parse("partial-adaptive").adaptive
    assert Parametrization.parse("partial-fixed").partial
    assert not Parametrization.parse("centered").partial
    with pytest.raises(ValueError):
        Family.parse("gamma")
    with pytest.raises(ValueError):
        Parametrization.parse("half")


def test_cluster_data_shapes():
    c = ClusterData([1, 0, 2], np.ones((3, 1)), xg1=[0.5], XG2=np.arange(6.0).reshape(3, 2))
    assert (c.n_i, c.r, c.g1, c.g2, c.p) == (3, 1, 1, 2, 4)
    assert c.offset.tolist() == [1.0, 1.0, 1.0]
    with pytest.raises(ValueError):
        c.y[0] = 5
    with pytest.raises(ShapeError) as info:
        ClusterData([1, 2], np.ones((3, 1)))
    assert info.value.block == "XR"
    with pytest.raises(ShapeError):
        ClusterData([1, 2], np.ones((2, 1)), offset=[1.0])


def test_pooled_design_column_order():
    c = ClusterData([1, 0], np.array([[1, 0.3], [1, -0.2]]), xg1=[2.0], XG2=[[5.0], [6.0]])
    np.testing.assert_allclose(c.pooled_design(), [[1, 0.3, 2, 5], [1, -0.2, 2, 6]])


def test_dataset_mismatched_clusters():
    a = ClusterData([1], np.ones((1, 1)))
    b = ClusterData([1], np.ones((1, 2)))
    with pytest.raises(ShapeError):
        Dataset([a, b], "poisson")
    with pytest.raises(ValidationError):
        Dataset([], "poisson")


def test_validate_valid_poisson(poisson_toy):
    validate_dataset(poisson_toy)


def test_validate_bernoulli_out_of_support():
    ok = ClusterData([0, 1], np.ones((2, 1)))
    bad = ClusterData([1, 2], np.ones((2, 1)))
    with pytest.raises(ValidationError) as info:
        validate_dataset(Dataset([ok, bad], "bernoulli"))
    assert info.value.diagnostics[0][:2] == (1, [1])
    assert "cluster 1" in str(info.value) and "rows [1]" in str(info.value)


def test_validate_intercept_column():
    c = ClusterData([1, 2], np.array([[1.0, 0.2], [2.0, 0.1]]))
    with pytest.raises(ValidationError, match="first column of XR"):
        validate_dataset(Dataset([c], "poisson"))


def test_validate_poisson_support_and_offsets():
    with pytest.raises(ValidationError, match="nonnegative integer"):
        validate_dataset(Dataset([ClusterData([1.5], np.ones((1, 1)))], "poisson"))
    with pytest.raises(ValidationError, match="offsets must be positive"):
        validate_dataset(Dataset([ClusterData([1], np.ones((1, 1)), offset=[0.0])], "poisson"))
    with pytest.raises(ValidationError, match="unit offsets"):
        validate_dataset(Dataset([ClusterData([1], np.ones((1, 1)), offset=[2.0])], "bernoulli"))
    with pytest.raises(ValidationError, match="non-finite"):
        validate_dataset(Dataset([ClusterData([1], np.ones((1, 1)), XG2=[[np.nan]])], "poisson"))


def test_validate_collects_all_problems():
    a = ClusterData([3, 0], np.ones((2, 1)))
    b = ClusterData([0, -1], np.ones((2, 1)))
    with pytest.raises(ValidationError) as info:
        validate_dataset(Dataset([a, b], "bernoulli"))
    assert [d[0] for d in info.value.diagnostics] == [0, 1]


def test_constant_within_clusters():
    blocks = [np.array([[1, 2.0], [1, 3.0]]), np.array([[4, 5.0], [4, 5.0]])]
    assert constant_within_clusters(blocks).tolist() == [True, False]


def test_prior_validation():
    PriorSpec(np.eye(2), 1.0, np.eye(1))
    with pytest.raises(SPDError):
        PriorSpec(np.array([[1.0, 2.0], [2.0, 1.0]]), 1.0, np.eye(1))
    with pytest.raises(SPDError):
        PriorSpec(np.eye(2), 1.0, np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        PriorSpec(np.eye(2), 1.0, np.eye(2))
    prior = PriorSpec(4 * np.eye(2), 2.0, np.eye(2))
    np.testing.assert_allclose(prior.precision_beta, 0.25 * np.eye(2))


def test_prior_check_dimensions(poisson_toy):
    with pytest.raises(ShapeError):
        PriorSpec(np.eye(3), 2.0, np.eye(2)).check(poisson_toy)
    PriorSpec(np.eye(poisson_toy.p), 2.0, np.eye(2)).check(poisson_toy)


# designs -------------------------------------------------------------------


def test_design_noncentered():
    rng = np.random.default_rng(0)
    XR = np.column_stack([np.ones(4), rng.normal(size=4)])
    XG2 = rng.normal(size=(4, 1))
    V, Wt, C = build_cluster_design(ClusterData(np.ones(4), XR, XG2=XG2), np.eye(2))
    np.testing.assert_allclose(V, np.hstack([XR, XG2]))
    np.testing.assert_allclose(Wt, 0.0)
    np.testing.assert_allclose(C, np.eye(2))


def test_design_centered():
    rng = np.random.default_rng(1)
    XR = np.column_stack([np.ones(4), rng.normal(size=4)])
    XG2 = rng.normal(size=(4, 2))
    V, Wt, _ = build_cluster_design(ClusterData(np.ones(4), XR, XG2=XG2), np.zeros((2, 2)))
    np.testing.assert_allclose(V, np.hstack([np.zeros((4, 2)), XG2]))
    np.testing.assert_allclose(Wt, np.hstack([np.eye(2), np.zeros((2, 2))]))


def test_design_subject_level_hand_case():
    XR = np.ones((3, 1))
    XG2 = np.array([[0.1], [0.2], [0.3]])
    V, Wt, C = build_cluster_design(ClusterData(np.ones(3), XR, xg1=[2.0], XG2=XG2), np.array([[0.5]]))
    np.testing.assert_allclose(C, [[1.0, 2.0]])
    np.testing.assert_allclose(V[:, :2], 0.5 * XR @ np.array([[1.0, 2.0]]))
    np.testing.assert_allclose(Wt, [[0.5, 1.0, 0.0]])


def test_cluster_c_matrix():
    np.testing.assert_allclose(cluster_c_matrix([3.0, 4.0], 2), [[1, 0, 3, 4], [0, 1, 0, 0]])
    np.testing.assert_allclose(cluster_c_matrix([], 1), [[1.0]])


def test_design_wrong_w_shape():
    with pytest.raises(ShapeError):
        build_cluster_design(ClusterData([1], np.ones((1, 1))), np.eye(2))


@settings(max_examples=40)
@given(st.integers(min_value=0, max_value=2**31 - 1), st.integers(1, 3), st.integers(0, 2), st.integers(0, 2))
def test_linear_predictor_round_trip(seed, r, g1, g2):
    """V beta + XR alpha_tilde reproduces XR (C beta_RG1 + u) + XG2 beta_G2 for any W."""
    rng = np.random.default_rng(seed)
    n_i = 4
    XR = np.column_stack([np.ones(n_i), rng.normal(size=(n_i, r - 1))])
    c = ClusterData(np.ones(n_i), XR, xg1=rng.normal(size=g1) if g1 else None, XG2=rng.normal(size=(n_i, g2)))
    W = rng.normal(size=(r, r))
    V, Wt, C = build_cluster_design(c, W)
    beta = rng.normal(size=r + g1 + g2)
    u = rng.normal(size=r)
    brg1 = beta[: r + g1]
    alpha_tilde = C @ brg1 + u - W @ C @ brg1
    eta = V @ beta + XR @ alpha_tilde
    expected = XR @ (C @ brg1 + u) + c.XG2 @ beta[r + g1 :]
    np.testing.assert_allclose(eta, expected, atol=1e-10)
    # alpha_tilde has prior mean W_tilde beta
    np.testing.assert_allclose(Wt @ beta, (np.eye(r) - W) @ C @ brg1, atol=1e-12)


def test_batched_designs_match_per_cluster(poisson_toy):
    rng = np.random.default_rng(3)
    W = rng.normal(size=(poisson_toy.n, 2, 2))
    V, Wt, C = build_designs(poisson_toy.batch, W)
    for i, c in enumerate(poisson_toy.clusters):
        Vi, Wti, Ci = build_cluster_design(c, W[i])
        np.testing.assert_allclose(V[i, : c.n_i], Vi)
        np.testing.assert_allclose(Wt[i], Wti)
        np.testing.assert_allclose(C[i], Ci)


def test_batch_padding():
    a = ClusterData([1, 2, 3], np.ones((3, 1)), XG2=[[1.0], [2.0], [3.0]])
    b = ClusterData([4], np.ones((1, 1)), XG2=[[9.0]])
    ds = Dataset([a, b], "poisson")
    bt = ds.batch
    assert bt.y.shape == (2, 3)
    assert bt.mask.tolist() == [[1, 1, 1], [1, 0, 0]]
    assert bt.sizes.tolist() == [3, 1]
    sub = bt.take([1])
    assert sub.y.shape == (1, 3) and sub.y[0, 0] == 4


def test_content_hash_ignores_covariates():
    a = Dataset([ClusterData([1, 2], np.ones((2, 1)), XG2=[[0.0], [1.0]])], "poisson")
    b = Dataset([ClusterData([1, 2], np.ones((2, 1)))], "poisson")
    c = Dataset([ClusterData([1, 3], np.ones((2, 1)))], "poisson")
    assert a.content_hash == b.content_hash != c.content_hash


# state -----------------------------------------------------------------------


def _state(ds, W):
    n, r, p = ds.n, ds.r, ds.p
    return VariationalState.create(
        ds, np.zeros(p), np.eye(p), n + 2.0, np.eye(r) * 3, np.zeros((n, r)), np.tile(np.eye(r), (n, 1, 1)), W
    )


def test_state_invariants(poisson_toy):
    prior = PriorSpec(np.eye(poisson_toy.p), 2.0, np.eye(2))
    st_ = _state(poisson_toy, np.tile(np.eye(2), (poisson_toy.n, 1, 1)))
    st_.check_invariants(poisson_toy, prior)
    st_.nu_q += 1
    with pytest.raises(AssertionError):
        st_.check_invariants(poisson_toy, prior)


def test_state_copy_is_deep(poisson_toy):
    s = _state(poisson_toy, np.zeros((poisson_toy.n, 2, 2)))
    t = s.copy()
    t.mu_beta[0] = 9.0
    assert s.mu_beta[0] == 0.0


def test_alpha_means_invertible(poisson_toy):
    rng = np.random.default_rng(2)
    s = _state(poisson_toy, rng.uniform(0, 1, size=(poisson_toy.n, 2, 2)))
    s.mu_beta = rng.normal(size=poisson_toy.p)
    alpha = s.alpha_means()
    back = alpha - np.einsum("nrs,nsk,k->nr", s.W, s.C, s.mu_beta_rg1)
    np.testing.assert_allclose(back, s.mu_alpha)


# inverse-Wishart summaries ---------------------------------------------------


def test_iw_moments_against_scipy():
    S = np.array([[2.0, 0.3], [0.3, 1.0]])
    nu = 12.0
    mean, sd = _iw_moments(S, nu)
    np.testing.assert_allclose(mean, invwishart(df=nu, scale=S).mean(), rtol=1e-12)
    draws = invwishart(df=nu, scale=S).rvs(size=200_000, random_state=np.random.default_rng(0))
    mc_sd = draws.std(axis=0)
    np.testing.assert_allclose(sd, mc_sd, rtol=0.03)


def test_iw_moments_undefined():
    mean, sd = _iw_moments(np.eye(2), 3.0)
    assert np.all(np.isnan(mean)) and np.all(np.isnan(sd))


def test_posterior_summaries_layout(poisson_toy):
    s = _state(poisson_toy, np.eye(2)[None].repeat(poisson_toy.n, 0))
    out = posterior_summaries(s, poisson_toy)
    assert [r["name"] for r in out["fixed"]] == poisson_toy.fixed_names
    assert len(out["random_sd"]) == 2
    expected = np.sqrt(3.0 / (s.nu_q - 2 - 1))
    assert abs(out["random_sd"][0]["mean"] - expected) < 1e-12


def test_toy_dataset_helper():
    ds = toy_dataset("bernoulli", 1)
    assert ds.family is Family.BERNOULLI and ds.p == 4
