import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nonlocal_hom.grid import (
    Domain,
    GridField,
    admissible_pairs,
    build_layer_mask,
    fd_gradient,
    sample_function,
)


def test_vertex_grid_shape():
    assert Domain(1, 1.0, 0.1).shape == (11,)
    assert Domain(2, (1.0, 2.0), 0.5, "periodic").shape == (2, 4)


def test_incommensurate_spacing():
    with pytest.raises(ValueError, match="incommensurate"):
        Domain(1, 1.0, 0.3)


def test_too_few_nodes():
    with pytest.raises(ValueError):
        Domain(1, 1.0, 1.0, "periodic")


def test_nonfinite_values_rejected():
    with pytest.raises(ValueError, match="finite"):
        GridField(Domain(1, 1.0, 0.5), [0.0, np.nan, 1.0])


def test_node_weights_integrate_constants():
    dom = Domain(2, (1.0, 2.0), 0.25)
    assert dom.node_weights().sum() == pytest.approx(2.0, rel=1e-14)
    assert Domain(1, 1.0, 0.25, "periodic").node_weights().sum() == pytest.approx(1.0, rel=1e-14)


# --- layer masks


def test_layer_width_zero():
    assert len(build_layer_mask(Domain(2, 1.0, 0.1), 0.0)) == 0


def test_layer_two_nodes_each_side():
    dom = Domain(1, 1.0, 0.1)
    m = build_layer_mask(dom, 0.15)
    x = dom.coords()[..., 0]
    np.testing.assert_allclose(x[m.selected], [0.0, 0.1, 0.9, 1.0], atol=1e-12)


def test_layer_full_box():
    m = build_layer_mask(Domain(2, 1.0, 0.1), 1.0)
    assert m.selected.all()


def test_layer_periodic_rejected():
    with pytest.raises(ValueError, match="mask undefined for periodic domains"):
        build_layer_mask(Domain(1, 1.0, 0.1, "periodic"), 0.2)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 0.6), st.floats(0, 0.6), st.sampled_from([1, 2]))
def test_layer_monotone(w1, w2, d):
    dom = Domain(d, 1.0, 0.05)
    a, b = sorted((w1, w2))
    m1 = build_layer_mask(dom, a).selected
    m2 = build_layer_mask(dom, b).selected
    assert not np.any(m1 & ~m2)


# --- pairs


def test_pairs_zero_shift():
    dom = Domain(2, 1.0, 0.25)
    i, j = admissible_pairs(dom, (0, 0))
    assert len(i) == dom.size and np.array_equal(i, j)


def test_pairs_truncated_count():
    i, j = admissible_pairs(Domain(1, 1.0, 0.1), 3)
    assert len(i) == 8
    assert np.all(j - i == 3)


def test_pairs_periodic_wrap():
    dom = Domain(2, 1.0, 0.1, "periodic")
    for s in [(3, -7), (0, 1), (9, 9)]:
        assert len(admissible_pairs(dom, s)[0]) == 100


def test_off_lattice_shift():
    with pytest.raises(ValueError, match="off-lattice shift"):
        admissible_pairs(Domain(1, 1.0, 0.1), 0.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(-6, 6), st.integers(-6, 6), st.sampled_from(["truncated", "periodic"]))
def test_pairs_symmetric(s1, s2, mode):
    dom = Domain(2, (1.0, 0.5), 0.1, mode)
    a = admissible_pairs(dom, (s1, s2))
    b = admissible_pairs(dom, (-s1, -s2))
    fwd = sorted(zip(*a))
    back = sorted(zip(b[1], b[0]))
    assert fwd == back


# --- sampling and gradients


def test_sample_zero():
    u = sample_function(Domain(2, 1.0, 0.5), lambda x: np.zeros(len(x)))
    assert not u.values.any()


def test_sample_affine():
    u = sample_function(Domain(1, 1.0, 0.5), lambda x: 2 * x[:, 0])
    assert u.values[:, 0].tolist() == [0.0, 1.0, 2.0]


def test_sample_sine_periodic():
    u = sample_function(Domain(1, 1.0, 0.25, "periodic"), lambda x: np.sin(2 * np.pi * x[:, 0]))
    np.testing.assert_allclose(u.values[:, 0], [0.0, 1.0, 0.0, -1.0], atol=1e-15)


def test_gradient_constant():
    u = GridField(Domain(2, 1.0, 0.25), np.full((5, 5, 2), 3.0))
    assert not fd_gradient(u).any()


def test_gradient_quadratic_center():
    dom = Domain(1, 1.0, 0.1)
    u = sample_function(dom, lambda x: x[:, 0] ** 2)
    assert fd_gradient(u)[5, 0, 0] == pytest.approx(1.0, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=4, max_size=4),
    st.sampled_from([0.1, 0.125, 0.25]),
)
def test_gradient_exact_on_affine(entries, h):
    M = np.array(entries).reshape(2, 2)
    u = sample_function(Domain(2, 1.0, h), lambda x: x @ M.T)
    G = fd_gradient(u)
    np.testing.assert_allclose(G, np.broadcast_to(M, G.shape), atol=1e-11 * (1 + np.abs(M).max()))


def test_csv_roundtrip():
    dom = Domain(2, (1.0, 0.5), 0.25, "periodic")
    u = GridField(dom, np.random.default_rng(0).normal(size=dom.shape + (2,)))
    v = GridField.from_csv(u.to_csv())
    assert v.domain == dom
    np.testing.assert_array_equal(v.values, u.values)
    w = GridField.from_bytes(u.to_bytes())
    np.testing.assert_array_equal(w.values, u.values)
