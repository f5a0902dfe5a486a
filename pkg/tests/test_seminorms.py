from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import full_linear_square, restricted_linear_square
from fracsobolev.errors import ValidationError
from fracsobolev.fields import Linear, PiecewiseLinear, parse_field
from fracsobolev.geometry import Exponents, slit_domain, unit_square
from fracsobolev.meshing import triangulate
from fracsobolev.seminorms import (detect_divergence, gagliardo_full, gagliardo_restricted, lp_norm, mc_oracle,
                                   w1p_norm)

SQ = unit_square()
SLIT = slit_domain()
EXPONENTS = [(0.5, 2.0), (0.8, 1.5), (0.3, 3.0)]


@pytest.mark.parametrize("s, p", EXPONENTS)
def test_full_linear_matches_reduced_integral(s, p):
    got = gagliardo_full(Linear(1, 0), Exponents(s, p), SQ, levels=(3,)).value
    assert got == pytest.approx(full_linear_square(1, 0, s, p), rel=1e-3)


@pytest.mark.parametrize("s, p", EXPONENTS)
def test_restricted_linear_matches_closed_form(s, p):
    got = gagliardo_restricted(Linear(0.5, -1), Exponents(s, p), SQ, levels=(3,)).value
    assert got == pytest.approx(restricted_linear_square(0.5, -1, s, p), rel=1e-3)


def test_constants_have_zero_seminorm():
    for kind in (gagliardo_full, gagliardo_restricted):
        r = kind(parse_field("const 3"), Exponents(0.5, 2), SLIT, levels=(1, 2))
        assert r.value == 0.0 and r.history == [0.0, 0.0] and not r.diverging


@pytest.mark.parametrize("text", ["bump 0.5 0.5 0.4", "hat 0.25 0.75 0.25", "linear 1 2"])
def test_restricted_never_exceeds_full(text):
    f = parse_field(text)
    for s, p in EXPONENTS[:2]:
        e = Exponents(s, p)
        full = gagliardo_full(f, e, SQ, levels=(1, 2))
        res = gagliardo_restricted(f, e, SQ, levels=(1, 2))
        assert all(r <= v for r, v in zip(res.history, full.history))


@settings(max_examples=10, deadline=None)
@given(st.floats(-50, 50).filter(lambda c: abs(c) > 1e-3))
def test_homogeneity(c):
    f = parse_field("bump 0.4 0.5 0.3")
    e = Exponents(0.5, 2.0)
    base = gagliardo_full(f, e, SQ, levels=(1,)).value
    assert gagliardo_full(f * c, e, SQ, levels=(1,)).value == pytest.approx(abs(c) * base, rel=1e-12)
    base_r = gagliardo_restricted(f, e, SQ, levels=(1,)).value
    assert gagliardo_restricted(f * c, e, SQ, levels=(1,)).value == pytest.approx(abs(c) * base_r, rel=1e-12)


@settings(max_examples=8, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_translation_invariance(tx, ty):
    f = parse_field("bump 0.3 0.2 0.5")
    e = Exponents(0.8, 1.5)
    moved = SLIT.translated((tx, ty))
    g = f.translated((tx, ty))
    for kind in (gagliardo_full, gagliardo_restricted):
        a = kind(f, e, SLIT, levels=(1,)).value
        b = kind(g, e, moved, levels=(1,)).value
        assert b == pytest.approx(a, rel=1e-10)


def test_lp_and_w1p_examples():
    assert lp_norm(parse_field("const 3"), SQ, 2) == pytest.approx(3.0, rel=1e-13)
    assert lp_norm(Linear(1, 0), SQ, 3) == pytest.approx(0.25 ** (1 / 3), rel=1e-13)
    full, grad = w1p_norm(Linear(1, 0), SQ, 2)
    assert grad == pytest.approx(1.0, rel=1e-13)
    assert full == pytest.approx(math.sqrt(1 / 3 + 1), rel=1e-13)
    with pytest.raises(ValidationError):
        lp_norm(Linear(1, 0), SQ, 0.5)


def test_center_hat_gradient_norm():
    mesh = triangulate(SQ, 0.5, scheme="structured")
    c = int(np.flatnonzero(np.all(np.isclose(mesh.vertices, 0.5), axis=1))[0])
    coeffs = np.zeros(mesh.n_vertices)
    coeffs[c] = 1.0
    hat = PiecewiseLinear(mesh, coeffs)
    # stiffness diagonal of an interior node on a right-triangle grid is 4
    assert w1p_norm(hat, SQ, 2, mesh=mesh)[1] == pytest.approx(2.0, rel=1e-12)
    # support of area 1/2 with |grad| <= 2 / ell
    assert w1p_norm(hat, SQ, 2, mesh=mesh)[1] <= (2 / 0.5) * math.sqrt(0.5)


def test_divergence_detector():
    assert detect_divergence([1.0, 1.1, 1.21, 1.331])
    assert not detect_divergence([1.0, 1.1, 1.15, 1.17])
    assert not detect_divergence([1.0, 1.1, 1.2])
    assert not detect_divergence([1.0, 1.2, 1.1, 1.3])
    assert detect_divergence([1.0, 1.5, 2.25, 3.4], gamma=1.5)
    assert not detect_divergence([1.0, 1.1, 1.21, 1.331], gamma=1.5)


def test_mc_oracle_agrees_with_quadrature():
    e = Exponents(0.5, 2.0)
    full = mc_oracle(Linear(1, 0), e, SQ, restricted=False, n_samples=10 ** 6, seed=4)
    assert not full.unstable
    assert abs(full.estimate - full_linear_square(1, 0, 0.5, 2) ** 2) <= 4 * full.std_error
    res = mc_oracle(Linear(1, 0), e, SQ, restricted=True, n_samples=10 ** 6, seed=4)
    assert abs(res.estimate - restricted_linear_square(1, 0, 0.5, 2) ** 2) <= 4 * res.std_error


def test_mc_oracle_is_reproducible_and_guards_input():
    e = Exponents(0.5, 2.0)
    a = mc_oracle(Linear(1, 0), e, SQ, restricted=True, n_samples=2 * 10 ** 4, seed=9, chunk=7000)
    b = mc_oracle(Linear(1, 0), e, SQ, restricted=True, n_samples=2 * 10 ** 4, seed=9, chunk=7000)
    assert a == b
    assert mc_oracle(parse_field("const 1"), e, SQ, True).estimate == 0.0
    with pytest.raises(ValidationError):
        mc_oracle(Linear(1, 0), e, SQ, True, n_samples=100)
