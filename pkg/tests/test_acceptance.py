"""Acceptance criteria 1-8, one test each, at the stated tolerances.

Each test prints a single ``criterion N: PASS|FAIL ...`` line (outside
pytest's capture) before asserting.
"""

from __future__ import annotations

import time

import numpy as np
import pytest

from oracles import dense_p2_decomposition
from fracsobolev.experiments import (SMOOTH_SQUARE_SUITE, THEOREM_EXPONENTS, SuiteRunner, builtin_domain,
                                     k_chain_ok, lipschitz_equivalence, slit_experiment, theorem_suite)
from fracsobolev.fields import PiecewiseLinear, parse_field
from fracsobolev.geometry import (DomainSpec, Exponents, _closed_segments, _self_intersects, contains_points,
                                  distance_to_boundary, restricted_pairs, segments_in_domain, unit_square)
from fracsobolev.kfunctional import FESpace, ScaleGrid, k_profile, minimize_surrogate, partition_at
from fracsobolev.meshing import lagrange_partition, snowflake_partition, triangulate
from fracsobolev.seminorms import gagliardo_full, gagliardo_restricted, mc_oracle
from fracsobolev.snowflake import SnowflakePlan, build_snowflake, snowflake_domain, snowflake_stats


@pytest.fixture
def verdict(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    return emit


def _sample(domain, n, rng):
    xmin, ymin, xmax, ymax = domain.bbox
    out = np.zeros((0, 2))
    while len(out) < n:
        pts = rng.uniform([xmin, ymin], [xmax, ymax], size=(4 * n, 2))
        out = np.vstack([out, pts[contains_points(domain, pts)]])
    return out[:n]


# -- 1: slit counterexample -----------------------------------------------------


def test_criterion_1_slit_counterexample(verdict):
    t0 = time.time()
    rep = slit_experiment(levels=(3, 4, 5, 6), s=0.8, p=1.5, counts=(6, 8))
    elapsed = time.time() - t0
    growth = rep["full"]["growth_factors"]
    checks = {
        "full growth >= 1.5 per level": all(g >= 1.5 for g in growth),
        "full diverging": rep["full"]["diverging"],
        "restricted change <= 10%": rep["restricted"]["last_relative_change"] <= 0.10,
        "interp change 6->8 scales <= 10%": rep["interp"]["relative_change"] <= 0.10,
        "runtime <= 10 min": elapsed <= 600,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    verdict(1, ok, f"full growth {[round(g, 4) for g in growth]}, diverging={rep['full']['diverging']}, "
                   f"restricted change {rep['restricted']['last_relative_change']:.3%}, "
                   f"interp change {rep['interp']['relative_change']:.3%}, {elapsed:.0f}s"
                   + (f"; failed: {failed}" if failed else ""))
    assert ok, failed


# -- 2, 3: both inclusions over the theorem suite ---------------------------------


@pytest.fixture(scope="module")
def suite():
    runner = SuiteRunner()
    domains = {name: builtin_domain(name) for name in ("square", "slit", "snowflake")}
    t0 = time.time()
    cases = theorem_suite(domains, exponents=THEOREM_EXPONENTS, runner=runner)
    return cases, time.time() - t0


def test_criterion_2_restricted_bounded_by_interpolation(suite, verdict):
    cases, elapsed = suite
    c1 = max(c.c1 for c in cases)
    worst = max(cases, key=lambda c: c.c1)
    contradictions = [(c.domain_id, c.fn_id, c.s, c.p) for c in cases
                      if c.restricted.diverging and c.interp_stable]
    n_fns = {d: len({c.fn_id for c in cases if c.domain_id == d}) for d in {c.domain_id for c in cases}}
    ok = c1 <= 100 and not contradictions and min(n_fns.values()) >= 8 and elapsed <= 1200
    verdict(2, ok, f"C1 = {c1:.4g} (worst {worst.domain_id} '{worst.fn_id}' s={worst.s} p={worst.p}), "
                   f"{len(cases)} cases, functions per domain {n_fns}, "
                   f"restricted-diverging/interp-stable cases {len(contradictions)}, {elapsed:.0f}s")
    assert ok


def test_criterion_3_interpolation_bounded_by_restricted(suite, verdict):
    cases, _ = suite
    c2 = max(c.c2 for c in cases)
    worst = max(cases, key=lambda c: c.c2)
    chain_fail = [(c.domain_id, c.fn_id, c.p) for c in cases if not k_chain_ok(c.interp_opt)]
    ok = c2 <= 100 and not chain_fail
    verdict(3, ok, f"C2 = {c2:.4g} (worst {worst.domain_id} '{worst.fn_id}' s={worst.s} p={worst.p}), "
                   f"K chain violations {len(chain_fail)}")
    assert ok


# -- 4: K-functional properties ------------------------------------------------------


def _random_case(rng, coarse):
    kind = rng.integers(4)
    if kind == 0:
        a, b, c = rng.uniform(-2, 2, 3).tolist()
        return parse_field(f"linear {a!r} {b!r} {c!r}"), False
    if kind == 1:
        cx, cy = rng.uniform(0.2, 0.8, 2).tolist()
        return parse_field(f"bump {cx!r} {cy!r} {rng.uniform(0.1, 0.5)!r}"), False
    if kind == 2:
        cx, cy = rng.uniform(0.2, 0.8, 2).tolist()
        return parse_field(f"hat {cx!r} {cy!r} {rng.uniform(0.1, 0.4)!r}"), False
    return PiecewiseLinear(coarse, rng.normal(size=coarse.n_vertices), name="random_p1"), True


def test_criterion_4_k_functional_properties(verdict):
    rng = np.random.default_rng(4)
    sq = unit_square()
    coarse = triangulate(sq, 0.25, scheme="structured")
    t0 = time.time()
    bad = []
    for i in range(20):
        f, in_fe = _random_case(rng, coarse)
        p = float(rng.choice([1.5, 2.0, 3.0]))
        grid = ScaleGrid(float(rng.uniform(0.15, 0.3)), 0.5, 4)
        prof = k_profile(f, p, grid, sq)
        ells = np.array(prof.scales)[::-1]
        k = np.array(prof.k_opt)[::-1]
        slopes = np.diff(k) / np.diff(ells)
        conds = {
            "K <= ||f||_p": bool((k <= prof.lp_norm).all()),
            "nondecreasing": bool((np.diff(k) >= 0).all()),
            "concave slopes": bool((slopes[1:] <= 1.05 * slopes[:-1] + 1e-14).all()),
            "K <= ell ||f||_W": (not in_fe) or bool((k <= ells * prof.w1p_norm).all()),
        }
        if not all(conds.values()):
            bad.append((i, f.name, p, [c for c, v in conds.items() if not v]))
    elapsed = time.time() - t0
    ok = not bad and elapsed <= 300
    verdict(4, ok, f"20 random cases, violations {bad}, {elapsed:.0f}s")
    assert ok


# -- 5: oracle agreement ---------------------------------------------------------------


def test_criterion_5_monte_carlo_oracle(verdict):
    sq = unit_square()
    e = Exponents(0.5, 2.0)
    t0 = time.time()
    worst_z = 0.0
    rows = []
    linear_rel = None
    for fn in SMOOTH_SQUARE_SUITE[:5]:
        f = parse_field(fn)
        for restricted, engine in ((False, gagliardo_full), (True, gagliardo_restricted)):
            q = engine(f, e, sq, levels=(4,))
            mc = mc_oracle(f, e, sq, restricted, n_samples=10 ** 7, seed=7)
            z = (q.power - mc.estimate) / mc.std_error
            worst_z = max(worst_z, abs(z))
            rows.append((fn, "restricted" if restricted else "full", round(z, 2)))
            if fn == "linear 1 0 0" and not restricted:
                linear_rel = abs(q.value - mc.estimate ** 0.5) / mc.estimate ** 0.5
    elapsed = time.time() - t0
    ok = worst_z <= 3 and linear_rel <= 0.02 and elapsed <= 600
    verdict(5, ok, f"max |z| = {worst_z:.2f} over {len(rows)} runs {rows}, f=x relative gap {linear_rel:.2e}, "
                   f"{elapsed:.0f}s")
    assert ok


# -- 6: Lipschitz equivalence ------------------------------------------------------------


def test_criterion_6_lipschitz_equivalence(verdict):
    rep = lipschitz_equivalence()
    ok = rep["ratio_min"] >= 1 and rep["ratio_max"] <= 50
    verdict(6, ok, f"full/restricted ratio in [{rep['ratio_min']:.4g}, {rep['ratio_max']:.4g}] over "
                   f"{len(rep['rows'])} cases")
    assert ok


# -- 7: geometry and meshing invariants ----------------------------------------------------


def test_criterion_7_geometry_invariants(verdict):
    rng = np.random.default_rng(7)
    sq = builtin_domain("square")
    slit = builtin_domain("slit")
    sf = builtin_domain("snowflake")
    lshape = DomainSpec.from_lists([[0, 0], [2, 0], [2, 1], [1, 1], [1, 2], [0, 2]], name="lshape")
    notes = {}

    # partition of unity
    pu_err = 0.0
    for dom, ell in ((sq, 0.0625), (slit, 0.125), (sf, 0.09), (sf, 0.027)):
        pu = partition_at(dom, ell)
        spec = dom.domain if hasattr(dom, "domain") else dom
        val, _, _ = pu.evaluate(_sample(spec, 5000, rng))
        pu_err = max(pu_err, float(np.abs(np.asarray(val.sum(1)).ravel() - 1).max()))
    notes["PU identity"] = (pu_err <= 1e-12, f"{pu_err:.1e}")

    # gradient bound across 5 scales: dyadic on square/slit, p^k on the snowflake
    spreads = {}
    for name, dom, scales in (("square", sq, 0.25 / 2 ** np.arange(5)), ("slit", slit, 0.25 / 2 ** np.arange(5))):
        v = np.array([lagrange_partition(triangulate(dom, ell, strict=False)).gradient_sup().max() * ell
                      for ell in scales])
        spreads[name] = v
    deep = snowflake_domain(SnowflakePlan.uniform(0.3, "bump", 5))
    spreads["snowflake"] = np.array([snowflake_partition(deep, 0.3 ** k)[1].gradient_sup().max() * 0.3 ** k
                                     for k in range(1, 6)])
    grad_ok = all(np.abs(v / ((v.max() + v.min()) / 2) - 1).max() <= 0.20 for v in spreads.values())
    notes["gradient bound +-20%"] = (grad_ok, {k: np.round(v, 3).tolist() for k, v in spreads.items()})

    # duplicated slit vertices
    m = triangulate(slit, 0.125)
    pu = lagrange_partition(m)
    sep = len(m.dup_pairs) > 0
    for i, j in m.dup_pairs:
        up, down = (i, j) if m.side_tags[i] > 0 else (j, i)
        x = m.vertices[up][0]
        val, _, _ = pu.evaluate(np.array([[x, -1e-9], [x, 1e-9]]))
        sep &= not set(pu.star(i)) & set(pu.star(j)) and val[0, up] == 0 and val[1, down] == 0
    notes["slit side separation"] = (bool(sep), f"{len(m.dup_pairs)} pairs")

    # snowflake counts, perimeter, minimum length and simplicity for N <= 6
    stats_err, simple = 0.0, True
    plans = [SnowflakePlan.uniform(p, r, n) for p in (0.26, 0.3, 0.45) for r in ("bump", "straight")
             for n in range(7)] + [SnowflakePlan(0.35, ("straight", "bump") * 3)]
    for plan in plans:
        curve, _ = build_snowflake(plan)
        count, per, mn = snowflake_stats(plan)
        seg = curve.segment_lengths
        stats_err = max(stats_err, abs(len(seg) - count), abs(seg.sum() - per) / per, abs(seg.min() - mn) / mn)
        simple &= not _self_intersects(_closed_segments(curve.vertices), True)
    notes["snowflake stats"] = (stats_err <= 1e-12, f"{stats_err:.1e} over {len(plans)} plans")
    notes["snowflake simple"] = (bool(simple), "")

    # restricted pairs lie on admissible segments
    pair_ok, n_pairs = True, {}
    for name, spec in (("square", sq), ("slit", slit), ("lshape", lshape), ("snowflake", sf.domain)):
        x = _sample(spec, 10 ** 4, rng)
        d = distance_to_boundary(spec, x)
        # half of the y's inside B(x, d/2), half anywhere in the bounding box
        r = d * rng.uniform(0, 0.6, len(x))
        phi = rng.uniform(0, 2 * np.pi, len(x))
        y = x + r[:, None] * np.column_stack([np.cos(phi), np.sin(phi)])
        xmin, ymin, xmax, ymax = spec.bbox
        y[::2] = rng.uniform([xmin, ymin], [xmax, ymax], size=(len(y[::2]), 2))
        mask = restricted_pairs(spec, x, y)
        n_pairs[name] = int(mask.sum())
        pair_ok &= bool(segments_in_domain(spec, x[mask], y[mask]).all())
    notes["restricted => segment"] = (pair_ok, f"10^4 pairs per domain, restricted {n_pairs}")

    ok = all(v[0] for v in notes.values())
    verdict(7, ok, "; ".join(f"{k}: {'ok' if v[0] else 'FAIL'} {v[1]}" for k, v in notes.items()))
    assert ok


# -- 8: sparse p = 2 solve against a dense one -------------------------------------------


def test_criterion_8_dense_oracle(verdict):
    sq = unit_square()
    mesh = triangulate(sq, 0.125, scheme="structured")
    assert mesh.n_vertices == 81
    fe = FESpace(mesh)
    ell = 0.25
    rng = np.random.default_rng(8)
    worst = 0.0
    for coeffs in (mesh.vertices[:, 0], rng.normal(size=81), np.sin(3 * mesh.vertices[:, 1])):
        f = PiecewiseLinear(mesh, coeffs)
        fx = f(fe.x)
        c = minimize_surrogate(fe, fx, ell, 2.0)
        a, b = fe.norms(fx, c, 2.0)
        _, dense = dense_p2_decomposition(mesh.vertices, mesh.triangles, coeffs, ell)
        worst = max(worst, abs(a + ell * b - dense) / dense)
    ok = worst <= 1e-8
    verdict(8, ok, f"max relative gap {worst:.2e} on the 8x8 mesh")
    assert ok
