import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from prooflab.dag import GenParams, sample_dag, suff_stats
from prooflab.errors import ContractError, NullEventError
from prooflab.learners import (DecisionDataset, ERMPolicy, LatentEM, LatentModel,
                               LatentObservation, PosteriorFamily, StructureEstimator, coarsen,
                               depth_conditionals, elbo, em_step, erm_fit, estimate_structure,
                               exact_posterior, kl, latent_decisions, latent_risk, log_evidence,
                               log_joint, mixture_kl, posterior_kl, posterior_weighted_erm, postkl,
                               risk, sample_latent_instance)
from prooflab.policy import TabularPolicy, floor_project


def grid_argmax(counts, rho, step=0.005):
    """Best floor-feasible point on a grid over the 3-simplex."""
    best, arg = -math.inf, None
    ticks = np.arange(rho, 1 + 1e-12, step)
    for a in ticks:
        for b in ticks:
            c = 1 - a - b
            if c < rho - 1e-12:
                continue
            p = np.array([a, b, c])
            val = float(np.sum(np.where(counts > 0, counts * np.log(p), 0.0)))
            if val > best:
                best, arg = val, p
    return arg


def test_floor_projection_examples():
    p = floor_project([10, 0, 0], 0.1)
    assert p == pytest.approx([0.8, 0.1, 0.1], abs=1e-15)
    assert p == pytest.approx(grid_argmax(np.array([10.0, 0, 0]), 0.1), abs=0.005)
    assert floor_project([4, 4, 4], 0.1) == pytest.approx([1 / 3] * 3, abs=1e-15)
    assert floor_project([3, 1], 1e-9) == pytest.approx([0.75, 0.25], abs=1e-8)
    assert floor_project([0, 0], 0.1) == pytest.approx([0.5, 0.5])


def test_floor_projection_against_grid_search():
    rng = np.random.default_rng(0)
    for _ in range(5):
        counts = rng.integers(0, 8, size=3).astype(float)
        counts[0] += 1
        p = floor_project(counts, 0.08)
        assert p == pytest.approx(grid_argmax(counts, 0.08), abs=0.006)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=2, max_size=6), st.floats(0.0, 0.15))
def test_floor_projection_is_optimal(counts, rho):
    n = np.array(counts, float)
    rho = min(rho, 1.0 / len(n))
    p = floor_project(n, rho)
    assert abs(p.sum() - 1) <= 1e-12 and p.min() >= rho - 1e-12
    if n.sum() == 0:
        return
    obj = lambda v: float(np.sum(np.where(n > 0, n * np.log(np.maximum(v, 1e-300)), 0.0)))
    rng = np.random.default_rng(len(counts))
    for _ in range(20):
        v = rng.dirichlet(np.ones(len(n))) * (1 - rho * len(n)) + rho
        assert obj(v) <= obj(p) + 1e-9


def test_kl_examples():
    q = TabularPolicy({"s": np.array([0.7, 0.3])}, 2)
    pi = TabularPolicy({"s": np.array([0.5, 0.5])}, 2)
    expected = 0.7 * math.log(1.4) + 0.3 * math.log(0.6)
    assert mixture_kl(pi, q, {"s": 1.0}) == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.08228, abs=1e-5)
    assert mixture_kl(q, q, {"s": 1.0}) == 0.0


def test_risk_identity():
    rng = np.random.default_rng(1)
    keys = [f"k{i}" for i in range(6)]
    q = TabularPolicy({k: rng.dirichlet(np.ones(4)) for k in keys}, 4)
    pi = TabularPolicy({k: rng.dirichlet(np.ones(4)) for k in keys}, 4)
    data = DecisionDataset()
    for k in keys:
        for _ in range(int(rng.integers(1, 5))):
            data.add(k, 0)
    assert risk(pi, q, data) - risk(q, q, data) == pytest.approx(mixture_kl(pi, q, data), abs=1e-10)


def test_erm_fit_types_and_unseen_classes():
    data = DecisionDataset()
    for c in (0, 0, 1):
        data.add("dec:1:0", c, "dec")
    data.add("sol:2:0", 2, "sol")
    pol = erm_fit(data, "dec", 0.0, 3)
    assert pol.probs("dec:1:0") == pytest.approx([2 / 3, 1 / 3, 0.0])
    assert "sol:2:0" not in pol.table
    assert pol.probs("unseen") == pytest.approx([1 / 3] * 3)


def test_erm_estimator_api():
    est = ERMPolicy(rho=0.1, M=3)
    assert clone(est).get_params() == {"rho": 0.1, "M": 3, "keying": "shared"}
    est.fit(["a", "a", "b"], [0, 0, 2])
    assert est.predict_proba(["a"])[0] == pytest.approx([0.8, 0.1, 0.1])
    assert list(est.predict(["a", "b"])) == [0, 2]
    assert est.score(["a"], [0]) == pytest.approx(math.log(0.8))
    with pytest.raises(ValueError):
        est.fit(["a"], [0, 1])


def test_coarsened_class_plateau():
    q = TabularPolicy({"a": np.array([0.9, 0.1]), "b": np.array([0.1, 0.9])}, 2)
    shared = coarsen(q, {"a": "g", "b": "g"})
    assert shared.probs("a") == pytest.approx([0.5, 0.5])
    plateau = mixture_kl(shared, q, {"a": 1.0, "b": 1.0})
    assert plateau == pytest.approx(kl([0.9, 0.1], [0.5, 0.5]), abs=1e-15)
    assert plateau > 0


# ---------------------------------------------------------------------------
# latent model

def toy_model(rng, D=2, tau=0.4, M=3):
    q_dec, q_sol = depth_conditionals(D, M, 0.05, 0.4, rng)
    return LatentModel(D=D, tau=tau, alpha=0.5, K0=4.0, q_dec=q_dec, q_sol=q_sol, b_eff=2)


def all_flag_vectors(y):
    """Every flag vector in which each interior layer keeps a decomposition node."""
    sizes = [y.C[d] for d in range(1, y.D)]
    out = []
    for z in itertools.product((0, 1), repeat=sum(sizes)):
        pos, ok = 0, True
        for c in sizes:
            ok &= sum(z[pos:pos + c]) < c
            pos += c
        if ok:
            out.append(z)
    return out


def test_posterior_matches_full_enumeration():
    rng = np.random.default_rng(2)
    model = toy_model(rng, D=3)
    for _ in range(10):
        _, y, flags = sample_latent_instance(model, rng)
        post = exact_posterior(model, y)
        assert flags in post.support
        logs = np.array([log_joint(model, y, z) for z in all_flag_vectors(y)])
        w = np.exp(logs - logs[np.isfinite(logs)].max())
        brute = dict(zip(all_flag_vectors(y), w / w.sum()))
        ours = dict(zip(post.support, post.weights))
        tv = 0.5 * sum(abs(brute.get(z, 0) - ours.get(z, 0)) for z in set(brute) | set(ours))
        assert tv <= 1e-12


def test_posterior_matches_generative_frequencies():
    # rejection-sample the hidden flags given an observed (C, S, labels)
    rng = np.random.default_rng(3)
    q_dec = np.array([[0.6, 0.4]] * 3)
    q_sol = np.array([[0.2, 0.8]] * 3)
    model = LatentModel(D=2, tau=0.5, alpha=0.5, K0=1.0, q_dec=q_dec, q_sol=q_sol, b_eff=2)
    hits: dict = {}
    for _ in range(60_000):
        _, y, flags = sample_latent_instance(model, rng)
        hits.setdefault(y, {}).setdefault(flags, 0)
        hits[y][flags] += 1
    y, freq = max(hits.items(), key=lambda kv: sum(kv[1].values()))
    total = sum(freq.values())
    post = dict(zip(*(lambda p: (p.support, p.weights))(exact_posterior(model, y))))
    for z, w in post.items():
        se = math.sqrt(w * (1 - w) / total)
        assert abs(freq.get(z, 0) / total - w) <= 4 * se + 1e-12


def test_point_mass_and_symmetric_posteriors():
    q = np.array([[0.5, 0.5]] * 3)
    model = LatentModel(D=2, tau=0.5, alpha=0.5, K0=1.0, q_dec=q, q_sol=q.copy(), b_eff=2)
    # one terminal among two depth-1 nodes: which one is symmetric
    y = LatentObservation((1, 2, 2), (0, 1, 2), ((0,), (1, 1), (0, 1)))
    post = exact_posterior(model, y)
    assert sorted(post.support) == [(0, 1), (1, 0)]
    assert post.weights == pytest.approx([0.5, 0.5], abs=1e-15)
    y1 = LatentObservation((1, 1, 1), (0, 0, 1), ((0,), (1,), (0,)))
    p1 = exact_posterior(model, y1)
    assert p1.support == [(0,)] and p1.weights == pytest.approx([1.0])


def test_empty_support_is_a_null_event():
    model = toy_model(np.random.default_rng(0))
    y = LatentObservation((1, 2, 4), (3, 0, 4), ((0,), (0, 0), (0, 0, 0, 0)))
    with pytest.raises(NullEventError):
        exact_posterior(model, y)


def test_elbo_gap_identities():
    rng = np.random.default_rng(4)
    model = toy_model(rng, D=3)
    for _ in range(30):
        _, y, _ = sample_latent_instance(model, rng)
        exact = exact_posterior(model, y)
        logz = log_evidence(model, y)
        assert elbo(model, exact, y) == pytest.approx(logz, abs=1e-10)
        live = [z for z, w in zip(exact.support, exact.weights) if w > 0]
        r = PosteriorFamily(live, rng.dirichlet(np.ones(len(live))))
        gap = logz - elbo(model, r, y)
        assert gap == pytest.approx(posterior_kl(r, exact), abs=1e-10)
        assert gap >= -1e-12
        j = int(rng.choice(np.flatnonzero(exact.weights > 0)))
        point = PosteriorFamily([exact.support[j]], [1.0])
        assert logz - elbo(model, point, y) == pytest.approx(-math.log(exact.weights[j]),
                                                              abs=1e-10)


def test_elbo_rejects_mass_outside_support():
    model = toy_model(np.random.default_rng(5))
    y = LatentObservation((1, 2, 4), (0, 0, 4), ((0,), (0, 0), (0, 0, 0, 0)))
    with pytest.raises(ContractError):
        elbo(model, PosteriorFamily([(1, 1)], [1.0]), y)


def test_postkl_examples():
    p = PosteriorFamily([(0,), (1,)], [0.5, 0.5])
    assert postkl([p], [p]) == 0.0
    assert posterior_kl(PosteriorFamily([(0,)], [1.0]), p) == pytest.approx(math.log(2))


def test_posterior_weighted_erm_reductions():
    y = LatentObservation((1, 2, 2), (0, 1, 2), ((0,), (1, 0), (0, 1)))
    zs = [(0, 1), (1, 0)]
    sets = [latent_decisions(y, z) for z in zs]
    dec, sol = posterior_weighted_erm([([1.0, 0.0], sets)], 2, 1e-9)
    ref = erm_fit(sets[0], "dec", 1e-9, 2)
    for k in ref.table:
        assert dec.probs(k) == pytest.approx(ref.probs(k))
    dec, sol = posterior_weighted_erm([([0.5, 0.5], sets)], 2, 1e-9)
    # depth-1 solver labels: (0) under one completion, (1) under the other
    assert sol.probs("sol:d1") == pytest.approx([0.5, 0.5], abs=1e-8)
    with pytest.raises(ContractError):
        posterior_weighted_erm([([0.7, 0.7], sets)], 2)


def test_em_cycle_is_monotone():
    rng = np.random.default_rng(6)
    model = toy_model(rng)
    obs = [sample_latent_instance(model, rng)[1] for _ in range(40)]
    cur = model.copy(tau=0.2, alpha=0.8)
    seq = []
    for _ in range(5):
        cur, _, before, after = em_step(cur, obs, 0.01)
        seq += [before, after]
    assert all(b >= a - 1e-9 for a, b in zip(seq, seq[1:]))


def test_em_on_fully_observed_data_recovers_erm():
    rng = np.random.default_rng(7)
    model = toy_model(rng, D=1)
    obs = [sample_latent_instance(model, rng)[1] for _ in range(30)]
    new, posts, _, _ = em_step(model, obs, 0.02)
    data = DecisionDataset()
    for y, p in zip(obs, posts):
        assert len(p.support) == 1
        data.extend(latent_decisions(y, p.support[0]))
    for d in range(2):
        fit = erm_fit(data, "sol", 0.02, 3)
        if f"sol:d{d}" in fit.table:
            assert new.q_sol[d] == pytest.approx(fit.probs(f"sol:d{d}"), abs=1e-12)


def test_em_recovers_alpha():
    rng = np.random.default_rng(8)
    q_dec, q_sol = depth_conditionals(2, 4, 0.05, 0.4, rng)
    truth = LatentModel(D=2, tau=0.4, alpha=0.5, K0=8.0, q_dec=q_dec, q_sol=q_sol, b_eff=2)
    obs = [sample_latent_instance(truth, rng)[1] for _ in range(1000)]
    em = LatentEM(K0=8.0, rho=0.01, n_iter=5, tau_init=0.5, alpha_init=0.8).fit(obs, M=4)
    path = em.alpha_path_
    assert abs(path[-1] - 0.5) < abs(path[0] - 0.5)
    assert abs(em.alpha_ - 0.5) <= 0.1


def test_inference_error_bound():
    rng = np.random.default_rng(9)
    model = toy_model(rng, D=3)
    rho = 0.05
    obs = [sample_latent_instance(model, rng)[1] for _ in range(6)]
    exact = [exact_posterior(model, y) for y in obs]
    for _ in range(50):
        approx = [PosteriorFamily(p.support, rng.dirichlet(np.ones(len(p.support)))) for p in exact]
        pols = {t: TabularPolicy({f"{t}:d{d}": rng.dirichlet(np.ones(3)) * (1 - 3 * rho) + rho
                                  for d in range(4)}, 3, rho) for t in ("dec", "sol")}
        bound = math.log(1 / rho) * math.sqrt(2 * postkl(approx, exact))
        for t in ("dec", "sol"):
            gap = abs(latent_risk(pols, obs, exact, t) - latent_risk(pols, obs, approx, t))
            assert gap <= bound + 1e-12


def test_moment_estimator_examples():
    stats = {"C": [[1, 2, 4, 8]], "T": [[0, 1, 2, 4]], "S": [[0, 8, 8, 8]]}
    est = estimate_structure(stats)
    assert est.b_eff_hat == 2.0 and est.alpha_hat == 0.5
    assert est.b_eff_reg == pytest.approx(2.0) and est.alpha_reg == pytest.approx(0.5)
    agg = estimate_structure({"S": [[0, 8, 8, 8]]}, aggregated_only=True)
    assert agg.product_hat == pytest.approx(1.0)
    assert not agg.identifiable and math.isnan(agg.b_eff_hat) and math.isnan(agg.alpha_hat)
    assert any("unrecoverable" in msg for msg in agg.diagnostics)
    assert est.product_gap == pytest.approx(0.0)


def test_zero_denominators_are_skipped():
    est = estimate_structure({"C": [[1, 2, 4]], "T": [[0, 0, 4]], "S": [[0, 0, 4]]})
    assert any("skipped" in msg for msg in est.diagnostics)
    assert est.b_eff_hat == 2.0


def test_structure_estimator_on_sampled_dags():
    params = GenParams(D=3, b_eff=2, r=2, K0=16.0, alpha=0.5, term_profile=[0, 0.3, 0.3, 1])
    rng = np.random.default_rng(10)
    errors = []
    for n in (100, 400, 1600):
        stats = [suff_stats(sample_dag(params, rng)) for _ in range(n)]
        fit = StructureEstimator().fit(stats)
        assert fit.b_eff_ == 2.0
        errors.append(abs(fit.alpha_ - 0.5))
        assert fit.transform(stats).shape == (4, 8)
    assert errors[-1] < 0.05
