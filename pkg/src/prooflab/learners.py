"""Flat ERM, posterior-weighted ERM with EM, and moment estimators.

The latent model used for the ELBO and EM machinery treats the terminal
flags of interior DAG nodes as hidden.  An observation reveals the unique
node count and the total solver effort per depth, plus one action label per
node; whether a node was decomposed or solved is not logged.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln, logsumexp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dag import GenParams, SuffStats, constant_profile, margin_profile, sample_dag, suff_stats
from .errors import ContractError, NullEventError, ResourceError
from .policy import TabularPolicy, floor_project

DEFAULT_SUPPORT_CAP = 2 ** 16


# ---------------------------------------------------------------------------
# decision datasets and flat ERM

@dataclass
class DecisionDataset:
    keys: list = field(default_factory=list)
    choices: list = field(default_factory=list)
    dtypes: list = field(default_factory=list)
    trace_ids: list = field(default_factory=list)
    weights: list = field(default_factory=list)

    def add(self, key, choice, dtype="flat", trace_id=0, weight=1.0):
        self.keys.append(key)
        self.choices.append(int(choice))
        self.dtypes.append(dtype)
        self.trace_ids.append(trace_id)
        self.weights.append(float(weight))

    def __len__(self):
        return len(self.keys)

    @classmethod
    def from_traces(cls, traces) -> "DecisionDataset":
        data = cls()
        for i, tr in enumerate(traces):
            for rec in tr.records:
                data.add(rec.cand_id, rec.choice, rec.dtype, i)
        return data

    def extend(self, other: "DecisionDataset", weight: float = 1.0):
        for k, c, d, t, w in zip(other.keys, other.choices, other.dtypes,
                                 other.trace_ids, other.weights):
            self.add(k, c, d, t, w * weight)

    def counts(self, M: int, types=None) -> dict:
        out: dict = {}
        for k, c, d, w in zip(self.keys, self.choices, self.dtypes, self.weights):
            if types is not None and d not in types:
                continue
            if k not in out:
                out[k] = np.zeros(M)
            out[k][c] += w
        return out

    def state_weights(self, types=None) -> dict:
        """Empirical time-mixture over decision classes."""
        out: dict = {}
        for k, d, w in zip(self.keys, self.dtypes, self.weights):
            if types is None or d in types:
                out[k] = out.get(k, 0.0) + w
        total = sum(out.values())
        return {k: v / total for k, v in out.items()} if total > 0 else out


def _as_types(types):
    if types is None:
        return None
    return {types} if isinstance(types, str) else set(types)


def erm_fit(data: DecisionDataset, types=None, rho: float = 0.05, M: Optional[int] = None,
            keying: str = "shared") -> TabularPolicy:
    """Floor-constrained log-loss minimizer per decision class."""
    if M is None:
        M = max(data.choices) + 1 if data.choices else 2
    counts = data.counts(M, _as_types(types))
    table = {k: floor_project(n, rho) for k, n in counts.items()}
    return TabularPolicy(table, M, rho, keying, np.full(M, 1.0 / M))


class ERMPolicy(BaseEstimator):
    """Estimator wrapper around ``erm_fit``.

    ``X`` is a sequence of decision-class keys and ``y`` the chosen candidate
    indices.
    """

    def __init__(self, rho: float = 0.05, M: Optional[int] = None, keying: str = "shared"):
        self.rho = rho
        self.M = M
        self.keying = keying

    def fit(self, X, y, sample_weight=None):
        X = list(X)
        y = np.asarray(y, dtype=int)
        if len(X) != len(y):
            raise ValueError("X and y have different lengths")
        if len(y) and y.min() < 0:
            raise ValueError("choices must be nonnegative")
        w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, float)
        M = self.M if self.M is not None else (int(y.max()) + 1 if len(y) else 2)
        data = DecisionDataset()
        for k, c, wi in zip(X, y, w):
            data.add(k, c, weight=wi)
        self.policy_ = erm_fit(data, None, self.rho, M, self.keying)
        self.classes_ = np.arange(M)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "policy_")
        return np.array([self.policy_.probs(k) for k in X])

    def predict(self, X):
        # argmax returns the lowest index among ties
        return self.predict_proba(X).argmax(axis=1)

    def score(self, X, y):
        """Mean log-likelihood of the observed choices."""
        p = self.predict_proba(X)
        return float(np.mean(np.log(p[np.arange(len(p)), np.asarray(y)])))


# ---------------------------------------------------------------------------
# risks and KL

def kl(p, q) -> float:
    """KL(p || q) for categorical vectors, with 0 log 0 = 0."""
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    m = p > 0
    if np.any(q[m] <= 0):
        return math.inf
    return float(np.sum(p[m] * (np.log(p[m]) - np.log(q[m]))))


def _mixture(mixture) -> dict:
    if isinstance(mixture, DecisionDataset):
        return mixture.state_weights()
    total = sum(mixture.values())
    return {k: v / total for k, v in mixture.items()}


def risk(policy, q, mixture) -> float:
    """Expected log-loss E_{s~nu} E_{a~q(.|s)} [-log policy(a|s)]."""
    nu = _mixture(mixture)
    total = 0.0
    for k, w in nu.items():
        qs = q.probs(k)
        ps = policy.probs(k)
        m = qs > 0
        total += w * float(np.sum(qs[m] * -np.log(ps[m])))
    return total


def mixture_kl(policy, q, mixture) -> float:
    """E_{s~nu} KL(q(.|s) || policy(.|s))."""
    nu = _mixture(mixture)
    return float(sum(w * kl(q.probs(k), policy.probs(k)) for k, w in nu.items()))


def coarsen(q, groups: dict, rho: float = 0.0, mixture=None) -> TabularPolicy:
    """Best policy in the class that ties together the keys of each group.

    ``groups`` maps a key to its group label.  Within a group the KL-optimal
    shared vector is the mixture-weighted average of the member conditionals.
    """
    nu = _mixture(mixture) if mixture is not None else {k: 1.0 for k in groups}
    sums: dict = {}
    for k, g in groups.items():
        w = nu.get(k, 0.0)
        sums.setdefault(g, np.zeros(q.M))
        sums[g] = sums[g] + w * q.probs(k)
    shared = {g: floor_project(s, rho) for g, s in sums.items()}
    return TabularPolicy({k: shared[g] for k, g in groups.items()}, q.M, rho)


# ---------------------------------------------------------------------------
# latent model: hidden terminal flags

@dataclass(frozen=True)
class LatentObservation:
    C: tuple  # unique node count per depth
    S: tuple  # total solver steps per depth
    labels: tuple  # per depth, one action label per node (in uid order)

    @property
    def D(self) -> int:
        return len(self.C) - 1


@dataclass
class LatentModel:
    """Generative parameters of the hidden-flag model.

    ``q_dec[d]`` and ``q_sol[d]`` are the action conditionals for decomposition
    and solver decisions at depth d.
    """

    D: int
    tau: float
    alpha: float
    K0: float
    q_dec: np.ndarray
    q_sol: np.ndarray
    b_eff: float = 2.0

    def copy(self, **changes) -> "LatentModel":
        vals = dict(D=self.D, tau=self.tau, alpha=self.alpha, K0=self.K0,
                    q_dec=self.q_dec.copy(), q_sol=self.q_sol.copy(), b_eff=self.b_eff)
        vals.update(changes)
        return LatentModel(**vals)


@dataclass
class PosteriorFamily:
    support: list
    weights: np.ndarray
    log_evidence: float = math.nan

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.support) != len(self.weights):
            raise ContractError("support and weights differ in length")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1) > 1e-9:
            raise ContractError("posterior weights must be a probability vector")


def depth_conditionals(D: int, M: int, rho: float, gap: float, rng) -> tuple:
    """Random per-depth decomposition and solver conditionals with a fixed gap."""
    prof = margin_profile(M, gap, rho)
    q_dec = np.empty((D + 1, M))
    q_sol = np.empty((D + 1, M))
    for arr in (q_dec, q_sol):
        for d in range(D + 1):
            arr[d, rng.permutation(M)] = prof
    return q_dec, q_sol


def sample_latent_instance(model: LatentModel, rng, M: Optional[int] = None):
    """Draw (dag, observation, true flags) from the hidden-flag model."""
    M = model.q_dec.shape[1] if M is None else M
    params = GenParams(D=model.D, b_eff=int(round(model.b_eff)), r=1, alpha=model.alpha,
                       K0=model.K0, term_profile=constant_profile(model.D, model.tau), M=M)
    z = sample_dag(params, rng)
    stats = suff_stats(z, model.D)
    labels = []
    flags = []
    for d in range(model.D + 1):
        row = []
        for uid in z.layer(d):
            node = z.nodes[uid]
            q = model.q_sol[d] if node.terminal else model.q_dec[d]
            row.append(int(rng.choice(M, p=q)))
            if 0 < d < model.D:
                flags.append(int(node.terminal))
        labels.append(tuple(row))
    y = LatentObservation(tuple(int(c) for c in stats.C), tuple(int(s) for s in stats.S),
                          tuple(labels))
    return z, y, tuple(flags)


def _free_layout(y: LatentObservation):
    return [(d, y.C[d]) for d in range(1, y.D)]


def latent_support(y: LatentObservation, cap: int = DEFAULT_SUPPORT_CAP) -> list:
    """Flag vectors over interior nodes that are consistent with ``y``.

    A vector is kept when every interior layer keeps a decomposition node
    (so the next layer has parents) and the per-depth terminal counts agree
    with the observed solver effort.
    """
    layout = _free_layout(y)
    n_free = sum(c for _, c in layout)
    if 2 ** n_free > cap:
        raise ResourceError(f"latent support 2^{n_free} exceeds cap {cap}")
    per_layer = []
    for d, c in layout:
        opts = []
        for bits in itertools.product((0, 1), repeat=c):
            t = sum(bits)
            if t == c and d < y.D:
                continue
            if t > y.S[d] or (t == 0) != (y.S[d] == 0):
                continue
            opts.append(bits)
        per_layer.append(opts)
    if y.S[0] != 0 or y.S[y.D] < y.C[y.D]:
        return []
    return [tuple(itertools.chain.from_iterable(combo)) for combo in itertools.product(*per_layer)]


def _log_len_lik(S: int, T: int, mean: float) -> float:
    if T == 0:
        return 0.0 if S == 0 else -math.inf
    if S < T:
        return -math.inf
    if mean <= 1.0:
        return 0.0 if S == T else -math.inf
    p = 1.0 / mean
    log_binom = gammaln(S) - gammaln(T) - gammaln(S - T + 1)
    return float(log_binom + T * math.log(p) + (S - T) * math.log1p(-p))


def _terminal_counts(y: LatentObservation, z: tuple) -> list:
    T = [0] * (y.D + 1)
    T[y.D] = y.C[y.D]
    i = 0
    for d, c in _free_layout(y):
        T[d] = sum(z[i:i + c])
        i += c
    return T


def _log_success_prob(tau: float, y: LatentObservation) -> float:
    out = 0.0
    for d, c in _free_layout(y):
        out += math.log1p(-tau ** c) if tau < 1 else -math.inf
    return out


def log_joint(model: LatentModel, y: LatentObservation, z: tuple) -> float:
    """log p+(y, z): prior times likelihood, divided by P(success)."""
    T = _terminal_counts(y, z)
    n_term = sum(z)
    n_free = len(z)
    out = 0.0
    if n_term:
        out += n_term * math.log(model.tau)
    if n_free - n_term:
        out += (n_free - n_term) * math.log1p(-model.tau)
    out -= _log_success_prob(model.tau, y)
    for d in range(y.D + 1):
        out += _log_len_lik(y.S[d], T[d], model.K0 * model.alpha ** d)
    out += _label_loglik(model, y, z)
    return out


def _label_loglik(model: LatentModel, y: LatentObservation, z: tuple) -> float:
    out = 0.0
    i = 0
    for d in range(y.D + 1):
        for a in y.labels[d]:
            if d == 0:
                term = False
            elif d == y.D:
                term = True
            else:
                term = bool(z[i])
                i += 1
            out += math.log((model.q_sol if term else model.q_dec)[d][a])
    return out


def exact_posterior(model: LatentModel, y: LatentObservation, support=None,
                    cap: int = DEFAULT_SUPPORT_CAP) -> PosteriorFamily:
    """Success-filtered posterior over the hidden flags by enumeration."""
    support = latent_support(y, cap) if support is None else list(support)
    if not support:
        raise NullEventError("no latent completion is consistent with the observation")
    logp = np.array([log_joint(model, y, z) for z in support])
    if not np.isfinite(logp).any():
        raise NullEventError("all completions have zero probability")
    lz = float(logsumexp(logp))
    return PosteriorFamily(support, np.exp(logp - lz), lz)


def log_evidence(model: LatentModel, y: LatentObservation) -> float:
    return exact_posterior(model, y).log_evidence


def elbo(model: LatentModel, posterior: PosteriorFamily, y: LatentObservation) -> float:
    """E_r[log p+(y, z) - log r(z)]."""
    total = 0.0
    for z, w in zip(posterior.support, posterior.weights):
        if w == 0:
            continue
        lj = log_joint(model, y, z)
        if not np.isfinite(lj):
            raise ContractError("posterior puts mass outside the success support")
        total += w * (lj - math.log(w))
    return total


def posterior_kl(r: PosteriorFamily, p: PosteriorFamily) -> float:
    """KL(r || p) for two families over (possibly differently ordered) supports."""
    pw = dict(zip(p.support, p.weights))
    out = 0.0
    for z, w in zip(r.support, r.weights):
        if w == 0:
            continue
        q = pw.get(z, 0.0)
        if q == 0:
            return math.inf
        out += w * (math.log(w) - math.log(q))
    return out


def postkl(approx: Sequence[PosteriorFamily], exact: Sequence[PosteriorFamily]) -> float:
    """Average posterior KL over a dataset."""
    return float(np.mean([posterior_kl(r, p) for r, p in zip(approx, exact)]))


def latent_decisions(y: LatentObservation, z: tuple, trace_id: int = 0) -> DecisionDataset:
    """Decision records revealed by a completion; classes are per depth."""
    data = DecisionDataset()
    i = 0
    for d in range(y.D + 1):
        for a in y.labels[d]:
            if d == 0:
                term = False
            elif d == y.D:
                term = True
            else:
                term = bool(z[i])
                i += 1
            kind = "sol" if term else "dec"
            data.add(f"{kind}:d{d}", a, kind, trace_id)
    return data


def posterior_weighted_erm(instances, M: int, rho: float = 0.05) -> tuple:
    """Fit (policy_dec, policy_sol) on posterior-weighted decision counts.

    ``instances`` is a sequence of (weights, datasets) pairs where
    ``datasets[j]`` holds the decisions revealed by the j-th completion.
    """
    pooled = DecisionDataset()
    for weights, datasets in instances:
        w = np.asarray(weights, float)
        if abs(w.sum() - 1) > 1e-9:
            raise ContractError("posterior weights must sum to 1")
        for wj, ds in zip(w, datasets):
            if wj > 0:
                pooled.extend(ds, wj)
    return erm_fit(pooled, "dec", rho, M), erm_fit(pooled, "sol", rho, M)


def _terminal_marginals(y: LatentObservation, post: PosteriorFamily) -> np.ndarray:
    Z = np.array(post.support, dtype=float).reshape(len(post.support), -1)
    return post.weights @ Z if Z.shape[1] else np.zeros(0)


def weighted_label_counts(observations, posteriors, M: int) -> tuple:
    """Posterior-expected label counts per (type, depth), shape (D+1, M) each."""
    D = observations[0].D
    dec = np.zeros((D + 1, M))
    sol = np.zeros((D + 1, M))
    for y, post in zip(observations, posteriors):
        marg = _terminal_marginals(y, post)
        i = 0
        for d in range(D + 1):
            for a in y.labels[d]:
                if d == 0:
                    pt = 0.0
                elif d == D:
                    pt = 1.0
                else:
                    pt = marg[i]
                    i += 1
                sol[d, a] += pt
                dec[d, a] += 1.0 - pt
    return dec, sol


def _expected_q(theta, observations, posteriors) -> float:
    """Expected complete-data log-likelihood in (tau, alpha), labels excluded."""
    tau, alpha, K0 = theta
    total = 0.0
    for y, post in zip(observations, posteriors):
        lsp = _log_success_prob(tau, y)
        for z, w in zip(post.support, post.weights):
            if w == 0:
                continue
            T = _terminal_counts(y, z)
            nt = sum(z)
            val = -lsp
            if nt:
                val += nt * math.log(tau)
            if len(z) - nt:
                val += (len(z) - nt) * math.log1p(-tau)
            for d in range(y.D + 1):
                val += _log_len_lik(y.S[d], T[d], K0 * alpha ** d)
            total += w * val
    return total


def _alpha_bounds(K0: float, D: int):
    lo = max(K0 ** (-1.0 / D) * (1 + 1e-9), 1e-3) if K0 > 1 else 1e-3
    return lo, 1 - 1e-6


def em_step(model: LatentModel, observations, rho: float = 0.05):
    """One exact E-step followed by the structural M-step and the policy step.

    Returns (new_model, posteriors, elbo_before, elbo_after) where the ELBO
    values are summed over the observations under the E-step posteriors.
    """
    posteriors = [exact_posterior(model, y) for y in observations]
    before = float(sum(p.log_evidence for p in posteriors))

    def neg(x):
        return -_expected_q((x[0], x[1], model.K0), observations, posteriors)

    lo, hi = _alpha_bounds(model.K0, model.D)
    x0 = np.array([model.tau, min(max(model.alpha, lo), hi)])
    res = minimize(neg, x0, method="L-BFGS-B", bounds=[(1e-6, 1 - 1e-6), (lo, hi)])
    tau, alpha = (res.x if res.fun <= neg(x0) else x0)
    C = np.array([y.C for y in observations], float).mean(axis=0)
    b_eff = float(np.mean(C[1:] / C[:-1]))
    M = model.q_dec.shape[1]
    dec, sol = weighted_label_counts(observations, posteriors, M)
    q_dec = np.array([floor_project(row, rho) for row in dec])
    q_sol = np.array([floor_project(row, rho) for row in sol])
    new = model.copy(tau=float(tau), alpha=float(alpha), q_dec=q_dec, q_sol=q_sol, b_eff=b_eff)
    after = float(sum(elbo(new, p, y) for p, y in zip(posteriors, observations)))
    return new, posteriors, before, after


class LatentEM(BaseEstimator):
    """EM over the hidden-flag model with exact E-steps."""

    def __init__(self, K0: float = 8.0, rho: float = 0.05, n_iter: int = 5,
                 tau_init: float = 0.5, alpha_init: float = 0.8):
        self.K0 = K0
        self.rho = rho
        self.n_iter = n_iter
        self.tau_init = tau_init
        self.alpha_init = alpha_init

    def fit(self, observations, M: Optional[int] = None):
        observations = list(observations)
        if not observations:
            raise ValueError("need at least one observation")
        D = observations[0].D
        M = M if M is not None else 1 + max(max(max(r) for r in y.labels if r) for y in observations)
        uni = np.full((D + 1, M), 1.0 / M)
        model = LatentModel(D, self.tau_init, self.alpha_init, self.K0, uni, uni.copy())
        self.elbo_history_ = []
        self.alpha_path_ = [model.alpha]
        for _ in range(self.n_iter):
            model, posts, before, after = em_step(model, observations, self.rho)
            self.elbo_history_.append((before, after))
            self.alpha_path_.append(model.alpha)
        self.model_ = model
        self.posteriors_ = [exact_posterior(model, y) for y in observations]
        self.log_likelihood_ = float(sum(p.log_evidence for p in self.posteriors_))
        return self

    @property
    def alpha_(self):
        check_is_fitted(self, "model_")
        return self.model_.alpha


def latent_risk(policy_by_type: dict, observations, posteriors, dtype: str) -> float:
    """Average over instances of E_r[mean log-loss over decisions of ``dtype``]."""
    total = 0.0
    for y, post in zip(observations, posteriors):
        inst = 0.0
        for z, w in zip(post.support, post.weights):
            if w == 0:
                continue
            data = latent_decisions(y, z)
            losses = [-math.log(policy_by_type[dt].probs(k)[c])
                      for k, c, dt in zip(data.keys, data.choices, data.dtypes) if dt == dtype]
            inst += w * (float(np.mean(losses)) if losses else 0.0)
        total += inst
    return total / len(observations)


# ---------------------------------------------------------------------------
# moment estimators

@dataclass
class MomentEstimates:
    b_eff_hat: float
    alpha_hat: float
    product_hat: float
    b_eff_reg: float
    alpha_reg: float
    product_reg: float
    identifiable: bool
    mean_C: np.ndarray
    mean_T: np.ndarray
    mean_S: np.ndarray
    mean_Lbar: np.ndarray
    b_ratios: list
    alpha_ratios: list
    product_ratios: list
    diagnostics: list

    @property
    def product_gap(self) -> float:
        """|product_hat - b_eff_hat * alpha_hat| (nan when not identifiable)."""
        return abs(self.product_hat - self.b_eff_hat * self.alpha_hat)

    def rows(self) -> list:
        """Per-depth report rows: depth, C, T, S, Lbar and the local ratios."""
        out = []
        for d in range(len(self.mean_S)):
            out.append((d, _f(self.mean_C, d), _f(self.mean_T, d), float(self.mean_S[d]),
                        _f(self.mean_Lbar, d), _r(self.b_ratios, d),
                        _r(self.alpha_ratios, d), _r(self.product_ratios, d)))
        return out


def _f(arr, d):
    return float(arr[d]) if arr is not None else math.nan


def _r(ratios, d):
    for dd, v in ratios:
        if dd == d:
            return v
    return math.nan


def _ratios(values, name, diagnostics):
    out = []
    for d in range(len(values) - 1):
        if values[d] == 0 or not np.isfinite(values[d]) or not np.isfinite(values[d + 1]) \
                or values[d + 1] == 0:
            diagnostics.append(f"{name}: skipped depth {d} (zero or undefined moment)")
            continue
        out.append((d, float(values[d + 1] / values[d])))
    return out


def _pool(ratios):
    if not ratios:
        return math.nan
    return float(np.exp(np.mean(np.log([v for _, v in ratios]))))


def _log_slope(values):
    d = np.array([i for i, v in enumerate(values) if v > 0 and np.isfinite(v)], float)
    if len(d) < 2:
        return math.nan
    logs = np.log([values[int(i)] for i in d])
    return float(np.exp(np.polyfit(d, logs, 1)[0]))


def _stack(stats):
    if isinstance(stats, SuffStats):
        stats = [stats]
    if isinstance(stats, dict):
        return {k: (None if v is None else np.atleast_2d(np.asarray(v, float))) for k, v in stats.items()}
    C = np.array([s.C for s in stats], float)
    T = np.array([s.T for s in stats], float)
    S = np.array([s.S for s in stats], float)
    return {"C": C, "T": T, "S": S}


def estimate_structure(stats, aggregated_only: bool = False, min_depth: int = 0,
                       max_depth: Optional[int] = None) -> MomentEstimates:
    """Ratio and log-regression estimates of (b_eff, alpha) and their product.

    ``stats`` is a list of SuffStats, or a dict of (n, D+1) arrays with keys
    C, T, S (posterior-expected statistics work the same way).  With
    ``aggregated_only`` only S is used and the individual parameters are
    reported as unrecoverable.  ``min_depth`` drops shallow depths from the
    ratio estimates and ``max_depth`` caps the deeper end of each ratio.  The
    all-terminal last layer has a different terminal fraction, so the
    aggregated product ratio into it is biased unless ``max_depth`` excludes it.
    """
    arr = _stack(stats)
    hi = arr["S"].shape[1] - 1 if max_depth is None else max_depth

    def keep(ratios):
        return [(d, v) for d, v in ratios if min_depth <= d and d + 1 <= hi]

    S = arr["S"]
    C = None if aggregated_only else arr.get("C")
    T = None if aggregated_only else arr.get("T")
    diagnostics: list = []
    mean_S = S.mean(axis=0)
    mean_C = mean_T = mean_L = None
    b_ratios, a_ratios = [], []
    if C is not None and T is not None:
        mean_C = C.mean(axis=0)
        mean_T = T.mean(axis=0)
        mean_L = np.zeros(S.shape[1])
        for d in range(S.shape[1]):
            pos = T[:, d] > 0
            if pos.any():
                mean_L[d] = float(np.mean(S[pos, d] / T[pos, d]))
        b_ratios = keep(_ratios(mean_C, "b_eff", diagnostics))
        a_ratios = keep(_ratios(mean_L, "alpha", diagnostics))
    else:
        diagnostics.append("only aggregated solver effort observed: b_eff and alpha "
                           "are individually unrecoverable")
    p_ratios = keep(_ratios(mean_S, "product", diagnostics))
    identifiable = C is not None and T is not None
    b_hat = _pool(b_ratios) if identifiable else math.nan
    a_hat = _pool(a_ratios) if identifiable else math.nan
    return MomentEstimates(
        b_eff_hat=b_hat, alpha_hat=a_hat, product_hat=_pool(p_ratios),
        b_eff_reg=_log_slope(mean_C[min_depth:hi + 1]) if identifiable else math.nan,
        alpha_reg=_log_slope(mean_L[min_depth:hi + 1]) if identifiable else math.nan,
        product_reg=_log_slope(mean_S[min_depth:hi + 1]),
        identifiable=identifiable, mean_C=mean_C, mean_T=mean_T, mean_S=mean_S,
        mean_Lbar=mean_L, b_ratios=b_ratios, alpha_ratios=a_ratios, product_ratios=p_ratios,
        diagnostics=diagnostics)


class StructureEstimator(BaseEstimator):
    """Estimator wrapper around ``estimate_structure``."""

    def __init__(self, aggregated_only: bool = False, min_depth: int = 0,
                 max_depth: Optional[int] = None):
        self.aggregated_only = aggregated_only
        self.min_depth = min_depth
        self.max_depth = max_depth

    def fit(self, stats, y=None):
        self.estimates_ = estimate_structure(stats, self.aggregated_only, self.min_depth,
                                             self.max_depth)
        self.b_eff_ = self.estimates_.b_eff_hat
        self.alpha_ = self.estimates_.alpha_hat
        self.product_ = self.estimates_.product_hat
        return self

    def transform(self, stats):
        """Per-depth moment rows of new statistics."""
        check_is_fitted(self, "estimates_")
        return np.array(estimate_structure(stats, self.aggregated_only).rows())


def expected_suff_stats(observations, posteriors) -> dict:
    """Posterior-expected (C, T, S) arrays for the hidden-flag model."""
    D = observations[0].D
    C, T, S = [], [], []
    for y, post in zip(observations, posteriors):
        t = np.zeros(D + 1)
        for z, w in zip(post.support, post.weights):
            t += w * np.array(_terminal_counts(y, z), float)
        C.append(y.C)
        T.append(t)
        S.append(y.S)
    return {"C": np.array(C, float), "T": np.array(T), "S": np.array(S, float)}
