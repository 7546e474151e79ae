"""Hidden Markov models with Gaussian or categorical emissions.

Scoring runs the forward recursion in log space.  Fitting is Baum-Welch with
scaled forward-backward passes compiled by numba; the scaling constants are
folded back into an exact log-likelihood.

Parameters are held in linear space and the log tables are derived from them,
so a JSON round trip reproduces scoring bit for bit.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numba import njit

FORMAT_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)
_STOCHASTIC_TOL = 1e-9

GAUSSIAN = "gaussian"
CATEGORICAL = "categorical"


def logsumexp(a, axis=None):
    """log(sum(exp(a))) that returns -inf, not nan, for all -inf slices."""
    a = np.asarray(a, dtype=np.float64)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def _log(p):
    with np.errstate(divide="ignore"):
        return np.log(p)


def _readonly(a, dtype=np.float64):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def _check_stochastic(p, what):
    if np.any(~np.isfinite(p)) or np.any(p < 0):
        raise ValueError(f"{what} has negative or non-finite entries")
    sums = p.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > _STOCHASTIC_TOL):
        raise ValueError(f"{what} rows do not sum to 1 (got {sums})")


@dataclass(frozen=True, eq=False)
class GaussianEmission:
    means: np.ndarray
    variances: np.ndarray

    kind = GAUSSIAN

    def __post_init__(self):
        object.__setattr__(self, "means", _readonly(self.means))
        object.__setattr__(self, "variances", _readonly(self.variances))
        if self.means.ndim != 1 or self.means.shape != self.variances.shape:
            raise ValueError("means and variances must be equal-length vectors")
        if not np.all(np.isfinite(self.means)):
            raise ValueError("means must be finite")
        if not np.all(self.variances > 0) or not np.all(np.isfinite(self.variances)):
            raise ValueError("variances must be positive and finite")

    @property
    def n_states(self) -> int:
        return len(self.means)

    def check(self, seq: np.ndarray) -> np.ndarray:
        seq = np.asarray(seq, dtype=np.float64)
        if not np.all(np.isfinite(seq)):
            raise ValueError("Gaussian observations must be finite")
        return seq

    def log_density(self, seq: np.ndarray) -> np.ndarray:
        """Per-state log densities, shape ``seq.shape + (K,)``."""
        x = np.asarray(seq, dtype=np.float64)[..., None]
        return -0.5 * (LOG_2PI + np.log(self.variances)
                       + (x - self.means) ** 2 / self.variances)

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "variances": self.variances.tolist()}


@dataclass(frozen=True, eq=False)
class CategoricalEmission:
    probabilities: np.ndarray

    kind = CATEGORICAL

    def __post_init__(self):
        p = _readonly(self.probabilities)
        if p.ndim != 2 or p.shape[1] < 2:
            raise ValueError("categorical emissions need a K x M matrix with M >= 2")
        _check_stochastic(p, "emission matrix")
        object.__setattr__(self, "probabilities", p)
        object.__setattr__(self, "log_emission", _readonly(_log(p)))

    @property
    def n_states(self) -> int:
        return self.probabilities.shape[0]

    @property
    def n_symbols(self) -> int:
        return self.probabilities.shape[1]

    def check(self, seq: np.ndarray) -> np.ndarray:
        seq = np.asarray(seq)
        if seq.size and (not np.issubdtype(seq.dtype, np.integer)):
            as_int = seq.astype(np.int64)
            if not np.array_equal(as_int, seq):
                raise ValueError("categorical observations must be integer symbols")
            seq = as_int
        seq = seq.astype(np.int64)
        if seq.size and (seq.min() < 0 or seq.max() >= self.n_symbols):
            raise ValueError(
                f"symbol index outside [0, {self.n_symbols}) in observation sequence")
        return seq

    def log_density(self, seq: np.ndarray) -> np.ndarray:
        return np.moveaxis(self.log_emission[:, np.asarray(seq, dtype=np.int64)], 0, -1)

    def to_dict(self) -> dict:
        return {"probabilities": self.probabilities.tolist()}


@dataclass(frozen=True, eq=False)
class HiddenMarkovModel:
    """K-state HMM.  Immutable once built; share freely between threads."""

    initial: np.ndarray
    transition: np.ndarray
    emissions: GaussianEmission | CategoricalEmission
    signal_transform: str = "log1p"
    # inner quantile edges mapping transformed values to symbols
    bin_edges: Optional[np.ndarray] = None

    def __post_init__(self):
        pi = _readonly(self.initial)
        A = _readonly(self.transition)
        K = len(pi)
        if K < 1 or pi.ndim != 1:
            raise ValueError("initial must be a non-empty vector")
        if A.shape != (K, K):
            raise ValueError(f"transition must be {K}x{K}")
        if self.emissions.n_states != K:
            raise ValueError("emission parameters disagree with n_states")
        _check_stochastic(pi, "initial distribution")
        _check_stochastic(A, "transition matrix")
        object.__setattr__(self, "initial", pi)
        object.__setattr__(self, "transition", A)
        object.__setattr__(self, "log_initial", _readonly(_log(pi)))
        object.__setattr__(self, "log_transition", _readonly(_log(A)))
        if self.bin_edges is not None:
            edges = _readonly(self.bin_edges)
            if self.emissions.kind != CATEGORICAL:
                raise ValueError("bin_edges only apply to categorical emissions")
            if len(edges) != self.emissions.n_symbols - 1 or np.any(np.diff(edges) <= 0):
                raise ValueError("bin_edges must be M-1 strictly increasing values")
            object.__setattr__(self, "bin_edges", edges)

    @property
    def n_states(self) -> int:
        return len(self.initial)

    @property
    def kind(self) -> str:
        return self.emissions.kind

    def encode(self, values) -> np.ndarray:
        """Map transformed signal values to this model's observation alphabet."""
        values = np.asarray(values, dtype=np.float64)
        if self.kind == GAUSSIAN:
            return values
        if self.bin_edges is None:
            raise ValueError("categorical model has no bin edges to encode with")
        return digitize(values, self.bin_edges)


def digitize(values, edges) -> np.ndarray:
    """Symbol of each value: number of inner edges strictly below it."""
    return np.searchsorted(edges, np.asarray(values, dtype=np.float64), side="left")


def quantile_bin_edges(values, n_bins: int = 30) -> np.ndarray:
    """Inner edges of up to ``n_bins`` quantile bins, duplicates collapsed.

    Always yields at least one edge (two symbols) for a non-empty input.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot fit bin edges on an empty corpus")
    qs = np.linspace(0.0, 1.0, n_bins + 1)[1:-1]
    edges = np.unique(np.quantile(values, qs, method="inverted_cdf"))
    edges = edges[edges < values.max()]
    if edges.size == 0:
        edges = np.array([values.max()])
    return edges


# --------------------------------------------------------------------------
# scoring

def log_likelihood(model: HiddenMarkovModel, seq) -> float:
    """log p(seq | model) by the forward recursion in log space."""
    seq = model.emissions.check(seq)
    if seq.ndim != 1:
        raise ValueError("observation sequence must be one-dimensional")
    if seq.size == 0:
        raise ValueError("empty sequence")
    log_b = model.emissions.log_density(seq)
    alpha = model.log_initial + log_b[0]
    for t in range(1, len(seq)):
        alpha = logsumexp(alpha[:, None] + model.log_transition, axis=0) + log_b[t]
    return logsumexp(alpha)


def log_likelihood_batch(model: HiddenMarkovModel, values, lengths) -> np.ndarray:
    """Score many short left-aligned sequences at once.

    ``values`` is ``(N, W)``; row ``i`` holds a sequence in its first
    ``lengths[i]`` cells (padding must still be valid observations).
    Rows of length 0 score ``nan``.
    """
    values = model.emissions.check(values)
    lengths = np.asarray(lengths, dtype=np.int64)
    if values.ndim != 2 or lengths.shape != (values.shape[0],):
        raise ValueError("values must be (N, W) with one length per row")
    if np.any(lengths > values.shape[1]) or np.any(lengths < 0):
        raise ValueError("lengths out of range")
    out = np.full(values.shape[0], np.nan)
    if values.shape[0] == 0 or values.shape[1] == 0:
        return out
    log_b = model.emissions.log_density(values)
    alpha = model.log_initial + log_b[:, 0]
    for t in range(1, values.shape[1]):
        step = logsumexp(alpha[:, :, None] + model.log_transition, axis=1) + log_b[:, t]
        alpha = np.where((lengths > t)[:, None], step, alpha)
    scored = lengths > 0
    out[scored] = logsumexp(alpha[scored], axis=1)
    return out


def sample(model: HiddenMarkovModel, length: int, seed: int) -> np.ndarray:
    """Draw one observation sequence of the given length."""
    if length < 0:
        raise ValueError("length must be >= 0")
    rng = np.random.default_rng(seed)
    u_state = rng.random(length)
    u_emit = rng.random(length) if model.kind == CATEGORICAL else rng.standard_normal(length)
    cum_pi = np.cumsum(model.initial)
    cum_A = np.cumsum(model.transition, axis=1)
    states = np.empty(length, dtype=np.int64)
    for t in range(length):
        cdf = cum_pi if t == 0 else cum_A[states[t - 1]]
        states[t] = min(np.searchsorted(cdf, u_state[t] * cdf[-1], side="right"),
                        model.n_states - 1)
    if model.kind == GAUSSIAN:
        em = model.emissions
        return em.means[states] + np.sqrt(em.variances[states]) * u_emit
    cum_B = np.cumsum(model.emissions.probabilities, axis=1)
    out = np.empty(length, dtype=np.int64)
    for t in range(length):
        cdf = cum_B[states[t]]
        out[t] = min(np.searchsorted(cdf, u_emit[t] * cdf[-1], side="right"),
                     model.emissions.n_symbols - 1)
    return out


# --------------------------------------------------------------------------
# Baum-Welch

@dataclass(frozen=True)
class FitConfig:
    max_iterations: int = 100
    convergence_tol: float = 1e-6
    n_restarts: int = 5
    seed: int = 0
    variance_floor: float = 1e-6

    def __post_init__(self):
        if self.max_iterations < 1 or self.n_restarts < 1:
            raise ValueError("max_iterations and n_restarts must be >= 1")
        if self.convergence_tol <= 0 or self.variance_floor <= 0:
            raise ValueError("convergence_tol and variance_floor must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class RestartTrace:
    restart: int
    log_likelihoods: list  # corpus LL of the parameters entering each E-step
    converged: bool
    models: list = field(default_factory=list)  # filled when keep_path=True

    @property
    def n_iterations(self) -> int:
        return len(self.log_likelihoods) - 1

    @property
    def final_log_likelihood(self) -> float:
        return self.log_likelihoods[-1]


@dataclass
class FitResult:
    model: HiddenMarkovModel
    best_restart: int
    restarts: list

    @property
    def log_likelihood(self) -> float:
        return self.restarts[self.best_restart].final_log_likelihood

    @property
    def n_iterations(self) -> int:
        return self.restarts[self.best_restart].n_iterations


@njit(cache=True, nogil=True)
def _forward_backward(log_b, offsets, start, trans):
    """Scaled forward-backward over a packed corpus.

    Returns (gamma, summed xi, summed first-step gamma, corpus log-likelihood).
    """
    n_obs, K = log_b.shape
    gamma = np.zeros((n_obs, K))
    xi_sum = np.zeros((K, K))
    first = np.zeros(K)
    total = 0.0
    max_len = 0
    for s in range(len(offsets) - 1):
        if offsets[s + 1] - offsets[s] > max_len:
            max_len = offsets[s + 1] - offsets[s]
    em = np.empty((max_len, K))
    alpha = np.empty((max_len, K))
    beta = np.empty((max_len, K))
    scale = np.empty(max_len)

    for s in range(len(offsets) - 1):
        a = offsets[s]
        T = offsets[s + 1] - a
        for t in range(T):
            m = -np.inf
            for k in range(K):
                if log_b[a + t, k] > m:
                    m = log_b[a + t, k]
            if m == -np.inf:
                return gamma, xi_sum, first, -np.inf
            total += m
            for k in range(K):
                em[t, k] = np.exp(log_b[a + t, k] - m)

        c = 0.0
        for k in range(K):
            alpha[0, k] = start[k] * em[0, k]
            c += alpha[0, k]
        if c == 0.0:
            return gamma, xi_sum, first, -np.inf
        scale[0] = c
        for k in range(K):
            alpha[0, k] /= c
        for t in range(1, T):
            c = 0.0
            for j in range(K):
                acc = 0.0
                for i in range(K):
                    acc += alpha[t - 1, i] * trans[i, j]
                alpha[t, j] = acc * em[t, j]
                c += alpha[t, j]
            if c == 0.0:
                return gamma, xi_sum, first, -np.inf
            scale[t] = c
            for j in range(K):
                alpha[t, j] /= c
        for t in range(T):
            total += np.log(scale[t])

        for k in range(K):
            beta[T - 1, k] = 1.0
        for t in range(T - 2, -1, -1):
            for i in range(K):
                acc = 0.0
                for j in range(K):
                    acc += trans[i, j] * em[t + 1, j] * beta[t + 1, j]
                beta[t, i] = acc / scale[t + 1]

        for t in range(T):
            norm = 0.0
            for k in range(K):
                g = alpha[t, k] * beta[t, k]
                gamma[a + t, k] = g
                norm += g
            for k in range(K):
                gamma[a + t, k] /= norm
        for k in range(K):
            first[k] += gamma[a, k]
        for t in range(T - 1):
            for i in range(K):
                for j in range(K):
                    xi_sum[i, j] += (alpha[t, i] * trans[i, j] * em[t + 1, j]
                                     * beta[t + 1, j] / scale[t + 1])
    return gamma, xi_sum, first, total


def _pack(corpus, check):
    seqs = [check(np.asarray(s)) for s in corpus]
    if not seqs:
        raise ValueError("cannot fit an HMM on an empty corpus")
    for s in seqs:
        if s.ndim != 1 or s.size == 0:
            raise ValueError("every training sequence must be non-empty and 1-D")
    offsets = np.zeros(len(seqs) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(s) for s in seqs])
    return np.concatenate(seqs), offsets


def _normalize_rows(counts, fallback):
    sums = counts.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = counts / sums
    # rows with no posterior mass keep their previous value
    return np.where(sums > 0, out, fallback)


def _initial_guess(x, K, kind, n_symbols, rng, config):
    pi = 1.0 + 0.5 * rng.random(K)
    A = 1.0 + 0.5 * rng.random((K, K))
    pi, A = pi / pi.sum(), A / A.sum(axis=1, keepdims=True)
    if kind == GAUSSIAN:
        spread = float(np.std(x))
        qs = (np.arange(K) + 0.5) / K
        means = np.quantile(x, qs) + rng.normal(0.0, 0.1 * spread + 1e-12, K)
        var = max(float(np.var(x)), config.variance_floor)
        return pi, A, GaussianEmission(means, np.full(K, var))
    freq = np.bincount(x, minlength=n_symbols).astype(np.float64)
    freq = freq / freq.sum()
    B = freq[None, :] + rng.random((K, n_symbols)) / n_symbols
    return pi, A, CategoricalEmission(B / B.sum(axis=1, keepdims=True))


def _m_step(x, offsets, gamma, xi_sum, first, old, config):
    n_seq = len(offsets) - 1
    pi = first / n_seq
    A = _normalize_rows(xi_sum, old.transition)
    occupancy = gamma.sum(axis=0)
    em = old.emissions
    if em.kind == GAUSSIAN:
        live = occupancy > 0
        safe = np.where(live, occupancy, 1.0)
        means = np.where(live, gamma.T @ x / safe, em.means)
        sq = (gamma * (x[:, None] - means) ** 2).sum(axis=0)
        var = np.where(live, sq / safe, em.variances)
        var = np.maximum(var, config.variance_floor)
        emissions = GaussianEmission(means, var)
    else:
        M = em.n_symbols
        counts = np.zeros((M, gamma.shape[1]))
        np.add.at(counts, x, gamma)
        emissions = CategoricalEmission(_normalize_rows(counts.T, em.probabilities))
    # renormalise to absorb round-off before validation
    pi = pi / pi.sum()
    A = A / A.sum(axis=1, keepdims=True)
    return HiddenMarkovModel(pi, A, emissions, old.signal_transform, old.bin_edges)


def _run_restart(x, offsets, K, kind, n_symbols, config, restart, keep_path,
                 signal_transform, bin_edges):
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(restart,)))
    pi, A, emissions = _initial_guess(x, K, kind, n_symbols, rng, config)
    model = HiddenMarkovModel(pi, A, emissions, signal_transform, bin_edges)
    trace = RestartTrace(restart, [], False)
    for it in range(config.max_iterations + 1):
        log_b = np.ascontiguousarray(model.emissions.log_density(x))
        gamma, xi_sum, first, ll = _forward_backward(
            log_b, offsets, model.initial, model.transition)
        trace.log_likelihoods.append(float(ll))
        if keep_path:
            trace.models.append(model)
        if it > 0:
            prev = trace.log_likelihoods[-2]
            if ll - prev < config.convergence_tol * abs(prev):
                trace.converged = True
                break
        if it == config.max_iterations:
            break
        model = _m_step(x, offsets, gamma, xi_sum, first, model, config)
    return model, trace


def fit_baum_welch_detailed(corpus: Sequence, n_states: int, config: FitConfig,
                            kind: str = GAUSSIAN, n_symbols: Optional[int] = None,
                            bin_edges=None, signal_transform: str = "log1p",
                            keep_path: bool = False, n_jobs: int = 1) -> FitResult:
    """Baum-Welch EM with ``config.n_restarts`` seeded restarts.

    Restart ``r`` draws its initial parameters from a stream keyed by
    ``(config.seed, r)``.  The restart with the highest final corpus
    log-likelihood wins; ties go to the lower restart index.
    """
    if n_states < 1:
        raise ValueError("n_states must be >= 1")
    if kind == GAUSSIAN:
        x, offsets = _pack(corpus, GaussianEmission([0.0], [1.0]).check)
    elif kind == CATEGORICAL:
        if bin_edges is not None:
            n_symbols = len(bin_edges) + 1
        if n_symbols is None or n_symbols < 2:
            raise ValueError("categorical fitting needs n_symbols >= 2")
        checker = CategoricalEmission(np.full((1, n_symbols), 1.0 / n_symbols)).check
        x, offsets = _pack(corpus, checker)
    else:
        raise ValueError(f"unknown emission kind {kind!r}")

    def run(r):
        return _run_restart(x, offsets, n_states, kind, n_symbols, config, r,
                            keep_path, signal_transform, bin_edges)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(run, range(config.n_restarts)))
    else:
        results = [run(r) for r in range(config.n_restarts)]
    best = 0
    for r, (_, trace) in enumerate(results):
        if trace.final_log_likelihood > results[best][1].final_log_likelihood:
            best = r
    return FitResult(results[best][0], best, [t for _, t in results])


def fit_baum_welch(corpus: Sequence, n_states: int, config: FitConfig,
                   kind: str = GAUSSIAN, n_symbols: Optional[int] = None,
                   bin_edges=None, signal_transform: str = "log1p") -> HiddenMarkovModel:
    return fit_baum_welch_detailed(corpus, n_states, config, kind, n_symbols,
                                   bin_edges, signal_transform).model


# --------------------------------------------------------------------------
# serialization

def model_to_dict(model: HiddenMarkovModel) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "n_states": model.n_states,
        "initial": model.initial.tolist(),
        "transition": model.transition.tolist(),
        "emissions": model.emissions.to_dict(),
        "signal_transform": model.signal_transform,
    }
    if model.bin_edges is not None:
        doc["bin_edges"] = model.bin_edges.tolist()
    return doc


def model_from_dict(doc: dict) -> HiddenMarkovModel:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format {doc.get('format_version')!r}")
    em = doc["emissions"]
    if doc["kind"] == GAUSSIAN:
        emissions = GaussianEmission(em["means"], em["variances"])
    elif doc["kind"] == CATEGORICAL:
        emissions = CategoricalEmission(em["probabilities"])
    else:
        raise ValueError(f"unknown emission kind {doc['kind']!r}")
    model = HiddenMarkovModel(doc["initial"], doc["transition"], emissions,
                              doc.get("signal_transform", "log1p"),
                              doc.get("bin_edges"))
    if model.n_states != doc["n_states"]:
        raise ValueError("n_states field disagrees with parameter shapes")
    return model


def save_model(model: HiddenMarkovModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=1)


def load_model(path) -> HiddenMarkovModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
