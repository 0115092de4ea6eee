"""Numerical demonstration that meta-gradients through a sampled inner
problem are biased.

The setup is the smallest one with the full bilevel structure. Data X lives
in R^{m x d_x}. An "augmentation" is a binary column mask xi drawn from a
finite support with known probabilities. Each atom defines a strictly convex
quadratic in theta:

    loss_j(theta; X) = 0.5 ||(X * xi_j) P theta - c_j||^2 + (mu/2)||theta||^2

so both the exact inner solution theta* (expectation over atoms) and the
sampled one theta_hat (average of r draws) are closed-form linear solves,
and every expectation we care about can be computed exactly. The outer
objective is the exact-expectation loss of the same family at fixed real
data X_t. The meta-gradient d(outer)/dX through theta_hat is exact linear
algebra too, so Monte-Carlo error is the only noise in the experiment: any
systematic gap between the sampled-path meta-gradient and the exact one is
the bias being demonstrated. A plain (single-level) gradient estimated the
same way serves as the unbiased control, and the per-trial identity
G = E[v]^T E[alpha] + sum_k cov(v_k, alpha_k) is checked from the same
trials.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .core.rng import RngState
from .errors import ConfigError, ContractError, FormatError


@dataclass(frozen=True)
class ToySSLProblem:
    masks: np.ndarray  # (p, d_x) binary, one augmentation atom per row
    probs: np.ndarray  # (p,)
    proj: np.ndarray  # (d_x, d_theta)
    inner_targets: np.ndarray  # (p, m) regression targets per atom
    xt: np.ndarray  # (n, d_x) fixed real data for the outer objective
    outer_targets: np.ndarray  # (p, n)
    mu: float = 1e-2  # ridge weight; keeps every Hessian positive definite

    @property
    def n_atoms(self) -> int:
        return self.masks.shape[0]

    @property
    def d_x(self) -> int:
        return self.masks.shape[1]

    @property
    def d_theta(self) -> int:
        return self.proj.shape[1]

    @property
    def m(self) -> int:
        return self.inner_targets.shape[1]

    def validate(self) -> None:
        p, d_x = self.masks.shape
        if self.probs.shape != (p,):
            raise ContractError(f"{p} masks but probs {self.probs.shape}")
        if not np.all((self.masks == 0) | (self.masks == 1)):
            raise ContractError("masks must be 0/1")
        if np.any(self.probs <= 0) or abs(self.probs.sum() - 1.0) > 1e-12:
            raise ContractError("atom probabilities must be positive and sum to 1")
        if self.proj.shape[0] != d_x:
            raise ContractError(f"proj {self.proj.shape} vs mask width {d_x}")
        if self.inner_targets.shape[0] != p or self.outer_targets.shape[0] != p:
            raise ContractError("need one target row per atom")
        if self.xt.shape != (self.outer_targets.shape[1], d_x):
            raise ContractError(
                f"xt {self.xt.shape} vs outer targets {self.outer_targets.shape}"
            )
        if self.mu <= 0:
            raise ConfigError(f"mu must be > 0 for unique minimizers, got {self.mu}")

    def to_dict(self) -> dict:
        return {
            "masks": self.masks.tolist(),
            "probs": self.probs.tolist(),
            "proj": self.proj.tolist(),
            "inner_targets": self.inner_targets.tolist(),
            "xt": self.xt.tolist(),
            "outer_targets": self.outer_targets.tolist(),
            "mu": self.mu,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToySSLProblem":
        try:
            prob = cls(
                masks=np.asarray(d["masks"], dtype=np.float64),
                probs=np.asarray(d["probs"], dtype=np.float64),
                proj=np.asarray(d["proj"], dtype=np.float64),
                inner_targets=np.asarray(d["inner_targets"], dtype=np.float64),
                xt=np.asarray(d["xt"], dtype=np.float64),
                outer_targets=np.asarray(d["outer_targets"], dtype=np.float64),
                mu=float(d["mu"]),
            )
        except KeyError as e:
            raise FormatError(f"problem dict missing key {e}") from e
        prob.validate()
        return prob


# -- closed-form pieces ---------------------------------------------------------------


def _design(problem: ToySSLProblem, X: np.ndarray, j: int) -> np.ndarray:
    """G_j = (X * mask_j) P, the per-atom design matrix, (m, d_theta)."""
    return (X * problem.masks[j]) @ problem.proj


def inner_solution(problem: ToySSLProblem, X: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Minimizer of sum_j weights_j * loss_j(theta; X). Exact expectation uses
    weights = probs; a sampled problem uses empirical frequencies."""
    d = problem.d_theta
    M = problem.mu * np.eye(d)
    w = np.zeros(d)
    for j in range(problem.n_atoms):
        if weights[j] == 0.0:
            continue
        G = _design(problem, X, j)
        M += weights[j] * (G.T @ G)
        w += weights[j] * (G.T @ problem.inner_targets[j])
    try:
        return np.linalg.solve(M, w)
    except np.linalg.LinAlgError as e:
        raise ContractError(f"aggregated inner Hessian is singular: {e}") from e


def outer_value(problem: ToySSLProblem, theta: np.ndarray) -> float:
    """Exact-expectation outer loss at fixed real data."""
    total = 0.0
    for j in range(problem.n_atoms):
        H = (problem.xt * problem.masks[j]) @ problem.proj
        resid = H @ theta - problem.outer_targets[j]
        total += problem.probs[j] * 0.5 * float(resid @ resid)
    return total


def outer_grad_theta(problem: ToySSLProblem, theta: np.ndarray) -> np.ndarray:
    """v = d(outer)/dtheta, exact expectation. Linear in theta."""
    v = np.zeros(problem.d_theta)
    for j in range(problem.n_atoms):
        H = (problem.xt * problem.masks[j]) @ problem.proj
        v += problem.probs[j] * (H.T @ (H @ theta - problem.outer_targets[j]))
    return v


def _meta_grad_parts(problem: ToySSLProblem, X: np.ndarray, weights: np.ndarray):
    """theta, v and the sensitivity tensor alpha_k,ab = d theta_k / d X_ab for
    the inner problem weighted by `weights`. Everything is closed form:
    differentiating M theta = w gives alpha = M^-1 (dw - dM theta)."""
    m, d_x, d_t = problem.m, problem.d_x, problem.d_theta
    theta = inner_solution(problem, X, weights)
    v = outer_grad_theta(problem, theta)

    M = problem.mu * np.eye(d_t)
    for j in range(problem.n_atoms):
        if weights[j] == 0.0:
            continue
        G = _design(problem, X, j)
        M += weights[j] * (G.T @ G)
    Minv = np.linalg.inv(M)

    alpha = np.zeros((d_t, m, d_x))
    P = problem.proj
    MinvP = Minv @ P.T  # (d_t, d_x), column b = M^-1 P[b,:]
    Ptheta = P @ theta  # (d_x,)
    for j in range(problem.n_atoms):
        if weights[j] == 0.0:
            continue
        G = _design(problem, X, j)
        r_in = problem.inner_targets[j] - G @ theta  # (m,)
        MinvG = Minv @ G.T  # (d_t, m)
        xi = problem.masks[j]
        # d theta / d X_ab = w_j * xi_b [ r_in[a] M^-1 P_b - (P_b . theta) M^-1 G_a ]
        term = (
            MinvP[:, None, :] * r_in[None, :, None]
            - MinvG[:, :, None] * Ptheta[None, None, :]
        )
        alpha += weights[j] * term * xi[None, None, :]
    return theta, v, alpha


def exact_meta_grad(problem: ToySSLProblem, X: np.ndarray) -> np.ndarray:
    """d(outer)/dX through the exact inner solution theta*(X). (m, d_x)."""
    problem.validate()
    _, v, alpha = _meta_grad_parts(problem, X, problem.probs)
    return np.einsum("k,kab->ab", v, alpha)


def meta_grad_for_draws(
    problem: ToySSLProblem, X: np.ndarray, draws: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Meta-gradient when the inner problem averages exactly the given atom
    draws (indices with multiplicity). Returns (G, v, alpha); G = sum_k
    v_k alpha_k. Exposed separately so tests can drive stratified draws."""
    draws = np.asarray(draws)
    if draws.size < 1:
        raise ContractError("need at least one draw")
    weights = np.bincount(draws, minlength=problem.n_atoms).astype(np.float64)
    weights /= draws.size
    _, v, alpha = _meta_grad_parts(problem, X, weights)
    return np.einsum("k,kab->ab", v, alpha), v, alpha


def sampled_meta_grad(
    problem: ToySSLProblem, X: np.ndarray, r: int, rng: RngState
) -> np.ndarray:
    """Meta-gradient through theta_hat fitted on r i.i.d. atom draws."""
    problem.validate()
    if r < 1:
        raise ContractError(f"need r >= 1 draws, got {r}")
    G, _, _ = meta_grad_for_draws(problem, X, _draw_atoms(problem, rng, r))
    return G


def _draw_atoms(problem: ToySSLProblem, rng: RngState, r: int) -> np.ndarray:
    cum = np.cumsum(problem.probs)
    u = rng.uniform((r,))
    return np.searchsorted(cum, u, side="right").clip(0, problem.n_atoms - 1)


def exact_outer_value(problem: ToySSLProblem, X: np.ndarray) -> float:
    """The exact bilevel objective L(theta*(X)); finite differences of this
    are the independent check on exact_meta_grad."""
    return outer_value(problem, inner_solution(problem, X, problem.probs))


# -- Monte-Carlo harness ----------------------------------------------------------------


@dataclass
class BiasReport:
    exact: np.ndarray  # (m, d_x) meta-gradient through theta*
    mc_mean: np.ndarray  # (m, d_x) mean sampled-path meta-gradient
    se: np.ndarray  # (m, d_x) per-coordinate standard error of the mean
    bias: np.ndarray  # mc_mean - exact
    flagged: np.ndarray  # bool, |bias| > 3 se
    cov_term: np.ndarray  # (m, d_x) sum_k cov(v_k, alpha_k,ab), ddof=1
    decomp_residual: np.ndarray  # |mc_mean - (E[v]^T E[alpha] + cov_term)|
    trials: int
    r: int
    seed: int
    singular_resamples: int = 0

    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.bias) / np.maximum(self.se, 1e-300)))


def bias_estimate(
    problem: ToySSLProblem, X: np.ndarray, r: int, trials: int, rng: RngState
) -> BiasReport:
    """Monte-Carlo estimate of the sampled-path meta-gradient against the
    exact one, with the covariance decomposition computed from the same
    trials. Draws that produce a singular sampled Hessian are redrawn and
    counted (with mu > 0 none should occur)."""
    problem.validate()
    if trials < 2:
        raise ContractError(f"need trials >= 2 for standard errors, got {trials}")
    if r < 1:
        raise ContractError(f"need r >= 1, got {r}")
    m, d_x, d_t = problem.m, problem.d_x, problem.d_theta
    seed = rng.seed

    sum_g = np.zeros((m, d_x))
    sum_g2 = np.zeros((m, d_x))
    sum_v = np.zeros(d_t)
    sum_alpha = np.zeros((d_t, m, d_x))
    sum_valpha = np.zeros((d_t, m, d_x))  # per-k cross moments for the covariance
    resamples = 0
    for _ in range(trials):
        while True:
            draws = _draw_atoms(problem, rng, r)
            try:
                g, v, alpha = meta_grad_for_draws(problem, X, draws)
                break
            except (ContractError, np.linalg.LinAlgError):
                resamples += 1
        sum_g += g
        sum_g2 += g * g
        sum_v += v
        sum_alpha += alpha
        sum_valpha += v[:, None, None] * alpha

    t = float(trials)
    mc_mean = sum_g / t
    var = (sum_g2 - t * mc_mean**2) / (t - 1.0)
    se = np.sqrt(np.maximum(var, 0.0) / t)
    mean_v = sum_v / t
    mean_alpha = sum_alpha / t
    # sample covariance, ddof=1: sum_t (v - vb)(a - ab) / (T-1)
    cov = (sum_valpha - t * mean_v[:, None, None] * mean_alpha) / (t - 1.0)
    cov_term = cov.sum(axis=0)
    recomposed = np.einsum("k,kab->ab", mean_v, mean_alpha) + cov_term
    exact = exact_meta_grad(problem, X)
    bias = mc_mean - exact
    # the significance floor guards the se == 0 case (deterministic draws),
    # where accumulation round-off would otherwise flag a ~1e-17 "bias"
    floor = 1e-12 * np.maximum(1.0, np.abs(exact))
    return BiasReport(
        exact=exact,
        mc_mean=mc_mean,
        se=se,
        bias=bias,
        flagged=np.abs(bias) > 3.0 * se + floor,
        cov_term=cov_term,
        decomp_residual=np.abs(mc_mean - recomposed),
        trials=trials,
        r=r,
        seed=seed,
        singular_resamples=resamples,
    )


def covariance_decomposition_check(
    problem: ToySSLProblem, X: np.ndarray, r: int, trials: int, rng: RngState
) -> np.ndarray:
    """Per-coordinate |E[G] - (E[v]^T E[alpha] + sum_k cov(v_k, alpha_k))|
    estimated from one set of trials. Exact up to the ddof convention, so the
    residual must sit far inside the Monte-Carlo noise."""
    return bias_estimate(problem, X, r, trials, rng).decomp_residual


@dataclass
class ControlReport:
    mc_mean: np.ndarray  # (d_theta,) mean sampled plain gradient
    se: np.ndarray
    exact: np.ndarray
    flagged: np.ndarray  # bool, |mean - exact| > 3 se
    trials: int
    r: int


def plain_gradient_control(
    problem: ToySSLProblem,
    X: np.ndarray,
    theta: np.ndarray,
    r: int,
    trials: int,
    rng: RngState,
) -> ControlReport:
    """The single-level control: the gradient in theta of the sampled inner
    loss at a FIXED theta. Sampling enters linearly, so this estimator is
    unbiased; it isolates the bias demonstration to the bilevel pathway."""
    problem.validate()
    if trials < 2:
        raise ContractError(f"need trials >= 2, got {trials}")
    grads_per_atom = np.stack(
        [
            _design(problem, X, j).T @ (_design(problem, X, j) @ theta - problem.inner_targets[j])
            + problem.mu * theta
            for j in range(problem.n_atoms)
        ]
    )  # (p, d_theta)
    exact = problem.probs @ grads_per_atom
    sum_g = np.zeros(problem.d_theta)
    sum_g2 = np.zeros(problem.d_theta)
    for _ in range(trials):
        draws = _draw_atoms(problem, rng, r)
        g = grads_per_atom[draws].mean(axis=0)
        sum_g += g
        sum_g2 += g * g
    t = float(trials)
    mean = sum_g / t
    var = (sum_g2 - t * mean**2) / (t - 1.0)
    se = np.sqrt(np.maximum(var, 0.0) / t)
    return ControlReport(
        mc_mean=mean,
        se=se,
        exact=exact,
        flagged=np.abs(mean - exact) > 3.0 * se,
        trials=trials,
        r=r,
    )


# -- exact sampling expectations (two-atom instances) -------------------------------------


def enumerate_expected_sampled_grad(
    problem: ToySSLProblem, X: np.ndarray, r: int
) -> np.ndarray:
    """E over draws of the sampled-path meta-gradient, computed EXACTLY by
    enumerating draw multisets. Feasible for small atom counts; with two
    atoms the count of atom 0 is binomial and there are only r+1 outcomes.
    This is how the shipped instance's bias was designed and verified."""
    problem.validate()
    from itertools import combinations_with_replacement
    from math import comb, factorial

    p = problem.n_atoms
    if p == 2:
        expected = np.zeros((problem.m, problem.d_x))
        for k in range(r + 1):
            w = comb(r, k) * problem.probs[0] ** k * problem.probs[1] ** (r - k)
            draws = np.array([0] * k + [1] * (r - k))
            g, _, _ = meta_grad_for_draws(problem, X, draws)
            expected += w * g
        return expected
    expected = np.zeros((problem.m, problem.d_x))
    for combo in combinations_with_replacement(range(p), r):
        counts = np.bincount(combo, minlength=p)
        mult = factorial(r) / np.prod([factorial(int(c)) for c in counts])
        w = mult * np.prod(problem.probs**counts)
        g, _, _ = meta_grad_for_draws(problem, X, np.array(combo))
        expected += w * g
    return expected


# -- the shipped instance -----------------------------------------------------------------


def save_instance(path: str, problem: ToySSLProblem, X: np.ndarray) -> None:
    d = problem.to_dict()
    d["x_eval"] = X.tolist()
    with open(path, "w") as f:
        json.dump(d, f, indent=1, sort_keys=True)
        f.write("\n")


def load_instance(path: str) -> tuple[ToySSLProblem, np.ndarray]:
    with open(path) as f:
        d = json.load(f)
    if "x_eval" not in d:
        raise FormatError("instance file lacks the x_eval evaluation point")
    X = np.asarray(d.pop("x_eval"), dtype=np.float64)
    problem = ToySSLProblem.from_dict(d)
    if X.shape != (problem.m, problem.d_x):
        raise FormatError(f"x_eval {X.shape} vs problem ({problem.m}, {problem.d_x})")
    return problem, X


def designed_instance() -> tuple[ToySSLProblem, np.ndarray]:
    """The committed instance: two asymmetric mask atoms (p = 0.3/0.7) whose
    designs differ enough that the sampled Hessian varies across draws,
    which is exactly what makes the bilevel estimator biased at small r."""
    path = os.path.join(os.path.dirname(__file__), "assets", "bias_instance.json")
    return load_instance(path)
