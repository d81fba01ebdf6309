"""Distribution adaptation metrics for decomposed feature sequences.

Seasonal features are aligned with a joint kernel two-sample discrepancy
computed over consecutive subsequence pairs (a first-order Markov reading of
the joint distribution). Trend features are aligned through an optimal local
matching of subsequences: a quadratically regularized assignment program
solved by a primal-dual interior point method and differentiated implicitly
through its KKT system so the metric can sit inside a training graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.linalg import lu_factor, lu_solve
from scipy.optimize import linear_sum_assignment
from torch import Tensor

__all__ = [
    "SubsequenceSet",
    "KernelConfig",
    "MatchingProblem",
    "MatchingSolution",
    "MatchingSolverError",
    "AdaptConfig",
    "split_subsequences",
    "gaussian_kernel",
    "median_bandwidth",
    "mmd_biased",
    "mk_mmd",
    "seasonal_metric",
    "cosine_similarity_matrix",
    "solve_matching",
    "matching_gradient",
    "matching_layer",
    "round_to_permutation",
    "trend_metric",
    "adaptation_loss",
]


class MatchingSolverError(RuntimeError):
    """Raised when the interior point solver fails to reach its tolerance."""


@dataclass
class SubsequenceSet:
    """Contiguous equal-length blocks of a feature sequence, flattened to vectors."""

    vectors: Tensor  # [n, sub_len * d]
    n: int
    sub_len: int


@dataclass
class KernelConfig:
    """Gaussian kernel bandwidth policy for the discrepancy metrics."""

    bandwidth_policy: str = "median"  # "median" | "fixed"
    sigma: float = 1.0
    mk_sigmas: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0, 8.0)

    def __post_init__(self) -> None:
        if self.bandwidth_policy not in ("median", "fixed"):
            raise ValueError(f"unknown bandwidth policy: {self.bandwidth_policy!r}")
        if self.sigma <= 0 or any(s <= 0 for s in self.mk_sigmas):
            raise ValueError("kernel bandwidths must be positive")


@dataclass
class AdaptConfig:
    """Which metric aligns which component, plus kernel/matching settings."""

    n_subsequences: int = 4
    epsilon: float = 1e-2  # matching regularization weight
    kernel: KernelConfig = field(default_factory=KernelConfig)
    seasonal: str = "jmmd"  # "jmmd" | "ola"
    trend: str = "ola"


def split_subsequences(h: Tensor, n: int) -> SubsequenceSet:
    """Split a [m, d] feature sequence into n contiguous blocks, each flattened
    time-major into a vector of length (m/n)*d."""
    if h.ndim != 2:
        raise ValueError(f"expected a [m, d] sequence, got shape {tuple(h.shape)}")
    m = h.shape[0]
    if n < 2:
        raise ValueError("need at least 2 subsequences")
    if m % n != 0:
        raise ValueError(f"subsequence count {n} does not divide sequence length {m}")
    sub_len = m // n
    vectors = h.reshape(n, sub_len * h.shape[1])
    return SubsequenceSet(vectors=vectors, n=n, sub_len=sub_len)


def gaussian_kernel(u: Tensor, v: Tensor, sigma: float) -> Tensor:
    """k(u, v) = exp(-||u - v||^2 / (2 sigma^2))."""
    if sigma <= 0:
        raise ValueError("bandwidth must be positive")
    return torch.exp(-((u - v) ** 2).sum() / (2.0 * sigma**2))


def _gaussian_gram(a: Tensor, b: Tensor, sigma: float) -> Tensor:
    sq = torch.cdist(a, b, p=2) ** 2
    return torch.exp(-sq / (2.0 * sigma**2))


def median_bandwidth(vectors: Tensor) -> float:
    """Median heuristic: sigma = sqrt(median of nonzero squared pairwise
    distances / 2). Falls back to 1.0 for a degenerate point set."""
    if vectors.shape[0] < 2:
        raise ValueError("need at least 2 vectors for the median heuristic")
    with torch.no_grad():
        sq = (torch.cdist(vectors, vectors, p=2) ** 2).flatten()
        sq = sq[sq > 0]
        if sq.numel() == 0:
            return 1.0
        return float(torch.sqrt(sq.median() / 2.0))


def _resolve_sigma(pooled: Tensor, cfg: KernelConfig) -> float:
    if cfg.bandwidth_policy == "fixed":
        return cfg.sigma
    return median_bandwidth(pooled.detach())


def mmd_biased(a: Tensor, b: Tensor, sigma: float) -> Tensor:
    """Biased MMD^2 estimate between two vector sets under a Gaussian kernel.

    Nonnegative up to float roundoff; zero when the two sets coincide.
    """
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("both sample sets must be nonempty")
    k_aa = _gaussian_gram(a, a, sigma).mean()
    k_bb = _gaussian_gram(b, b, sigma).mean()
    k_ab = _gaussian_gram(a, b, sigma).mean()
    return k_aa + k_bb - 2.0 * k_ab


def mk_mmd(a: Tensor, b: Tensor, sigmas: tuple[float, ...]) -> Tensor:
    """Multi-kernel MMD: mean of the biased estimate over a bandwidth list."""
    if len(sigmas) == 0:
        raise ValueError("need at least one bandwidth")
    return torch.stack([mmd_biased(a, b, s) for s in sigmas]).mean()


def seasonal_metric(
    hs_sea: Tensor, ht_sea: Tensor, n: int, kernel_cfg: KernelConfig | None = None
) -> Tensor:
    """Joint discrepancy between two seasonal feature sequences.

    Both sequences are split into n subsequences; consecutive blocks form
    (marginal, one-step transition) pairs, compared under the product kernel
    k((u1,u2),(v1,v2)) = k_e(u1,v1) * k_e(u2,v2) with a biased MMD estimate.
    """
    kernel_cfg = kernel_cfg or KernelConfig()
    sub_s = split_subsequences(hs_sea, n)
    sub_t = split_subsequences(ht_sea, n)
    if sub_s.vectors.shape[1] != sub_t.vectors.shape[1]:
        raise ValueError("source/target subsequences have mismatched widths")
    vs, vt = sub_s.vectors, sub_t.vectors
    sigma = _resolve_sigma(torch.cat([vs, vt], dim=0), kernel_cfg)

    def joint_gram(x: Tensor, y: Tensor) -> Tensor:
        first = _gaussian_gram(x[:-1], y[:-1], sigma)
        second = _gaussian_gram(x[1:], y[1:], sigma)
        return first * second

    k_ss = joint_gram(vs, vs).mean()
    k_tt = joint_gram(vt, vt).mean()
    k_st = joint_gram(vs, vt).mean()
    return k_ss + k_tt - 2.0 * k_st


def cosine_similarity_matrix(tr_s: Tensor, tr_t: Tensor) -> Tensor:
    """s_ij = <u_i, v_j> / (||u_i|| ||v_j||) between two row sets."""
    norm_s = tr_s.norm(dim=1)
    norm_t = tr_t.norm(dim=1)
    if (norm_s < 1e-12).any() or (norm_t < 1e-12).any():
        raise ValueError("cosine similarity undefined for a zero-norm row")
    return (tr_s @ tr_t.T) / (norm_s[:, None] * norm_t[None, :])


# ---------------------------------------------------------------------------
# Regularized optimal matching
# ---------------------------------------------------------------------------


@dataclass
class MatchingProblem:
    """min <C, M> + (eps/2)||M||_F^2 over doubly stochastic M, with C = 1 - S."""

    S: np.ndarray  # [n, n] similarities in [-1, 1]
    C: np.ndarray  # [n, n] cost, 1 - S
    epsilon: float

    @classmethod
    def from_similarity(cls, S: np.ndarray, epsilon: float) -> "MatchingProblem":
        S = np.asarray(S, dtype=np.float64)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ValueError(f"similarity matrix must be square, got {S.shape}")
        if np.abs(S).max() > 1.0 + 1e-6:
            raise ValueError("similarity entries must lie in [-1, 1]")
        if epsilon < 0:
            raise ValueError("regularization weight must be nonnegative")
        return cls(S=S, C=1.0 - S, epsilon=float(epsilon))


@dataclass
class MatchingSolution:
    M: np.ndarray  # [n, n] doubly stochastic matching
    nu: np.ndarray  # [2n] equality duals (row sums then column sums)
    eta: np.ndarray  # [n^2] nonnegativity duals
    objective: float
    kkt_residual: float


def _constraint_matrix(n: int) -> np.ndarray:
    # Row sums (n) plus column sums minus the last (redundant) one: full row rank.
    a = np.zeros((2 * n - 1, n * n))
    for i in range(n):
        a[i, i * n : (i + 1) * n] = 1.0
    for j in range(n - 1):
        a[n + j, j::n] = 1.0
    return a


def solve_matching(
    problem: MatchingProblem,
    *,
    max_iter: int = 50,
    tol_feas: float = 1e-10,
    tol_gap: float | None = None,
    accept_residual: float = 1e-8,
) -> MatchingSolution:
    """Solve the regularized matching program with a Mehrotra-style
    primal-dual interior point method.

    The Newton systems are reduced to the (2n-1)-dim normal equations of the
    equality constraints, which stay well conditioned as the iterates approach
    the boundary. Raises MatchingSolverError if the final KKT residual exceeds
    ``accept_residual``.
    """
    if problem.epsilon <= 0:
        raise ValueError("interior point solve requires epsilon > 0")
    n = problem.S.shape[0]
    m = n * n
    if tol_gap is None:
        tol_gap = 1e-12 * m
    eps = problem.epsilon
    c = problem.C.reshape(-1).astype(np.float64)
    a = _constraint_matrix(n)
    b = np.ones(2 * n - 1)

    # The barycenter is strictly feasible, which keeps the primal residual at
    # roundoff level throughout.
    x = np.full(m, 1.0 / n)
    z = np.ones(m)
    nu = np.zeros(2 * n - 1)

    def residuals(x, z, nu):
        r_d = eps * x + c + a.T @ nu - z
        r_p = a @ x - b
        return r_d, r_p

    kkt = math.inf
    for _ in range(max_iter):
        r_d, r_p = residuals(x, z, nu)
        gap = float(x @ z)
        feas = max(np.abs(r_d).max(), np.abs(r_p).max())
        kkt = max(feas, float(np.max(x * z)))
        if feas <= tol_feas and gap <= tol_gap:
            break

        # Augmented KKT system with the bound duals eliminated. LU with
        # partial pivoting stays stable as x*z -> 0 at degenerate vertices,
        # where the Schur-complement normal equations lose definiteness.
        d = eps + z / x
        k_eq = 2 * n - 1
        aug = np.zeros((m + k_eq, m + k_eq))
        aug[:m, :m] = np.diag(d)
        aug[:m, m:] = a.T
        aug[m:, :m] = a
        try:
            lu = lu_factor(aug)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - tiny system
            raise MatchingSolverError(f"KKT factorization failed: {exc}")

        def newton(target: np.ndarray):
            # (eps + z/x) dx + A' dnu = -r_d + (target - x*z)/x ; A dx = -r_p
            rhs1 = -r_d + (target - x * z) / x
            sol = lu_solve(lu, np.concatenate([rhs1, -r_p]))
            dx, dnu = sol[:m], sol[m:]
            dz = (target - x * z) / x - (z / x) * dx
            return dx, dnu, dz

        def max_step(v: np.ndarray, dv: np.ndarray) -> float:
            neg = dv < 0
            if not neg.any():
                return 1.0
            return min(1.0, float(np.min(-v[neg] / dv[neg])))

        # Affine-scaling predictor.
        dx_aff, dnu_aff, dz_aff = newton(np.zeros(m))
        alpha_p_aff = max_step(x, dx_aff)
        alpha_d_aff = max_step(z, dz_aff)
        mu = gap / m
        mu_aff = float(
            (x + alpha_p_aff * dx_aff) @ (z + alpha_d_aff * dz_aff)
        ) / m
        sigma = (max(mu_aff, 0.0) / mu) ** 3 if mu > 0 else 0.0

        # Mehrotra corrector.
        dx, dnu, dz = newton(sigma * mu - dx_aff * dz_aff)
        alpha_p = min(1.0, 0.995 * max_step(x, dx))
        alpha_d = min(1.0, 0.995 * max_step(z, dz))
        x = x + alpha_p * dx
        nu = nu + alpha_d * dnu
        z = z + alpha_d * dz

    r_d, r_p = residuals(x, z, nu)
    kkt = max(np.abs(r_d).max(), np.abs(r_p).max(), float(np.max(x * z)))
    if kkt > accept_residual:
        raise MatchingSolverError(
            f"no convergence after {max_iter} iterations (KKT residual {kkt:.3e})"
        )
    objective = float(c @ x + 0.5 * eps * (x @ x))
    nu_full = np.concatenate([nu, [0.0]])  # dual of the dropped redundant constraint
    return MatchingSolution(
        M=x.reshape(n, n),
        nu=nu_full,
        eta=z.copy(),
        objective=objective,
        kkt_residual=float(kkt),
    )


def matching_gradient(
    problem: MatchingProblem,
    solution: MatchingSolution,
    d_matching: np.ndarray | None,
    d_objective: float = 0.0,
) -> np.ndarray:
    """Pull upstream gradients (w.r.t. the matching matrix and/or the optimal
    value) back to the similarity matrix by implicitly differentiating the
    KKT system of the regularized program at the solution.

    Differentiating stationarity, primal feasibility, and complementarity
    gives a linear map dM/dc applied in adjoint form here. The full 3-block
    system (stationarity / complementarity / equality rows) is solved by LU
    rather than its Schur complement, which turns singular at degenerate
    vertex solutions. The optimal-value path adds the envelope term x plus
    the implicit correction through dM/dc. dC/dS = -I.
    """
    n = problem.S.shape[0]
    m = n * n
    eps = problem.epsilon
    x = solution.M.reshape(-1)
    z = solution.eta
    c = problem.C.reshape(-1)
    g = (
        np.zeros(m)
        if d_matching is None
        else np.asarray(d_matching, dtype=np.float64).reshape(-1)
    )
    if d_objective != 0.0:
        # d(obj)/dc = x + (dM/dc)' (c + eps x); fold the implicit part into g.
        g = g + d_objective * (c + eps * x)

    a = _constraint_matrix(n)
    k_eq = 2 * n - 1
    # Rows: eps*dx - diag(z) dl + A' dv = -g ; -dx - diag(x) dl = 0 ; A dx = 0.
    kkt = np.zeros((2 * m + k_eq, 2 * m + k_eq))
    kkt[:m, :m] = eps * np.eye(m)
    kkt[:m, m : 2 * m] = -np.diag(z)
    kkt[:m, 2 * m :] = a.T
    kkt[m : 2 * m, :m] = -np.eye(m)
    kkt[m : 2 * m, m : 2 * m] = -np.diag(x)
    kkt[2 * m :, :m] = a
    rhs = np.concatenate([-g, np.zeros(m + k_eq)])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError as exc:
        raise MatchingSolverError(
            f"singular KKT system in backward pass (raise epsilon): {exc}"
        )
    d_cost = sol[:m]
    if d_objective != 0.0:
        d_cost = d_cost + d_objective * x  # explicit envelope term
    return (-d_cost).reshape(n, n)  # dC/dS = -1 elementwise


class _MatchingLayer(torch.autograd.Function):
    """Differentiable wrapper returning (matching matrix, optimal value)."""

    @staticmethod
    def forward(ctx, s: Tensor, epsilon: float):
        problem = MatchingProblem.from_similarity(
            s.detach().cpu().double().numpy(), epsilon
        )
        solution = solve_matching(problem)
        ctx.problem = problem
        ctx.solution = solution
        matching = torch.as_tensor(solution.M, dtype=s.dtype, device=s.device)
        objective = torch.as_tensor(
            solution.objective, dtype=s.dtype, device=s.device
        )
        return matching, objective

    @staticmethod
    def backward(ctx, grad_matching: Tensor, grad_objective: Tensor):
        d_matching = (
            grad_matching.detach().cpu().double().numpy()
            if grad_matching is not None
            else None
        )
        d_objective = float(grad_objective) if grad_objective is not None else 0.0
        d_s = matching_gradient(ctx.problem, ctx.solution, d_matching, d_objective)
        grad = torch.as_tensor(
            d_s, dtype=grad_matching.dtype, device=grad_matching.device
        )
        return grad, None


def matching_layer(s: Tensor, epsilon: float) -> tuple[Tensor, Tensor]:
    """Solve the regularized matching for a similarity matrix, keeping the
    result differentiable in the similarities."""
    return _MatchingLayer.apply(s, epsilon)


def round_to_permutation(matching: np.ndarray) -> np.ndarray:
    """Round a doubly stochastic matrix to the permutation with maximum
    total matched weight."""
    rows, cols = linear_sum_assignment(-np.asarray(matching))
    p = np.zeros_like(matching)
    p[rows, cols] = 1.0
    return p


def trend_metric(hs_tre: Tensor, ht_tre: Tensor, n: int, epsilon: float) -> Tensor:
    """Optimal local adaptation distance between two trend feature sequences:
    the matched cost sum_ij (1 - s_ij) m_ij under the regularized optimal
    matching of their subsequences."""
    if hs_tre.shape != ht_tre.shape:
        raise ValueError(
            "trend matching expects equal-shape sequences, got "
            f"{tuple(hs_tre.shape)} vs {tuple(ht_tre.shape)}"
        )
    sub_s = split_subsequences(hs_tre, n)
    sub_t = split_subsequences(ht_tre, n)
    s = cosine_similarity_matrix(sub_s.vectors, sub_t.vectors)
    matching, _ = matching_layer(s, epsilon)
    return ((1.0 - s) * matching).sum()


def _encoder_metric(hs: Tensor, ht: Tensor, name: str, cfg: AdaptConfig) -> Tensor:
    sub_s = split_subsequences(hs, cfg.n_subsequences)
    sub_t = split_subsequences(ht, cfg.n_subsequences)
    if name == "mkmmd":
        return mk_mmd(sub_s.vectors, sub_t.vectors, cfg.kernel.mk_sigmas)
    if name == "jmmd":
        return seasonal_metric(hs, ht, cfg.n_subsequences, cfg.kernel)
    raise ValueError(f"unknown encoder adaptation metric: {name!r}")


def _component_metric(hs: Tensor, ht: Tensor, name: str, cfg: AdaptConfig) -> Tensor:
    if name == "jmmd":
        return seasonal_metric(hs, ht, cfg.n_subsequences, cfg.kernel)
    if name == "ola":
        return trend_metric(hs, ht, cfg.n_subsequences, cfg.epsilon)
    raise ValueError(f"unknown adaptation metric: {name!r}")


def adaptation_loss(
    hs_sea: Tensor,
    ht_sea: Tensor,
    hs_tre: Tensor,
    ht_tre: Tensor,
    cfg: AdaptConfig,
    *,
    return_parts: bool = False,
):
    """Combined adaptation objective: the seasonal-component metric plus the
    trend-component metric, each selectable per configuration (the ablation
    grid swaps them)."""
    d_sea = _component_metric(hs_sea, ht_sea, cfg.seasonal, cfg)
    d_tre = _component_metric(hs_tre, ht_tre, cfg.trend, cfg)
    total = d_sea + d_tre
    if return_parts:
        return total, {"seasonal": d_sea, "trend": d_tre}
    return total
