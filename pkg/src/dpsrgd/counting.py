"""Private continual counting.

Two mechanisms for releasing noisy prefix sums of a vector stream:

* a dyadic-interval (binary tree) mechanism with per-node Gaussian noise,
  streamed one step at a time, and
* matrix-factorization correlated noise, where a lower-triangular strategy
  matrix C (with bounded column-group sensitivity across epochs) shapes
  white noise Z into C^{-1} Z rows.

The tree is also exposed as an explicit (B, C) matrix factorization so both
mechanisms can be compared on a single error axis, and as a square
lower-triangular embedding used to seed the factorization optimizer.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

__all__ = [
    "TreeState",
    "StrategyMatrix",
    "tree_ingest",
    "tree_prefix",
    "calibrate_tree_sigma",
    "tree_error_bound",
    "build_workload",
    "factorize",
    "mf_noise_stream",
    "tree_matrix_factorization",
    "tree_baseline_objective",
    "tree_strategy_matrix",
    "column_group_sens",
    "save_strategy",
    "load_strategy",
]


def ceil_log2(t: int) -> int:
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    return (t - 1).bit_length()


def covering_nodes(i: int, depth: int) -> list[tuple[int, int]]:
    """Materialized tree nodes (j, k) whose dyadic interval contains step i.

    Node (j, k) covers steps ((j-1)*2^k, j*2^k]; only odd j is kept because
    prefix decompositions never read an even-indexed interval.
    """
    nodes = []
    for k in range(depth + 1):
        j = -(-i // (1 << k))  # ceil(i / 2^k)
        if j % 2 == 1:
            nodes.append((j, k))
    return nodes


def prefix_nodes(i: int) -> list[tuple[int, int]]:
    """Greedy left-to-right dyadic decomposition of the prefix [1, i].

    The number of intervals equals popcount(i); every interval index j is
    odd. Example: i=7 decomposes into (1,2), (3,1), (7,0).
    """
    nodes = []
    start, remaining = 0, i
    while remaining > 0:
        k = remaining.bit_length() - 1
        block = 1 << k
        nodes.append((start // block + 1, k))
        start += block
        remaining -= block
    return nodes


@dataclass
class TreeState:
    """Streaming binary tree over a horizon of `horizon` steps of
    `dim`-dimensional vectors, with i.i.d. N(0, sigma^2) noise per node
    coordinate.

    All node noise is materialized up front from the seed in a fixed
    (level, index) order, so a node's noise is a function of (seed, j, k)
    alone and does not depend on how far ingestion has progressed.
    """

    horizon: int
    dim: int
    sigma: float = 0.0
    seed: int = 0
    ingested: int = field(init=False, default=0)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        self.depth = ceil_log2(self.horizon)
        nodes = []
        for k in range(self.depth + 1):
            j_max = (self.horizon - 1) // (1 << k) + 1
            nodes.extend((j, k) for j in range(1, j_max + 1, 2))
        nodes.sort(key=lambda jk: (jk[1], jk[0]))
        self._node_index = {jk: r for r, jk in enumerate(nodes)}
        self.nodes = nodes
        self._sums = np.zeros((len(nodes), self.dim))
        if self.sigma > 0:
            rng = np.random.default_rng(self.seed)
            self._noise = self.sigma * rng.standard_normal((len(nodes), self.dim))
        else:
            self._noise = np.zeros((len(nodes), self.dim))

    def node_sum(self, j: int, k: int) -> np.ndarray:
        """Noisy partial sum s_{j,k} (interval sum plus node noise)."""
        r = self._node_index[(j, k)]
        return self._sums[r] + self._noise[r]


def tree_ingest(state: TreeState, i: int, delta: np.ndarray) -> TreeState:
    """Add step i's vector into every node covering step i.

    Steps must arrive in order 1, 2, ..., horizon.
    """
    if i != state.ingested + 1:
        raise ValueError(f"steps must arrive in order: expected {state.ingested + 1}, got {i}")
    if i > state.horizon:
        raise ValueError(f"step {i} beyond horizon {state.horizon}")
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (state.dim,):
        raise ValueError(f"delta shape {delta.shape} != ({state.dim},)")
    if not np.all(np.isfinite(delta)):
        raise ValueError(f"non-finite delta at step {i}")
    for jk in covering_nodes(i, state.depth):
        state._sums[state._node_index[jk]] += delta
    state.ingested = i
    return state


def tree_prefix(state: TreeState, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Noisy estimate of the prefix sum through step i.

    Returns (estimate, noise_only):  estimate = exact prefix + noise_only,
    where noise_only is the sum of the noises of the (at most popcount(i))
    nodes in the dyadic decomposition. The estimate is unbiased.
    """
    if not 1 <= i <= state.ingested:
        raise ValueError(f"prefix step {i} not ingested yet (have {state.ingested})")
    rows = [state._node_index[jk] for jk in prefix_nodes(i)]
    estimate = state._sums[rows].sum(axis=0) + state._noise[rows].sum(axis=0)
    noise_only = state._noise[rows].sum(axis=0)
    return estimate, noise_only


def calibrate_tree_sigma(c_clip: float, mu: float, horizon: int) -> float:
    """Per-node noise std for mu-GDP release of a stream whose elements
    have L2 sensitivity c_clip: c_clip * sqrt(1 + ceil(log2 T)) / mu."""
    if mu <= 0:
        raise ValueError(f"mu must be positive, got {mu}")
    return c_clip * math.sqrt(1 + ceil_log2(horizon)) / mu

def tree_error_bound(c_clip: float, mu: float, horizon: int, d: int, delta: float) -> float:
    """High-probability bound on the max prefix L2 noise norm:
    4 * c_clip * log2(T)^1.5 * sqrt(d * ln(2T/delta)) / mu.

    Holds with probability at least 1 - delta over the tree noise.
    """
    if horizon < 2:
        raise ValueError(f"horizon must be >= 2, got {horizon}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must be in (0,1), got {delta}")
    log_t = math.log2(horizon)
    return 4.0 * c_clip * log_t**1.5 * math.sqrt(d * math.log(2 * horizon / delta)) / mu


# ---------------------------------------------------------------------------
# workloads and strategy matrices


def build_workload(kind: str, k: int, b: int, momentum: float = 0.0,
                   decay: float = 1.0) -> np.ndarray:
    """Lower-triangular workload for kb steps.

    ones:            A (prefix sums; plain SGD iterates)
    momentum:        M @ A, where M is the Toeplitz momentum matrix with
                     entries momentum^(i-j), so (M A)_{i,j} = sum of the
                     first i-j+1 momentum powers
    momentum_decay:  M @ A @ L with L_{i,j} = decay^(i-j): the rows of
                     A @ L reconstruct the decayed recursion
                     grad_t = decay * grad_{t-1} + delta_t
    """
    if k < 1 or b < 1:
        raise ValueError(f"k and b must be >= 1, got k={k}, b={b}")
    n = k * b
    prefix = np.tril(np.ones((n, n)))
    if kind == "ones":
        return prefix
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0,1), got {momentum}")
    idx = np.arange(n)
    powers = idx[:, None] - idx[None, :]
    mom = np.where(powers >= 0, momentum ** np.maximum(powers, 0), 0.0)
    if kind == "momentum":
        return mom @ prefix
    if kind == "momentum_decay":
        if not 0.0 < decay <= 1.0:
            raise ValueError(f"decay must be in (0,1], got {decay}")
        dec = np.where(powers >= 0, decay ** np.maximum(powers, 0), 0.0)
        return mom @ prefix @ dec
    raise ValueError(f"unknown workload kind {kind!r}")


def column_group_sens(c_mat: np.ndarray, k: int, b: int) -> float:
    """max over batch positions j of || sum_{epoch i} C[:, i*b + j] ||_2."""
    n = k * b
    if c_mat.shape != (n, n):
        raise ValueError(f"C shape {c_mat.shape} != ({n}, {n})")
    group_sums = c_mat.reshape(n, k, b).sum(axis=1)
    return float(np.max(np.linalg.norm(group_sums, axis=0)))


@dataclass
class StrategyMatrix:
    """Lower-triangular noise-shaping matrix with its workload and
    factorization metadata. sens is the multi-epoch column-group
    sensitivity; the privacy calibration of the Z stream assumes sens <= 1.
    """

    C: np.ndarray
    workload: np.ndarray
    kind: str
    k: int
    b: int
    momentum: float
    decay: float
    sens: float
    objective: float
    converged: bool | None = None

    @property
    def steps(self) -> int:
        return self.k * self.b

    def check(self, tol: float = 1e-9):
        if self.sens > 1.0 + tol:
            raise ValueError(f"strategy sensitivity {self.sens} exceeds 1")
        if np.any(np.diag(self.C) <= 0):
            raise ValueError("strategy diagonal must be strictly positive")


def _objective(workload: np.ndarray, c_mat: np.ndarray) -> float:
    n = c_mat.shape[0]
    c_inv = solve_triangular(c_mat, np.eye(n), lower=True)
    return float(np.linalg.norm(workload @ c_inv))


def _project_feasible(c_mat: np.ndarray, k: int, b: int) -> np.ndarray:
    """Rescale column groups violating the sensitivity constraint, then
    scale the whole matrix up so the binding group sits exactly at 1.

    Uniform upscaling strictly reduces ||W C^{-1}||_F, so the projection
    never moves away from the optimum along the scale direction.
    """
    n = k * b
    out = c_mat.copy()
    norms = np.linalg.norm(out.reshape(n, k, b).sum(axis=1), axis=0)
    for j in range(b):
        if norms[j] > 1.0:
            out[:, j::b] /= norms[j]
            norms[j] = 1.0
    peak = float(np.max(norms))
    if 0.0 < peak < 1.0:
        out /= peak
    return out


def tree_matrix_factorization(n: int) -> tuple[np.ndarray, np.ndarray]:
    """The binary tree mechanism as prefix = B_dec @ C_node factorization.

    C_node rows are node membership indicators over steps 1..n (one row per
    materialized odd node); B_dec rows select each prefix's dyadic
    decomposition. B_dec @ C_node equals the lower-triangular all-ones A.
    """
    depth = ceil_log2(n)
    nodes = []
    for k in range(depth + 1):
        j_max = (n - 1) // (1 << k) + 1
        nodes.extend((j, k) for j in range(1, j_max + 1, 2))
    nodes.sort(key=lambda jk: (jk[1], jk[0]))
    index = {jk: r for r, jk in enumerate(nodes)}
    c_node = np.zeros((len(nodes), n))
    for i in range(1, n + 1):
        for jk in covering_nodes(i, depth):
            c_node[index[jk], i - 1] = 1.0
    b_dec = np.zeros((n, len(nodes)))
    for i in range(1, n + 1):
        for jk in prefix_nodes(i):
            b_dec[i - 1, index[jk]] = 1.0
    return b_dec, c_node


def tree_baseline_objective(workload: np.ndarray, k: int, b: int) -> float:
    """Error objective of the binary tree factorization scaled to unit
    sensitivity, for an arbitrary lower-triangular workload W.

    The tree releases noisy prefixes, so a consumer of W re-weights them by
    W A^{-1}; the error matrix is then (W A^{-1}) B_dec and the sensitivity
    is the column-group norm of the node-membership matrix.
    """
    n = k * b
    b_dec, c_node = tree_matrix_factorization(n)
    # A^{-1} is bidiagonal: 1 on the diagonal, -1 below it
    a_inv = np.eye(n) - np.eye(n, k=-1)
    error_part = float(np.linalg.norm(workload @ a_inv @ b_dec))
    groups = c_node.reshape(c_node.shape[0], k, b).sum(axis=1)
    sens = float(np.max(np.linalg.norm(groups, axis=0)))
    return error_part * sens


def tree_strategy_matrix(n: int) -> np.ndarray:
    """Square lower-triangular embedding of the tree mechanism.

    Choose C so that A C^{-1} Z has exactly the tree's prefix-noise
    covariance: A C^{-1} = chol(B_dec B_dec^T), i.e. C = chol^{-1} A.
    The result is not yet normalized to unit sensitivity.
    """
    b_dec, _ = tree_matrix_factorization(n)
    cov = b_dec @ b_dec.T
    chol = np.linalg.cholesky(cov)
    prefix = np.tril(np.ones((n, n)))
    return solve_triangular(chol, prefix, lower=True)


def factorize(workload: np.ndarray, k: int, b: int, iterations: int = 2000,
              tol: float = 1e-8, kind: str | None = None,
              momentum: float = 0.0, decay: float = 1.0) -> StrategyMatrix:
    """Minimize ||W C^{-1}||_F over lower-triangular C subject to the
    column-group sensitivity constraint, by projected gradient descent with
    backtracking line search.

    Starts from the square binary-tree embedding, keeps the best feasible
    iterate seen, and reports convergence once the relative objective
    improvement stays below tol. Deterministic.
    """
    workload = np.asarray(workload, dtype=np.float64)
    n = k * b
    if workload.shape != (n, n):
        raise ValueError(f"workload shape {workload.shape} != ({n}, {n})")
    if np.any(np.abs(np.triu(workload, 1)) > 0):
        raise ValueError("workload must be lower-triangular")

    c_mat = _project_feasible(tree_strategy_matrix(n), k, b)
    obj = _objective(workload, c_mat)
    best_c, best_obj = c_mat.copy(), obj
    wtw = workload.T @ workload
    step = 1.0
    stalled = 0
    converged = False
    eye = np.eye(n)

    for _ in range(iterations):
        c_inv = solve_triangular(c_mat, eye, lower=True)
        grad = -2.0 * c_inv.T @ wtw @ c_inv @ c_inv.T
        grad = np.tril(grad)
        gnorm = float(np.linalg.norm(grad))
        if gnorm == 0.0:
            converged = True
            break
        improved = False
        trial_step = step
        for _ in range(40):
            cand = _project_feasible(c_mat - trial_step * grad, k, b)
            if np.all(np.diag(cand) > 1e-12):
                cand_obj = _objective(workload, cand)
                if cand_obj < obj:
                    improved = True
                    break
            trial_step *= 0.5
        if not improved:
            converged = True
            break
        rel_gain = (obj - cand_obj) / obj
        c_mat, obj = cand, cand_obj
        step = trial_step * 1.3
        if obj < best_obj:
            best_c, best_obj = c_mat.copy(), obj
        stalled = stalled + 1 if rel_gain < tol else 0
        if stalled >= 5:
            converged = True
            break

    if kind is None:
        kind = "ones" if np.array_equal(workload, np.tril(np.ones((n, n)))) else "custom"
    return StrategyMatrix(
        C=best_c, workload=workload, kind=kind, k=k, b=b,
        momentum=momentum, decay=decay,
        sens=column_group_sens(best_c, k, b),
        objective=best_obj, converged=converged,
    )


def identity_strategy(n: int) -> StrategyMatrix:
    """Input-perturbation strategy C = I (white per-step noise)."""
    eye = np.eye(n)
    return StrategyMatrix(
        C=eye, workload=np.tril(np.ones((n, n))), kind="identity",
        k=1, b=n, momentum=0.0, decay=1.0, sens=1.0,
        objective=float(np.linalg.norm(np.tril(np.ones((n, n))))),
        converged=True,
    )


def strategy_from_matrix(c_mat: np.ndarray, workload: np.ndarray, k: int, b: int,
                         kind: str = "custom", momentum: float = 0.0,
                         decay: float = 1.0,
                         converged: bool | None = None) -> StrategyMatrix:
    c_mat = np.asarray(c_mat, dtype=np.float64)
    return StrategyMatrix(
        C=c_mat, workload=np.asarray(workload, dtype=np.float64), kind=kind,
        k=k, b=b, momentum=momentum, decay=decay,
        sens=column_group_sens(c_mat, k, b),
        objective=_objective(workload, c_mat), converged=converged,
    )


# ---------------------------------------------------------------------------
# correlated noise streams


def forward_substitution_rows(c_mat: np.ndarray, z_rows):
    """Yield rows of C^{-1} Z one at a time given an iterator of Z rows.

    Row t is emitted after consuming Z rows 1..t only, so the stream is
    causal: later Z rows cannot affect earlier outputs.
    """
    n = c_mat.shape[0]
    solved = None
    for t, z in enumerate(z_rows):
        if t >= n:
            break
        z = np.asarray(z, dtype=np.float64)
        if solved is None:
            solved = np.empty((n, z.shape[0]))
        acc = z if t == 0 else z - c_mat[t, :t] @ solved[:t]
        solved[t] = acc / c_mat[t, t]
        yield solved[t].copy()


def mf_noise_stream(strategy: StrategyMatrix, rho: float, d: int, seed: int):
    """Stream the kb rows of C^{-1} Z with Z entries i.i.d. N(0, 1/(2 rho))
    per coordinate. rho = inf yields the all-zero stream.

    The Z scale assumes the protected stream has unit per-example
    sensitivity; callers releasing streams with sensitivity s must multiply
    the rows by s.
    """
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho}")
    diag = np.diag(strategy.C)
    if np.any(diag == 0):
        raise np.linalg.LinAlgError("strategy matrix is singular")
    scale = 0.0 if math.isinf(rho) else math.sqrt(1.0 / (2.0 * rho))
    rng = np.random.default_rng(seed)
    n = strategy.steps

    def z_rows():
        for _ in range(n):
            yield rng.standard_normal(d) * scale

    yield from forward_substitution_rows(strategy.C, z_rows())


# ---------------------------------------------------------------------------
# serialization

_MAGIC = b"DPMF"
_KINDS = ["ones", "momentum", "momentum_decay", "identity", "custom"]
_HEADER = struct.Struct("<4sIIIIdd")


def save_strategy(strategy: StrategyMatrix, path) -> None:
    """Flat binary layout: header (magic, kb, k, b, kind, momentum, decay)
    followed by the row-major float64 lower triangle of C."""
    n = strategy.steps
    tri = np.concatenate([strategy.C[i, :i + 1] for i in range(n)])
    header = _HEADER.pack(_MAGIC, n, strategy.k, strategy.b,
                          _KINDS.index(strategy.kind),
                          strategy.momentum, strategy.decay)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(tri.astype("<f8").tobytes())


def load_strategy(path) -> StrategyMatrix:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        magic, n, k, b, kind_id, momentum, decay = _HEADER.unpack(raw)
        if magic != _MAGIC:
            raise ValueError(f"bad magic {magic!r} in {path}")
        if n != k * b:
            raise ValueError(f"inconsistent header: kb={n} but k={k}, b={b}")
        body = np.frombuffer(fh.read(), dtype="<f8")
    expected = n * (n + 1) // 2
    if body.shape[0] != expected:
        raise ValueError(f"expected {expected} triangle entries, got {body.shape[0]}")
    c_mat = np.zeros((n, n))
    pos = 0
    for i in range(n):
        c_mat[i, :i + 1] = body[pos:pos + i + 1]
        pos += i + 1
    kind = _KINDS[kind_id]
    if kind in ("ones", "momentum", "momentum_decay"):
        workload = build_workload(kind, k, b, momentum, decay)
    else:
        workload = np.tril(np.ones((n, n)))
    return strategy_from_matrix(c_mat, workload, k, b, kind, momentum, decay)
