"""Loss problems: per-example values/gradients plus declared regularity constants.

Two concrete tasks are provided. SyntheticQuadratic has a known population
minimizer, so excess risk and population gradients are exact; it backs the
convergence and sensitivity checks. LogisticTask is multiclass softmax
regression over fixed feature/label arrays with a held-out split.

A "batch" is whatever the problem's per-example methods accept:
an (m, dim) array of example vectors for the synthetic task, an integer
index array for dataset-backed tasks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import clip_rows

__all__ = [
    "LossProblem",
    "SyntheticQuadratic",
    "LogisticTask",
    "GradientNoiseWrapper",
    "grad",
    "batch_grad",
    "srg_increment",
    "population_excess",
    "iid_stream",
    "fixed_batches",
    "repeated_batch_stream",
]


class LossProblem:
    """Base class. Subclasses set dim, lipschitz, smoothness and implement
    the per-example methods."""

    dim: int
    lipschitz: float
    smoothness: float

    def per_example_values(self, x: np.ndarray, batch) -> np.ndarray:
        raise NotImplementedError

    def per_example_grads(self, x: np.ndarray, batch) -> np.ndarray:
        """Gradient of every example in the batch at x, shape (m, dim)."""
        raise NotImplementedError

    def batch_size(self, batch) -> int:
        return len(batch)

    def draw_batch(self, rng: np.random.Generator, size: int):
        raise NotImplementedError

    def population_excess(self, x: np.ndarray) -> float:
        """Excess population risk when the optimum is known, otherwise the
        held-out average loss."""
        raise NotImplementedError

    # Diagnostics; None when the quantity is not analytically available.
    def exact_optimum(self):
        return None

    def population_grad(self, x: np.ndarray):
        return None

    # Hooks the optimizers call. Defaults materialize per-example gradients;
    # subclasses may override with cheaper equivalents.
    def clipped_mean_grad(self, x: np.ndarray, batch, c_clip: float) -> np.ndarray:
        grads = self.per_example_grads(x, batch)
        return clip_rows(grads, c_clip).mean(axis=0)

    def srg_mean(self, x_t, x_prev, w_t: float, w_prev: float, batch,
                 c_clip: float = np.inf) -> np.ndarray:
        """Mean over the batch of clip(w_t*g(x_t,d) - w_prev*g(x_prev,d)).

        Both evaluation points are always visited, so every example in the
        batch costs exactly two gradient evaluations regardless of w_prev.
        """
        g_t = self.per_example_grads(x_t, batch)
        g_p = self.per_example_grads(x_prev, batch)
        diffs = w_t * g_t - w_prev * g_p
        return clip_rows(diffs, c_clip).mean(axis=0)


@dataclass
class SyntheticQuadratic(LossProblem):
    """Per-example loss f(x, d) = (curvature/2) * ||x - d||^2 with examples
    d = target + bounded isotropic noise.

    The declared Lipschitz constant is the induced bound over a ball of
    radius `radius`: curvature * (radius + ||target|| + noise_scale).
    """

    dim: int
    target: np.ndarray
    curvature: float = 1.0
    noise_scale: float = 0.0
    radius: float = 1.0
    lipschitz: float = field(init=False)
    smoothness: float = field(init=False)

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.target.shape != (self.dim,):
            raise ValueError("target shape must match dim")
        self.smoothness = self.curvature
        self.lipschitz = self.curvature * (
            self.radius + float(np.linalg.norm(self.target)) + self.noise_scale
        )

    def per_example_values(self, x, batch) -> np.ndarray:
        diffs = x[None, :] - np.asarray(batch)
        return 0.5 * self.curvature * np.sum(diffs * diffs, axis=1)

    def per_example_grads(self, x, batch) -> np.ndarray:
        return self.curvature * (x[None, :] - np.asarray(batch))

    def draw_batch(self, rng, size):
        raw = rng.standard_normal((size, self.dim)) * (
            self.noise_scale / max(np.sqrt(self.dim), 1.0)
        )
        norms = np.linalg.norm(raw, axis=1)
        over = norms > self.noise_scale
        if np.any(over):
            raw[over] *= (self.noise_scale / norms[over])[:, None]
        return self.target[None, :] + raw

    def population_excess(self, x) -> float:
        d = x - self.target
        return 0.5 * self.curvature * float(d @ d)

    def exact_optimum(self):
        return self.target.copy()

    def population_grad(self, x):
        return self.curvature * (x - self.target)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class LogisticTask(LossProblem):
    """Multiclass softmax regression. Parameters are a (num_classes, p)
    weight matrix stored flat; features already include a bias column.

    Per-example gradients are rank one, outer(softmax_err, phi), which the
    clipped-mean hooks exploit: the clip scale only needs ||softmax_err|| *
    ||phi|| per example, and the clipped mean is a single weighted matmul.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    eval_features: np.ndarray | None = None
    eval_labels: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features/labels shape mismatch")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels out of range")
        self.n_features = self.features.shape[1]
        self.dim = self.num_classes * self.n_features
        max_row = float(np.max(np.linalg.norm(self.features, axis=1)))
        if self.eval_features is not None:
            self.eval_features = np.asarray(self.eval_features, dtype=np.float64)
            self.eval_labels = np.asarray(self.eval_labels, dtype=np.int64)
            max_row = max(max_row, float(np.max(np.linalg.norm(self.eval_features, axis=1))))
        # softmax error vector has norm at most sqrt(2); logit Hessian
        # spectral norm at most 1/2
        self.lipschitz = np.sqrt(2.0) * max_row
        self.smoothness = 0.5 * max_row**2

    @property
    def n_train(self) -> int:
        return self.features.shape[0]

    def _weights(self, x) -> np.ndarray:
        return np.asarray(x).reshape(self.num_classes, self.n_features)

    def _err(self, x, idx) -> np.ndarray:
        """softmax(Wphi) - onehot(y) for the indexed examples, shape (m, K)."""
        phi = self.features[idx]
        probs = _softmax(phi @ self._weights(x).T)
        probs[np.arange(len(idx)), self.labels[idx]] -= 1.0
        return probs

    def per_example_values(self, x, batch) -> np.ndarray:
        idx = np.asarray(batch)
        phi = self.features[idx]
        logits = phi @ self._weights(x).T
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return -log_probs[np.arange(len(idx)), self.labels[idx]]

    def per_example_grads(self, x, batch) -> np.ndarray:
        idx = np.asarray(batch)
        err = self._err(x, idx)
        phi = self.features[idx]
        return np.einsum("mk,mp->mkp", err, phi).reshape(len(idx), self.dim)

    def clipped_mean_grad(self, x, batch, c_clip) -> np.ndarray:
        idx = np.asarray(batch)
        err = self._err(x, idx)
        phi = self.features[idx]
        scale = self._clip_scale(err, phi, c_clip) / len(idx)
        return ((err * scale[:, None]).T @ phi).reshape(self.dim)

    def srg_mean(self, x_t, x_prev, w_t, w_prev, batch, c_clip=np.inf) -> np.ndarray:
        idx = np.asarray(batch)
        err = w_t * self._err(x_t, idx) - w_prev * self._err(x_prev, idx)
        phi = self.features[idx]
        scale = self._clip_scale(err, phi, c_clip) / len(idx)
        return ((err * scale[:, None]).T @ phi).reshape(self.dim)

    @staticmethod
    def _clip_scale(err, phi, c_clip) -> np.ndarray:
        if not np.isfinite(c_clip):
            return np.ones(err.shape[0])
        norms = np.linalg.norm(err, axis=1) * np.linalg.norm(phi, axis=1)
        scale = np.ones_like(norms)
        over = norms > c_clip
        scale[over] = c_clip / norms[over]
        return scale

    def draw_batch(self, rng, size):
        return rng.integers(0, self.n_train, size=size)

    def population_excess(self, x) -> float:
        """Held-out average loss (falls back to the training split)."""
        feats, labels = self.eval_features, self.eval_labels
        if feats is None:
            feats, labels = self.features, self.labels
        logits = feats @ self._weights(x).T
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return float(-log_probs[np.arange(len(labels)), labels].mean())

    def accuracy(self, x, half: str | None = None) -> float:
        """Held-out classification accuracy in percent. half="even"/"odd"
        restricts to alternating indices of the held-out set, giving two
        disjoint subsets for selection versus reporting."""
        feats, labels = self.eval_features, self.eval_labels
        if feats is None:
            feats, labels = self.features, self.labels
        if half == "even":
            feats, labels = feats[0::2], labels[0::2]
        elif half == "odd":
            feats, labels = feats[1::2], labels[1::2]
        elif half is not None:
            raise ValueError(f"half must be 'even', 'odd', or None, got {half!r}")
        pred = (feats @ self._weights(x).T).argmax(axis=1)
        return 100.0 * float((pred == labels).mean())


class GradientNoiseWrapper(LossProblem):
    """Adds a fresh i.i.d. Gaussian perturbation to every per-example
    gradient evaluation. Two evaluations of the same example at the same
    point disagree, which is exactly what the recursive-gradient variance
    probes need."""

    def __init__(self, base: LossProblem, noise_std: float, seed: int):
        self.base = base
        self.noise_std = float(noise_std)
        self.rng = np.random.default_rng(seed)
        self.dim = base.dim
        self.lipschitz = base.lipschitz
        self.smoothness = base.smoothness

    def per_example_values(self, x, batch):
        return self.base.per_example_values(x, batch)

    def per_example_grads(self, x, batch):
        clean = self.base.per_example_grads(x, batch)
        return clean + self.noise_std * self.rng.standard_normal(clean.shape)

    def batch_size(self, batch):
        return self.base.batch_size(batch)

    def draw_batch(self, rng, size):
        return self.base.draw_batch(rng, size)

    def population_excess(self, x):
        return self.base.population_excess(x)

    def exact_optimum(self):
        return self.base.exact_optimum()

    def population_grad(self, x):
        return self.base.population_grad(x)


# ---------------------------------------------------------------------------
# module-level operations


def grad(problem: LossProblem, x: np.ndarray, example) -> np.ndarray:
    """Gradient of a single example's loss at x."""
    batch = _singleton_batch(problem, example)
    return problem.per_example_grads(x, batch)[0]


def batch_grad(problem: LossProblem, x: np.ndarray, batch) -> np.ndarray:
    """Unweighted mean gradient over the batch."""
    return problem.per_example_grads(x, batch).mean(axis=0)


def srg_increment(problem: LossProblem, x_t, x_prev, w_t: float, w_prev: float,
                  batch, c_clip: float = np.inf) -> np.ndarray:
    """Recursive-gradient increment: batch mean of
    clip(w_t * g(x_t, d) - w_prev * g(x_prev, d), c_clip).

    Per-example clipping happens before averaging. Pass x_prev = x_t with
    w_prev = 0 for the first step.
    """
    return problem.srg_mean(x_t, x_prev, w_t, w_prev, batch, c_clip)


def population_excess(problem: LossProblem, x: np.ndarray) -> float:
    return problem.population_excess(x)


def _singleton_batch(problem, example):
    if isinstance(problem, LogisticTask):
        return np.asarray([example])
    arr = np.asarray(example, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :]
    return arr


# ---------------------------------------------------------------------------
# batch streams


def iid_stream(problem: LossProblem, rng: np.random.Generator, steps: int, size: int):
    """Fresh i.i.d. batch per step (single pass over a sampled population)."""
    for _ in range(steps):
        yield problem.draw_batch(rng, size)


def fixed_batches(n: int, size: int):
    """Disjoint contiguous index batches covering [0, n) in order."""
    if n % size != 0:
        raise ValueError(f"batch size {size} does not divide n={n}")
    idx = np.arange(n)
    return [idx[i * size:(i + 1) * size] for i in range(n // size)]


def repeated_batch_stream(batch, steps: int):
    """The same batch every step (full-batch deterministic runs)."""
    for _ in range(steps):
        yield batch
