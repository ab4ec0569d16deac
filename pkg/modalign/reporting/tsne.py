"""
Exact t-SNE over a few thousand embeddings at most: per-point Gaussian
bandwidths found by binary search on the perplexity, symmetrised input
affinities, a Student-t kernel in 2D and gradient descent with gains,
momentum and early exaggeration.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.distance import pdist, squareform

from modalign import get_logger
from modalign.config import TSNEConfig
from modalign.exceptions import InvalidInput

__all__ = ["MAX_POINTS", "TSNEResult", "joint_probabilities", "tsne_embed"]

logger = get_logger()

MAX_POINTS = 5000
MIN_PROBABILITY = 1e-12
MIN_GAIN = 0.01


@dataclass
class TSNEResult:
    embedding: np.ndarray
    kl_after_exaggeration: Optional[float]
    kl_final: float
    learning_rate: float


def _conditional_row(
    distances: np.ndarray,
    perplexity: float,
    tolerance: float = 1e-5,
    steps: int = 100,
) -> np.ndarray:
    target = np.log(perplexity)
    shifted = distances - distances.min()
    beta, low, high = 1.0, 0.0, np.inf
    for _ in range(steps):
        weights = np.exp(-beta * shifted)
        total = weights.sum()
        entropy = np.log(total) + beta * np.dot(shifted, weights) / total
        if abs(entropy - target) < tolerance:
            break
        if entropy > target:
            low = beta
            beta = beta * 2.0 if np.isinf(high) else (beta + high) / 2.0
        else:
            high = beta
            beta = (beta + low) / 2.0
    return weights / total


def joint_probabilities(data: np.ndarray, perplexity: float) -> np.ndarray:
    """
    Symmetric `[N, N]` input affinities summing to one, with a zero
    diagonal before clipping.
    """
    n = len(data)
    distances = squareform(pdist(data, "sqeuclidean"))
    conditional = np.zeros((n, n))
    for i in range(n):
        others = np.arange(n) != i
        conditional[i, others] = _conditional_row(
            distances[i, others], perplexity
        )
    joint = (conditional + conditional.T) / (2.0 * n)
    return np.maximum(joint, MIN_PROBABILITY)


def _kl_and_gradient(p: np.ndarray, y: np.ndarray):
    kernel = 1.0 / (1.0 + squareform(pdist(y, "sqeuclidean")))
    np.fill_diagonal(kernel, 0.0)
    q = np.maximum(kernel / kernel.sum(), MIN_PROBABILITY)
    pq = (p - q) * kernel
    gradient = 4.0 * (np.diag(pq.sum(axis=1)) - pq) @ y
    kl = float(np.sum(p * np.log(p / q)))
    return kl, gradient


def tsne_embed(
    embeddings: np.ndarray, config: Optional[TSNEConfig] = None
) -> TSNEResult:
    """
    Embed `[N, E]` vectors in 2D. The result only depends on the inputs and
    the config, its seed included.
    """
    config = config or TSNEConfig()
    config.validate()
    data = np.asarray(embeddings, dtype=np.float64)
    if data.ndim != 2 or not np.all(np.isfinite(data)):
        raise InvalidInput("t-SNE expects a finite [N, E] matrix")
    n = len(data)
    if n > MAX_POINTS:
        raise InvalidInput(
            f"Exact t-SNE is limited to {MAX_POINTS} points, got {n}"
        )
    if 3 * config.perplexity >= n:
        raise InvalidInput(
            f"Perplexity {config.perplexity} is infeasible for {n} points, "
            "it must stay below N / 3"
        )

    p = joint_probabilities(data, config.perplexity)
    learning_rate = config.learning_rate or max(
        n / config.early_exaggeration / 4.0, 50.0
    )

    rng = np.random.default_rng(config.seed)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    kl_after_exaggeration = None

    for iteration in range(config.iterations):
        if iteration == config.exaggeration_iterations:
            kl_after_exaggeration, _ = _kl_and_gradient(p, y)
            logger.debug(
                f"t-SNE KL after exaggeration: {kl_after_exaggeration:.6f}"
            )
        exaggerating = iteration < config.exaggeration_iterations
        target = p * config.early_exaggeration if exaggerating else p
        momentum = 0.5 if iteration < config.momentum_switch else 0.8

        _, gradient = _kl_and_gradient(target, y)
        increase = update * gradient < 0.0
        gains = np.where(increase, gains + 0.2, gains * 0.8)
        np.clip(gains, MIN_GAIN, None, out=gains)
        update = momentum * update - learning_rate * gains * gradient
        y = y + update
        y = y - y.mean(axis=0)

    kl_final, _ = _kl_and_gradient(p, y)
    logger.debug(f"t-SNE final KL: {kl_final:.6f}")
    return TSNEResult(
        embedding=y,
        kl_after_exaggeration=kl_after_exaggeration,
        kl_final=kl_final,
        learning_rate=float(learning_rate),
    )
