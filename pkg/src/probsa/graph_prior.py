"""Graph Laplacian algebra for the attention smoothness prior.

The prior over attention logits is ``p(f) ∝ exp(-fᵀLf)``, i.e. an (improper)
Gaussian with precision ``2L``. All products with ``L`` go through the sparse
edge list; dense matrices are never formed here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from . import autodiff as ad
from .data import AdjacencyGraph


@dataclass(frozen=True, eq=False)
class Laplacian:
    graph: AdjacencyGraph
    jitter: float = 0.0

    def __post_init__(self):
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def degree(self) -> np.ndarray:
        return self.graph.degree

    def matvec(self, v: np.ndarray) -> np.ndarray:
        """Compute ``L v`` (without jitter) from the edge list."""
        g = self.graph
        v = np.asarray(v, dtype=np.float64)
        diff = g.weight * (v[g.src] - v[g.dst])
        return (np.bincount(g.src, weights=diff, minlength=g.n)
                - np.bincount(g.dst, weights=diff, minlength=g.n))

    def sparse(self) -> sparse.csr_matrix:
        return (sparse.diags(self.graph.degree) - self.graph.adjacency()).tocsr()

    def trace(self) -> float:
        return float(self.graph.degree.sum())

    def logdet_precision(self) -> float:
        """log|2L + jitter·I|; needs ``jitter > 0`` (L itself is singular)."""
        if self.jitter <= 0:
            raise ValueError("log-determinant of the prior precision needs jitter > 0")
        prec = (2.0 * self.sparse() + self.jitter * sparse.identity(self.n)).tocsc()
        lu = splinalg.splu(prec)
        return float(np.sum(np.log(np.abs(lu.U.diagonal()))))


def _check_len(f, n: int, name: str = "f") -> None:
    if f.shape != (n,):
        raise ValueError(f"{name} has shape {f.shape}, graph has {n} nodes")


def dirichlet_energy(f, graph: AdjacencyGraph) -> ad.Tensor:
    """fᵀLf, differentiable in ``f`` with gradient 2Lf."""
    f = ad.as_tensor(f)
    _check_len(f, graph.n)
    lap = Laplacian(graph)
    lf = lap.matvec(f.data)
    return ad.custom(f.data @ lf, (f,), lambda g: (2.0 * g * lf,), "dirichlet_energy")


def dirichlet_energy_edges(f: np.ndarray, graph: AdjacencyGraph) -> float:
    """½ΣᵢΣⱼ Aᵢⱼ(fᵢ − fⱼ)², summed directly over stored edges."""
    f = np.asarray(f, dtype=np.float64)
    _check_len(f, graph.n)
    d = f[graph.src] - f[graph.dst]
    return float(np.sum(graph.weight * d * d))


def prior_logdensity_unnormalized(f, graph: AdjacencyGraph) -> float:
    return -float(dirichlet_energy(np.asarray(f, dtype=np.float64), graph).data)


def kl_gaussian_prior(mu, sigma2, lap: Laplacian | AdjacencyGraph,
                      include_constants: bool = False) -> ad.Tensor:
    """KL between N(mu, diag(sigma2)) and the smoothness prior.

    By default returns the trainable part ``muᵀLmu + Tr(L·diag(sigma2)) −
    ½Σ log sigma2``. With ``include_constants=True`` the prior precision is
    taken as ``2L + jitter·I`` (jitter must be positive) and the complete
    Gaussian KL is returned, constants included.
    """
    if isinstance(lap, AdjacencyGraph):
        lap = Laplacian(lap)
    mu, sigma2 = ad.as_tensor(mu), ad.as_tensor(sigma2)
    _check_len(mu, lap.n, "mu")
    _check_len(sigma2, lap.n, "sigma2")
    if np.any(sigma2.data <= 0):
        raise ValueError("sigma2 must be strictly positive")
    energy = dirichlet_energy(mu, lap.graph)
    trace = ad.dot(sigma2, lap.degree)
    logdet = ad.tsum(ad.log(sigma2))
    kl = energy + trace - 0.5 * logdet
    if include_constants:
        eps = lap.jitter
        if eps <= 0:
            raise ValueError("constants are only defined for jitter > 0")
        jit = 0.5 * eps * (ad.tsum(sigma2) + ad.dot(mu, mu))
        kl = kl + jit - 0.5 * lap.n - 0.5 * lap.logdet_precision()
    return kl
