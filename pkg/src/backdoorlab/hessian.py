"""Loss-surface sharpness probes: top eigenvalue, trace, and spectral density.

The loss Hessian over a clean dataset is never materialized; probes see it
only through Hessian-vector products realized by central finite differences
of the full-batch gradient,

    H v ~= (grad(theta + h u) - grad(theta - h u)) / (2 h) * ||v||,
    u = v / ||v||,  h = 1e-4.

Three estimators build on that operator:

* power iteration with a Rayleigh-quotient stopping rule for the dominant
  eigenvalue,
* the Hutchinson estimator (mean of z^T H z over rademacher probes) for the
  trace, with a standard error over probes,
* stochastic Lanczos quadrature for the eigen spectral density: each probe
  runs a k-step Lanczos expansion with full reorthogonalization (cheap at
  desk scale, and it suppresses the ghost eigenvalues that plain Lanczos
  produces in floating point); the tridiagonal eigenpairs give Gaussian
  quadrature nodes and weights, averaged over probes and smoothed into a
  histogram with a Gaussian kernel one bin wide.

Every probe works on a private copy of the parameter vector; the probed
network is bit-identical before and after.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .model import Network, loss_and_grad
from .numerics import RngState, draw_gaussian, draw_rademacher


class ProbeError(ValueError):
    """A probe was given an unusable input (e.g. the zero vector)."""


DEFAULT_FD_STEP = 1e-4
DEFAULT_DATA_CAP = 2048


# ---------------------------------------------------------------------------
# matvec-level estimators (tested directly against dense oracles)
# ---------------------------------------------------------------------------

def fd_hvp(grad_fn, theta: np.ndarray, v: np.ndarray, h: float = DEFAULT_FD_STEP) -> np.ndarray:
    """Central-difference Hessian-vector product of a generic gradient field."""
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ProbeError("hvp probe vector must be nonzero")
    u = v / norm
    g_plus = grad_fn(theta + h * u)
    g_minus = grad_fn(theta - h * u)
    return (g_plus - g_minus) / (2.0 * h) * norm


def power_iteration(matvec, dim: int, rng: RngState,
                    max_iters: int = 100, tol: float = 1e-3):
    """Dominant eigenvalue by power iteration; returns (value, converged, iters).

    Convergence: successive Rayleigh quotients differ by <= tol * max(1, |lam|).
    The returned value is the signed Rayleigh quotient of the final vector.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    v = draw_gaussian(rng.derive("power-start"), dim)
    v /= np.linalg.norm(v)
    lam_prev = None
    for it in range(1, max_iters + 1):
        w = matvec(v)
        lam = float(v @ w)
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0, True, it
        v = w / norm
        if lam_prev is not None and abs(lam - lam_prev) <= tol * max(1.0, abs(lam)):
            return lam, True, it
        lam_prev = lam
    return lam_prev if lam_prev is not None else 0.0, False, max_iters


def hutchinson_trace(matvec, dim: int, rng: RngState, probes: int = 100):
    """Trace estimate: mean of z^T (H z) over rademacher probes, with stderr."""
    if probes < 2:
        raise ValueError("hutchinson needs probes >= 2")
    streams = rng.derive("trace-probes").split(probes)
    samples = np.empty(probes)
    for i in range(probes):
        z = draw_rademacher(streams[i], dim)
        samples[i] = float(z @ matvec(z))
    stderr = float(samples.std(ddof=1) / np.sqrt(probes))
    return float(samples.mean()), stderr


_LANCZOS_BREAKDOWN = 1e-10


def lanczos_tridiagonal(matvec, dim: int, start: np.ndarray, k: int):
    """k-step Lanczos with full reorthogonalization.

    Returns (alphas, betas) possibly truncated early when the residual norm
    falls below the breakdown threshold (the expansion is then exact and the
    shorter tridiagonal matrix is still a valid quadrature rule).
    """
    if k < 2:
        raise ValueError("lanczos needs k >= 2")
    q = start / np.linalg.norm(start)
    basis = np.zeros((min(k, dim), dim))
    basis[0] = q
    alphas, betas = [], []
    for j in range(min(k, dim)):
        w = matvec(basis[j])
        alpha = float(basis[j] @ w)
        alphas.append(alpha)
        w = w - alpha * basis[j]
        if j > 0:
            w = w - betas[-1] * basis[j - 1]
        # full reorthogonalization, twice for good measure
        for _ in range(2):
            w = w - basis[: j + 1].T @ (basis[: j + 1] @ w)
        beta = float(np.linalg.norm(w))
        if j + 1 >= min(k, dim):
            break
        if beta <= _LANCZOS_BREAKDOWN:
            break
        betas.append(beta)
        basis[j + 1] = w / beta
    return np.array(alphas), np.array(betas)


def slq_nodes_weights(matvec, dim: int, rng: RngState, k: int, probes: int):
    """Quadrature nodes/weights of the spectral density, averaged over probes."""
    if probes < 1:
        raise ValueError("slq needs probes >= 1")
    streams = rng.derive("slq-probes").split(probes)
    nodes, weights = [], []
    for i in range(probes):
        start = draw_rademacher(streams[i], dim)
        alphas, betas = lanczos_tridiagonal(matvec, dim, start, k)
        t = np.diag(alphas)
        if betas.size:
            t += np.diag(betas, 1) + np.diag(betas, -1)
        evals, evecs = np.linalg.eigh(t)
        nodes.append(evals)
        weights.append(evecs[0, :] ** 2 / probes)
    return np.concatenate(nodes), np.concatenate(weights)


def density_histogram(nodes: np.ndarray, weights: np.ndarray, bins: int,
                      value_range: tuple[float, float] | None = None):
    """Smooth quadrature mass into ``bins`` with a Gaussian kernel one bin wide."""
    if value_range is None:
        lo, hi = float(nodes.min()), float(nodes.max())
        pad = 0.05 * max(hi - lo, 1e-12)
        lo, hi = lo - pad, hi + pad
    else:
        lo, hi = value_range
    width = (hi - lo) / bins
    centers = lo + width * (np.arange(bins) + 0.5)
    sigma = width
    mass = np.exp(-((centers[:, None] - nodes[None, :]) ** 2) / (2.0 * sigma**2)) @ weights
    total = mass.sum()
    if total > 0:
        mass = mass / total
    return centers, mass


# ---------------------------------------------------------------------------
# network-facing probes
# ---------------------------------------------------------------------------

def _grad_fn(net: Network, data: Dataset):
    base = net.copy()

    def grad(theta: np.ndarray) -> np.ndarray:
        base.params[:] = theta
        return loss_and_grad(base, data.images, data.labels, scope="full")[1]

    return grad


def hvp(net: Network, data: Dataset, v: np.ndarray, h: float = DEFAULT_FD_STEP) -> np.ndarray:
    """Hessian-vector product of the clean-data loss at the network's parameters."""
    if data.n == 0:
        raise ProbeError("hvp needs a nonempty dataset")
    snapshot = net.params.copy()
    out = fd_hvp(_grad_fn(net, data), snapshot, np.asarray(v, dtype=np.float64), h)
    assert np.array_equal(net.params, snapshot)  # probes never disturb the model
    return out


def hessian_matvec(net: Network, data: Dataset, h: float = DEFAULT_FD_STEP):
    grad = _grad_fn(net, data)
    theta = net.params.copy()
    return lambda v: fd_hvp(grad, theta, v, h)


def lambda_max(net: Network, data: Dataset, rng: RngState,
               max_iters: int = 100, tol: float = 1e-3) -> float:
    value, _, _ = power_iteration(hessian_matvec(net, data), net.params.size,
                                  rng, max_iters, tol)
    return value


def trace_estimate(net: Network, data: Dataset, rng: RngState, probes: int = 100):
    return hutchinson_trace(hessian_matvec(net, data), net.params.size, rng, probes)


def spectral_density(net: Network, data: Dataset, rng: RngState,
                     lanczos_steps: int = 20, probes: int = 4, bins: int = 40):
    nodes, weights = slq_nodes_weights(hessian_matvec(net, data), net.params.size,
                                       rng, lanczos_steps, probes)
    return density_histogram(nodes, weights, bins)


@dataclass
class SmoothnessReport:
    lambda_max: float
    lambda_max_converged: bool
    power_iters: int
    trace: float
    trace_stderr: float
    trace_probes: int
    density_centers: np.ndarray
    density_weights: np.ndarray
    slq_steps: int
    slq_probes: int
    seed: int
    stream: int
    data_digest: str
    n_samples: int


def smoothness_report(net: Network, data: Dataset, rng: RngState,
                      max_iters: int = 100, tol: float = 1e-3,
                      trace_probes: int = 100, slq_steps: int = 20,
                      slq_probes: int = 4, bins: int = 40,
                      data_cap: int = DEFAULT_DATA_CAP) -> SmoothnessReport:
    """Full sharpness report over at most ``data_cap`` clean samples.

    The subset (the first cap samples) and every seed/probe count are
    recorded so that two models can be compared on identical inputs.
    """
    clean = data.subset(np.where(~data.poisoned)[0]) if data.poisoned.any() else data
    if clean.n > data_cap:
        clean = clean.subset(np.arange(data_cap))
    before = net.params.copy()
    mv = hessian_matvec(net, clean)
    dim = net.params.size
    lam, converged, iters = power_iteration(mv, dim, rng, max_iters, tol)
    tr, stderr = hutchinson_trace(mv, dim, rng, trace_probes)
    nodes, weights = slq_nodes_weights(mv, dim, rng, slq_steps, slq_probes)
    centers, mass = density_histogram(nodes, weights, bins)
    assert np.array_equal(net.params, before)
    return SmoothnessReport(
        lambda_max=lam, lambda_max_converged=converged, power_iters=iters,
        trace=tr, trace_stderr=stderr, trace_probes=trace_probes,
        density_centers=centers, density_weights=mass,
        slq_steps=slq_steps, slq_probes=slq_probes,
        seed=rng.seed, stream=rng.stream,
        data_digest=clean.digest(), n_samples=clean.n,
    )


def write_density_csv(report: SmoothnessReport, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_center", "weight"])
        for c, w in zip(report.density_centers, report.density_weights):
            writer.writerow([f"{c:.12g}", f"{w:.12g}"])


def write_summary_text(report: SmoothnessReport, path) -> None:
    lines = [
        f"lambda_max: {report.lambda_max:.6g}",
        f"lambda_max_converged: {report.lambda_max_converged}",
        f"power_iters: {report.power_iters}",
        f"trace: {report.trace:.6g} +- {report.trace_stderr:.3g} (stderr)",
        f"trace_probes: {report.trace_probes}",
        f"slq_steps: {report.slq_steps}",
        f"slq_probes: {report.slq_probes}",
        f"seed: {report.seed}",
        f"stream: {report.stream}",
        f"data_digest: {report.data_digest}",
        f"n_samples: {report.n_samples}",
    ]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
