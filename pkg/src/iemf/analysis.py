"""Numerical checks of the modulated-descent theory and landscape geometry.

`verify_contraction` simulates scaled gradient descent on a quadratic and
checks the per-eigendirection recursion alpha_i(t+1) = (1 - eta*xi_t*lambda_i)
* alpha_i(t) step by step (exact for quadratics, whose Hessian is constant).
`sharpness` estimates the maximal loss increase within a parameter ball via
random probes refined by projected gradient ascent. `landscape_slice` exports
a 2-D loss surface along block-normalized random directions, and
`computational_cost` implements the epochs-to-threshold x FLOPs-per-epoch
efficiency metric.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, NumericError
from .model import Batch, MultimodalModel, forward_full
from .tensor import Tape, backward
from .util import (
    STREAM_CONTRACTION,
    STREAM_LANDSCAPE,
    STREAM_SHARPNESS,
    seeded_rng,
    worker_count,
)

# ---------------------------------------------------------------------------
# parameter flattening and model objectives


def param_spans(model: MultimodalModel) -> list[tuple[str, int, int, tuple[int, ...]]]:
    """(param id, start, stop, shape) for a flat parameter vector."""
    spans = []
    offset = 0
    for pid, arr in model.params.items():
        spans.append((pid, offset, offset + arr.size, arr.shape))
        offset += arr.size
    return spans


def flatten_params(model: MultimodalModel) -> np.ndarray:
    return np.concatenate([model.params[pid].reshape(-1) for pid, _, _, _ in param_spans(model)])


def _write_params(model: MultimodalModel, w: np.ndarray, spans) -> None:
    for pid, start, stop, shape in spans:
        model.params[pid] = w[start:stop].reshape(shape).copy()


def _as_batch(data) -> Batch:
    return data.train if hasattr(data, "train") else data


def model_objective(model: MultimodalModel, data):
    """(loss_fn, grad_fn, w0, spans) for the full training objective on a batch.

    Works on an internal clone, so the caller's model is never touched. The
    gradient treats the loss as one scalar function of all parameters (probe
    detachment is lifted): detached heads make the training gradient field
    non-conservative, which would break Hessian symmetry and exact ascent.
    The loss values themselves are identical either way.
    """
    batch = _as_batch(data)
    work = model.clone()
    work.cfg = replace(work.cfg, head_mode="joint")
    spans = param_spans(work)
    w0 = flatten_params(work)

    def loss_fn(w: np.ndarray) -> float:
        _write_params(work, w, spans)
        return forward_full(batch, work, tape=None).loss.item()

    def grad_fn(w: np.ndarray) -> np.ndarray:
        _write_params(work, w, spans)
        tape = Tape()
        out = forward_full(batch, work, tape)
        grads = backward(tape, out.loss)
        return np.concatenate([grads[pid].data.reshape(-1) for pid, _, _, _ in spans])

    return loss_fn, grad_fn, w0, spans


# ---------------------------------------------------------------------------
# contraction check


@dataclass
class QuadraticProblem:
    """Quadratic bowl with loss 0.5 * sum_i lambda_i * alpha_i^2.

    alpha are coordinates of the deviation from the minimizer in the
    eigenbasis; a rotation seed draws a random orthogonal basis, None keeps
    the coordinate basis.
    """

    eigenvalues: list[float]
    alpha0: list[float]
    eta: float
    xi_schedule: list[float]
    w_star: list[float] | None = None
    rotation_seed: int | None = None

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=np.float64)
        if lam.size == 0 or np.any(lam <= 0.0):
            raise ContractError("eigenvalues must be positive")
        if np.any(np.diff(lam) < 0.0):
            raise ContractError("eigenvalues must be sorted ascending")
        if len(self.alpha0) != lam.size:
            raise ContractError("alpha0 must match the eigenvalue count")
        if self.w_star is not None and len(self.w_star) != lam.size:
            raise ContractError("w_star must match the eigenvalue count")
        if not self.eta > 0.0:
            raise ContractError("eta must be positive")
        if len(self.xi_schedule) == 0:
            raise ContractError("xi schedule must be non-empty")
        if any(x <= 0.0 for x in self.xi_schedule):
            raise ContractError("xi values must be positive")


@dataclass
class ContractionReport:
    passed: bool
    diverged: bool
    max_residual: float
    tolerance: float
    step_cases: list[str] = field(repr=False)
    alpha_trace: np.ndarray = field(repr=False)
    norm_trace: list[float] = field(repr=False)


def _orthogonal_basis(d: int, seed: int | None) -> np.ndarray:
    if seed is None:
        return np.eye(d)
    q, r = np.linalg.qr(seeded_rng(seed, STREAM_CONTRACTION).standard_normal((d, d)))
    return q * np.sign(np.diag(r))  # fix the sign convention for determinism


def verify_contraction(problem: QuadraticProblem, steps: int | None = None,
                       tolerance: float = 1e-10) -> ContractionReport:
    """Simulate w <- w - eta*xi_t*grad on the quadratic and check the recursion.

    The expected per-direction factor is (1 - eta*xi_t*lambda_i); each step
    also gets a case label comparing the scaled step eta*xi*lambda against the
    plain eta*lambda. A violated stability bound is reported as divergence,
    not as failure.
    """
    lam = np.asarray(problem.eigenvalues, dtype=np.float64)
    d = lam.size
    if steps is None:
        steps = len(problem.xi_schedule)
    xis = [problem.xi_schedule[t % len(problem.xi_schedule)] for t in range(steps)]
    basis = _orthogonal_basis(d, problem.rotation_seed)
    hessian = basis @ np.diag(lam) @ basis.T
    w_star = (np.zeros(d) if problem.w_star is None
              else np.asarray(problem.w_star, dtype=np.float64))
    alpha = np.asarray(problem.alpha0, dtype=np.float64)
    w = w_star + basis @ alpha

    diverged = bool(problem.eta * max(xis) * lam[-1] >= 2.0)
    traces = [alpha.copy()]
    norms = [float(np.linalg.norm(alpha))]
    cases = []
    max_residual = 0.0
    for xi in xis:
        grad = hessian @ (w - w_star)
        w = w - problem.eta * xi * grad
        alpha_next = basis.T @ (w - w_star)
        expected = (1.0 - problem.eta * xi * lam) * alpha
        max_residual = max(max_residual, float(np.max(np.abs(alpha_next - expected))))
        cases.append("reduced" if xi < 1.0 else ("equal" if xi == 1.0 else "amplified"))
        alpha = alpha_next
        traces.append(alpha.copy())
        norms.append(float(np.linalg.norm(alpha)))
    passed = bool((not diverged) and max_residual <= tolerance)
    return ContractionReport(
        passed=passed,
        diverged=diverged,
        max_residual=max_residual,
        tolerance=tolerance,
        step_cases=cases,
        alpha_trace=np.stack(traces),
        norm_trace=norms,
    )


# ---------------------------------------------------------------------------
# sharpness


@dataclass
class SharpnessReport:
    base_loss: float
    increase: float
    n_probes: int
    ball_radius: float
    per_probe: list[float] = field(repr=False, default_factory=list)


def sharpness_of(loss_fn, grad_fn, w0: np.ndarray, ball_radius: float, n_probes: int = 8,
                 ascent_steps: int = 20, seed: int = 0) -> SharpnessReport:
    """Estimate max loss increase on the radius-rho sphere around w0.

    Each probe starts from a random direction and runs normalized gradient
    ascent re-projected onto the sphere (the maximum of a locally convex loss
    sits on the boundary); the best increase over all evaluations wins. Probes
    draw from one sequential stream, so enlarging n_probes only appends
    probes and can never lower the estimate.
    """
    if not ball_radius > 0.0:
        raise ContractError("ball radius must be positive")
    if n_probes < 1 or ascent_steps < 0:
        raise ContractError("need n_probes >= 1 and ascent_steps >= 0")
    rng = seeded_rng(seed, STREAM_SHARPNESS)
    base = float(loss_fn(w0))
    dim = w0.size
    per_probe = []
    for _ in range(n_probes):
        eps = rng.standard_normal(dim)
        eps *= ball_radius / np.linalg.norm(eps)
        best = float(loss_fn(w0 + eps)) - base
        for _ in range(ascent_steps):
            g = grad_fn(w0 + eps)
            gn = float(np.linalg.norm(g))
            if gn < 1e-18:
                break
            eps = eps + (ball_radius / gn) * g
            eps *= ball_radius / np.linalg.norm(eps)
            best = max(best, float(loss_fn(w0 + eps)) - base)
        per_probe.append(best)
    return SharpnessReport(
        base_loss=base,
        increase=max(per_probe),
        n_probes=n_probes,
        ball_radius=ball_radius,
        per_probe=per_probe,
    )


def sharpness(model: MultimodalModel, data, ball_radius: float, n_probes: int = 8,
              ascent_steps: int = 20, seed: int = 0, blocks: str = "fusion") -> SharpnessReport:
    """Sharpness of the training objective around the model's parameters.

    blocks="fusion" perturbs the fusion layer only (the quantity the
    modulation theory speaks about); blocks="all" perturbs every parameter.
    """
    if blocks not in ("fusion", "all"):
        raise ContractError("blocks must be 'fusion' or 'all'")
    loss_fn, grad_fn, w0, spans = model_objective(model, data)
    if blocks == "all":
        return sharpness_of(loss_fn, grad_fn, w0, ball_radius, n_probes, ascent_steps, seed)
    idx = np.concatenate([
        np.arange(start, stop)
        for pid, start, stop, _ in spans
        if MultimodalModel.group_of(pid) == "fusion"
    ])

    def sub_loss(ws: np.ndarray) -> float:
        w = w0.copy()
        w[idx] = ws
        return loss_fn(w)

    def sub_grad(ws: np.ndarray) -> np.ndarray:
        w = w0.copy()
        w[idx] = ws
        return grad_fn(w)[idx]

    return sharpness_of(sub_loss, sub_grad, w0[idx].copy(), ball_radius, n_probes,
                        ascent_steps, seed)


# ---------------------------------------------------------------------------
# 2-D loss slices


def landscape_grid_of(loss_fn, w0: np.ndarray, blocks: list[tuple[int, int]], grid_n: int,
                      extent: float, seed: int = 0):
    """Loss on a grid over two random directions, each block rescaled to the
    parameter block's norm (zero-norm blocks keep a zero direction)."""
    if grid_n < 3 or grid_n % 2 == 0:
        raise ContractError("grid_n must be an odd integer >= 3")
    if extent < 0.0:
        raise ContractError("extent must be non-negative")
    rng = seeded_rng(seed, STREAM_LANDSCAPE)

    def direction() -> np.ndarray:
        d = rng.standard_normal(w0.size)
        for start, stop in blocks:
            wn = np.linalg.norm(w0[start:stop])
            dn = np.linalg.norm(d[start:stop])
            d[start:stop] *= 0.0 if wn == 0.0 else wn / (dn if dn > 0.0 else 1.0)
        return d

    d1, d2 = direction(), direction()
    coords = np.linspace(-extent, extent, grid_n)
    points = [(ix, iy) for ix in range(grid_n) for iy in range(grid_n)]

    def cell(point):
        ix, iy = point
        return loss_fn(w0 + coords[ix] * d1 + coords[iy] * d2)

    workers = worker_count()
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(cell, points))
    else:
        values = [cell(p) for p in points]
    grid = np.asarray(values, dtype=np.float64).reshape(grid_n, grid_n)
    return coords, coords.copy(), grid


def landscape_slice(model: MultimodalModel, data, grid_n: int, extent: float, seed: int = 0):
    """2-D slice of the training objective around the model's parameters."""
    loss_fn, _, w0, spans = model_objective(model, data)
    blocks = [(start, stop) for _, start, stop, _ in spans]
    return landscape_grid_of(loss_fn, w0, blocks, grid_n, extent, seed)


# ---------------------------------------------------------------------------
# computational cost


@dataclass
class CostReport:
    thresholds: list[float]
    epochs_to_threshold: dict[str, list[int]]
    omega: dict[str, float]
    cost: dict[str, float]
    unreached: dict[str, list[bool]]


def computational_cost(error_curves: dict[str, list[float]], flops: dict[str, float],
                       n_thresholds: int = 5) -> CostReport:
    """Mean over thresholds of (first epoch at or below it) x FLOPs per epoch.

    Thresholds run uniformly from the smallest per-method maximum error down
    to the largest per-method minimum, so every method can reach every level.
    """
    if len(error_curves) < 2:
        raise ContractError("cost comparison needs at least two methods")
    if set(error_curves) != set(flops):
        raise ContractError("error curves and FLOPs must describe the same methods")
    if n_thresholds < 1:
        raise ContractError("need at least one threshold")
    for name, curve in error_curves.items():
        if len(curve) == 0:
            raise ContractError(f"error curve for {name!r} is empty")
    upper = min(max(curve) for curve in error_curves.values())
    lower = max(min(curve) for curve in error_curves.values())
    if upper <= lower:
        raise ContractError(
            f"degenerate threshold range: upper bound {upper!r} <= lower bound {lower!r}"
        )
    thresholds = [float(t) for t in np.linspace(upper, lower, n_thresholds)]
    epochs: dict[str, list[int]] = {}
    unreached: dict[str, list[bool]] = {}
    cost: dict[str, float] = {}
    for name, curve in error_curves.items():
        reached_epochs = []
        missed = []
        for thr in thresholds:
            hit = next((i + 1 for i, err in enumerate(curve) if err <= thr), None)
            missed.append(hit is None)
            reached_epochs.append(hit if hit is not None else len(curve))
        epochs[name] = reached_epochs
        unreached[name] = missed
        cost[name] = (sum(reached_epochs) / n_thresholds) * float(flops[name])
    return CostReport(thresholds=thresholds, epochs_to_threshold=epochs, omega=dict(flops),
                      cost=cost, unreached=unreached)


# ---------------------------------------------------------------------------
# dense Hessian via central differences of the gradient


MAX_DENSE_PARAMS = 2000


def finite_difference_hessian(grad_fn, w0: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Column j = (grad(w + h e_j) - grad(w - h e_j)) / (2h)."""
    dim = w0.size
    hess = np.empty((dim, dim))
    for j in range(dim):
        e = np.zeros(dim)
        e[j] = h
        hess[:, j] = (grad_fn(w0 + e) - grad_fn(w0 - e)) / (2.0 * h)
    return hess


def hessian_eigens(model: MultimodalModel, data, h: float = 1e-4) -> np.ndarray:
    """Ascending eigenvalues of the symmetrized finite-difference Hessian."""
    _, grad_fn, w0, _ = model_objective(model, data)
    if w0.size > MAX_DENSE_PARAMS:
        raise ContractError(
            f"dense Hessian supports at most {MAX_DENSE_PARAMS} parameters, model has {w0.size}"
        )
    hess = finite_difference_hessian(grad_fn, w0, h)
    sym = 0.5 * (hess + hess.T)
    eigenvalues = np.linalg.eigvalsh(sym)
    if not np.all(np.isfinite(eigenvalues)):
        raise NumericError("Hessian eigendecomposition produced non-finite values")
    return eigenvalues
