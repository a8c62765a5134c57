"""Posterior sampling and MAP estimation over the coefficient vector.

:class:`SpectralLikelihood` maps ``theta`` to the conductivity, runs one
assembly and eigensolve, and returns the log-likelihood (and gradient).
:class:`LogPosterior` adds the Gaussian prior. The samplers and the optimizer
only talk to ``LogPosterior.evaluate``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import fem
from .eigen import default_lambda_cut, solve_lowest
from .errors import (
    ConvergenceError,
    DivergenceError,
    InvalidParameterError,
    NumericalError,
    ParameterOverflowError,
)
from .kernel import (
    DENSITY_FLOOR,
    ObservationSet,
    build_workspace,
    frechet_coefficients,
    log_likelihood,
    loglik_nodal_sensitivity,
)
from .mesh import Mesh
from .prior import ConductivityParam, ParamBasis, PriorSpec, apply_link, sample_prior

logger = logging.getLogger(__name__)


@dataclass
class Evaluation:
    loglik: float
    logprior: float
    grad: np.ndarray | None = None
    n_clamped: int = 0
    n_pairs: int = 0

    @property
    def logpost(self) -> float:
        return self.loglik + self.logprior


class SpectralLikelihood:
    """Truncated spectral log-likelihood of low-frequency observations.

    Parameters
    ----------
    mesh, basis, obs
        Discretisation, parameter basis and data.
    f_min : float
        Conductivity floor of the link ``f = f_min + exp(F)``.
    lambda_cut : float, optional
        Spectral cutoff; by default ``exp(-D * lambda_cut) = 3.7267e-6``.
    j_max : int
        Cap on the number of non-constant eigenpairs.
    tie_threshold : float, optional
        Eigenvalue gap below which divided differences use the derivative form.
    warm_start : bool
        Seed each eigensolve with the previous basis.
    """

    def __init__(
        self,
        mesh: Mesh,
        basis: ParamBasis,
        obs: ObservationSet | None,
        f_min: float = 0.1,
        lambda_cut: float | None = None,
        j_max: int = 200,
        tie_threshold: float | None = None,
        density_floor: float = DENSITY_FLOOR,
        warm_start: bool = True,
    ):
        self.mesh = mesh
        self.basis = basis
        self.obs = obs
        self.f_min = f_min
        self.lambda_cut = lambda_cut if lambda_cut is not None else default_lambda_cut(obs.D if obs else 0.05)
        self.j_max = j_max
        self.tie_threshold = tie_threshold
        self.density_floor = density_floor
        self.warm_start = warm_start
        self.M = fem.assemble_mass(mesh)
        self._k_hint = None
        self._v0 = None
        self.n_solves = 0
        self.last_workspace = None

    @property
    def n(self) -> int:
        return 0 if self.obs is None else self.obs.n

    def param(self, theta) -> ConductivityParam:
        return ConductivityParam(np.asarray(theta, dtype=float), self.basis, self.f_min)

    def eigensolve(self, f):
        K = fem.assemble_stiffness(self.mesh, f)
        basis = solve_lowest(
            K,
            self.M,
            self.lambda_cut,
            self.j_max,
            f_snapshot=f,
            k_hint=self._k_hint if self.warm_start else None,
            v0=self._v0 if self.warm_start else None,
        )
        self.n_solves += 1
        if self.warm_start:
            self._k_hint = basis.n_pairs + 3
            self._v0 = basis.eigenvectors[:, 1:].sum(axis=1)
        return basis

    def workspace(self, theta):
        param = self.param(theta)
        f, dphi = apply_link(param, self.mesh)
        basis = self.eigensolve(f)
        ws = build_workspace(self.mesh, basis, self.obs, self.density_floor)
        self.last_workspace = ws
        return ws, param, dphi

    def __call__(self, theta, gradient: bool = False):
        """Return ``(loglik, grad or None, n_clamped, n_pairs)``."""
        theta = np.asarray(theta, dtype=float)
        if self.n == 0:
            self.param(theta)
            return 0.0, (np.zeros_like(theta) if gradient else None), 0, 0
        ws, param, dphi = self.workspace(theta)
        ll = log_likelihood(ws)
        if not np.isfinite(ll.value):
            raise ConvergenceError("non-finite log-likelihood; the discretised operator is unreliable here")
        grad = None
        if gradient:
            coeffs = frechet_coefficients(ws.basis, ws.D, self.tie_threshold)
            s = loglik_nodal_sensitivity(ws, coeffs)
            grad = self.basis.transpose_apply(s * dphi)
        return ll.value, grad, ll.n_clamped, ws.basis.n_pairs


class QuadraticLikelihood:
    """Test likelihood ``-(theta - a)' Q (theta - a) / 2`` with a closed-form MAP."""

    def __init__(self, a, Q):
        self.a = np.asarray(a, dtype=float)
        self.Q = np.asarray(Q, dtype=float)
        self.n_solves = 0

    def __call__(self, theta, gradient: bool = False):
        d = np.asarray(theta, dtype=float) - self.a
        Qd = self.Q @ d
        return -0.5 * float(d @ Qd), (-Qd if gradient else None), 0, 0

    def map_estimate(self, prior: PriorSpec) -> np.ndarray:
        P = np.atleast_2d(prior.precision_diag_or_full())
        P = np.diag(P.ravel()) if P.shape[0] == 1 else P
        return np.linalg.solve(self.Q + P, self.Q @ self.a)


class LogPosterior:
    """Unnormalised log-posterior ``loglik(theta) - theta' C^{-1} theta / 2``."""

    def __init__(self, likelihood, prior: PriorSpec):
        self.likelihood = likelihood
        self.prior = prior

    @property
    def dim(self) -> int:
        return self.prior.dim

    def evaluate(self, theta, gradient: bool = False) -> Evaluation:
        theta = np.asarray(theta, dtype=float)
        ll, g, clamps, pairs = self.likelihood(theta, gradient)
        lp = self.prior.log_density(theta)
        if gradient:
            g = g - self.prior.precision_times(theta)
        return Evaluation(ll, lp, g, clamps, pairs)


@dataclass
class RunConfig:
    """Settings of one sampler or optimizer run.

    ``init`` is one of ``cold`` (zeros), ``warm`` / ``custom`` (``init_theta``)
    or ``random_prior`` (a prior draw from the run's generator).
    """

    method: str = "pcn"
    step: float = 1e-3
    iterations: int = 1000
    burnin: int = 0
    seed: int = 0
    init: str = "cold"
    init_theta: np.ndarray | None = None
    thinning: int = 1
    adapt: bool = False
    target_accept: float = 0.3
    tol_stop: float | None = None
    divergence_bound: float = 1e6

    def validate(self):
        if self.method not in ("pcn", "ula", "map"):
            raise InvalidParameterError(f"unknown method {self.method!r}")
        if self.step < 0 or (self.method != "pcn" and self.step == 0):
            raise InvalidParameterError("step must be positive")
        if self.method == "pcn" and self.step > 0.5:
            raise InvalidParameterError("pCN step must not exceed 1/2")
        if not self.iterations > self.burnin >= 0:
            raise InvalidParameterError("need iterations > burnin >= 0")
        if self.thinning < 1:
            raise InvalidParameterError("thinning must be >= 1")
        if self.init in ("warm", "custom") and self.init_theta is None:
            raise InvalidParameterError(f"init={self.init!r} requires init_theta")
        if self.init not in ("cold", "warm", "custom", "random_prior"):
            raise InvalidParameterError(f"unknown init {self.init!r}")
        return self


@dataclass
class ChainRecord:
    """Trajectory of a sampler or optimizer.

    Traces hold one entry per iteration and describe the state after the
    move; ``iterates`` keeps every ``thinning``-th state. The starting point
    is kept separately in ``theta0`` / ``loglik0`` / ``logpost0``.
    """

    method: str
    theta0: np.ndarray
    loglik0: float
    logpost0: float
    iterates: list = field(default_factory=list)
    iterate_index: list = field(default_factory=list)
    loglik_trace: list = field(default_factory=list)
    logpost_trace: list = field(default_factory=list)
    accept_flags: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)
    clamp_events: int = 0
    solver_failures: int = 0
    wall_times: list = field(default_factory=list)
    step_trace: list = field(default_factory=list)
    final_step: float | None = None
    converged: bool | None = None
    events: list = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.loglik_trace)

    def theta_array(self) -> np.ndarray:
        return np.asarray(self.iterates)

    def acceptance_ratio(self, burnin: int = 0) -> float:
        flags = np.asarray(self.accept_flags[burnin:], dtype=bool)
        return float(flags.mean()) if flags.size else float("nan")

    @property
    def final(self) -> np.ndarray:
        return np.asarray(self.iterates[-1])


def _initial_theta(cfg: RunConfig, posterior: LogPosterior, rng) -> np.ndarray:
    if cfg.init == "cold":
        return np.zeros(posterior.dim)
    if cfg.init == "random_prior":
        return sample_prior(posterior.prior, rng)
    theta = np.asarray(cfg.init_theta, dtype=float).copy()
    if theta.shape != (posterior.dim,):
        raise InvalidParameterError(f"init_theta has shape {theta.shape}, expected ({posterior.dim},)")
    return theta


def _record(rec: ChainRecord, m: int, theta, ev: Evaluation, cfg: RunConfig, t0: float):
    rec.loglik_trace.append(ev.loglik)
    rec.logpost_trace.append(ev.logpost)
    rec.clamp_events += ev.n_clamped
    rec.wall_times.append(time.perf_counter() - t0)
    if (m + 1) % cfg.thinning == 0:
        rec.iterates.append(np.array(theta, copy=True))
        rec.iterate_index.append(m + 1)


class _DualAveraging:
    """Step-size adaptation of the log pCN step toward a target acceptance rate."""

    def __init__(self, step, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = np.log(10.0 * step)
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.hbar = 0.0
        self.log_bar = np.log(step)
        self.t = 0

    def update(self, accept_prob: float) -> float:
        self.t += 1
        eta = 1.0 / (self.t + self.t0)
        self.hbar = (1.0 - eta) * self.hbar + eta * (self.target - accept_prob)
        log_step = self.mu - np.sqrt(self.t) / self.gamma * self.hbar
        log_step = min(log_step, np.log(0.5))
        w = self.t ** (-self.kappa)
        self.log_bar = w * log_step + (1.0 - w) * self.log_bar
        return float(np.exp(log_step))

    @property
    def final(self) -> float:
        return float(min(np.exp(self.log_bar), 0.5))


def pcn_run(config: RunConfig, posterior: LogPosterior) -> ChainRecord:
    """Preconditioned Crank-Nicolson Metropolis-Hastings chain.

    Proposal ``sqrt(1 - 2 delta) theta + sqrt(2 delta) psi`` with ``psi`` a
    prior draw, accepted with probability ``exp(min(0, loglik(p) - loglik(theta)))``.
    With ``config.adapt`` the step is tuned by dual averaging during burn-in
    and frozen afterwards. A failed eigensolve rejects the proposal.
    """
    cfg = config.validate()
    rng = np.random.default_rng(cfg.seed)
    theta = _initial_theta(cfg, posterior, rng)
    ev = posterior.evaluate(theta)
    rec = ChainRecord("pcn", theta.copy(), ev.loglik, ev.logpost)
    step = cfg.step
    adapt = _DualAveraging(step, cfg.target_accept) if cfg.adapt and cfg.burnin > 0 else None
    t0 = time.perf_counter()
    for m in range(cfg.iterations):
        psi = sample_prior(posterior.prior, rng)
        u = rng.random()
        prop = np.sqrt(1.0 - 2.0 * step) * theta + np.sqrt(2.0 * step) * psi
        try:
            ev_p = posterior.evaluate(prop)
            log_ratio = min(0.0, ev_p.loglik - ev.loglik)
        except NumericalError as exc:
            rec.solver_failures += 1
            rec.events.append({"iteration": m + 1, "event": "proposal_rejected", "reason": str(exc)})
            logger.warning("pCN step %d: proposal rejected after numerical failure: %s", m + 1, exc)
            ev_p, log_ratio = None, -np.inf
        accepted = bool(np.log(u) < log_ratio) if ev_p is not None else False
        if accepted:
            theta, ev = prop, ev_p
        rec.accept_flags.append(accepted)
        rec.step_trace.append(step)
        _record(rec, m, theta, ev, cfg, t0)
        if adapt is not None:
            if m + 1 < cfg.burnin:
                step = adapt.update(float(np.exp(log_ratio)))
            elif m + 1 == cfg.burnin:
                step = adapt.final
                rec.events.append({"iteration": m + 1, "event": "step_frozen", "step": step})
    rec.final_step = step
    return rec


def ula_run(config: RunConfig, posterior: LogPosterior) -> ChainRecord:
    """Unadjusted Langevin chain ``theta + (delta/2) grad log pi + sqrt(delta) xi``.

    A step whose state cannot be evaluated (link overflow, solver failure) is
    retried once with half the step; a second failure aborts the run.
    """
    cfg = config.validate()
    rng = np.random.default_rng(cfg.seed)
    theta = _initial_theta(cfg, posterior, rng)
    ev = posterior.evaluate(theta, gradient=True)
    rec = ChainRecord("ula", theta.copy(), ev.loglik, ev.logpost)
    t0 = time.perf_counter()
    for m in range(cfg.iterations):
        xi = rng.standard_normal(theta.size)
        step = cfg.step
        for attempt in range(2):
            prop = theta + 0.5 * step * ev.grad + np.sqrt(step) * xi
            try:
                ev_new = posterior.evaluate(prop, gradient=True)
                break
            except (ParameterOverflowError, NumericalError) as exc:
                rec.events.append({"iteration": m + 1, "event": "step_halved", "reason": str(exc)})
                logger.warning("ULA step %d failed (%s); retrying with half step", m + 1, exc)
                if attempt == 1:
                    raise NumericalError(f"ULA aborted at iteration {m + 1}: {exc}") from exc
                step *= 0.5
        theta, ev = prop, ev_new
        _record(rec, m, theta, ev, cfg, t0)
    rec.final_step = cfg.step
    return rec


def map_run(config: RunConfig, posterior: LogPosterior) -> tuple[ChainRecord, np.ndarray]:
    """Gradient ascent ``theta + delta grad log pi`` on the log-posterior.

    Stops once ``|theta_{m+1} - theta_m| <= tol_stop`` (default
    ``1e-4 * (1 + |theta_m|)``) or after ``iterations`` steps.

    Raises
    ------
    DivergenceError
        If the iterate norm exceeds ``divergence_bound``.
    """
    cfg = config.validate()
    rng = np.random.default_rng(cfg.seed)
    theta = _initial_theta(cfg, posterior, rng)
    ev = posterior.evaluate(theta, gradient=True)
    rec = ChainRecord("map", theta.copy(), ev.loglik, ev.logpost)
    rec.converged = False
    t0 = time.perf_counter()
    for m in range(cfg.iterations):
        new = theta + cfg.step * ev.grad
        dist = float(np.linalg.norm(new - theta))
        tol = cfg.tol_stop if cfg.tol_stop is not None else 1e-4 * (1.0 + float(np.linalg.norm(theta)))
        if not np.all(np.isfinite(new)) or np.linalg.norm(new) > cfg.divergence_bound:
            raise DivergenceError(f"gradient descent diverged at iteration {m + 1}", trace=rec.step_norms)
        theta = new
        ev = posterior.evaluate(theta, gradient=True)
        rec.step_norms.append(dist)
        _record(rec, m, theta, ev, cfg, t0)
        if dist <= tol:
            rec.converged = True
            break
    if not rec.iterates or rec.iterate_index[-1] != rec.n_steps:
        rec.iterates.append(theta.copy())
        rec.iterate_index.append(rec.n_steps)
    rec.final_step = cfg.step
    return rec, theta


def run(config: RunConfig, posterior: LogPosterior) -> ChainRecord:
    if config.method == "pcn":
        return pcn_run(config, posterior)
    if config.method == "ula":
        return ula_run(config, posterior)
    return map_run(config, posterior)[0]


def posterior_mean(record: ChainRecord, burnin: int = 0, basis: ParamBasis | None = None):
    """Average of the stored iterates after ``burnin`` iterations, and its field."""
    idx = np.asarray(record.iterate_index)
    keep = idx > burnin
    if not keep.any():
        raise InvalidParameterError("no iterates after burn-in")
    theta_bar = np.asarray(record.iterates)[keep].mean(axis=0)
    F_bar = basis.field(theta_bar) if basis is not None else None
    return theta_bar, F_bar


def mass_norm(mesh: Mesh, v) -> float:
    v = np.asarray(v, dtype=float)
    return float(np.sqrt(max(v @ (fem.assemble_mass(mesh) @ v), 0.0)))


def l2_error(mesh: Mesh, F_estimate, F_truth) -> tuple[float, float]:
    """Absolute and relative mass-matrix L2 distance between nodal fields.

    ``F_truth`` may be nodal values or a callable on ``(N, 2)`` points.
    """
    truth = F_truth(mesh.nodes) if callable(F_truth) else np.asarray(F_truth, dtype=float)
    err = mass_norm(mesh, truth - np.asarray(F_estimate, dtype=float))
    return err, err / mass_norm(mesh, truth)


def marginal_histograms(record: ChainRecord, indices, bins=30, burnin: int = 0) -> dict:
    """Post-burn-in histograms of selected coordinates.

    Returns ``{k: (edges, density, mass)}`` where ``mass`` sums to one.
    """
    idx = np.asarray(record.iterate_index)
    chain = np.asarray(record.iterates)[idx > burnin]
    out = {}
    for k in indices:
        counts, edges = np.histogram(chain[:, k], bins=bins)
        mass = counts / counts.sum()
        out[int(k)] = (edges, mass / np.diff(edges), mass)
    return out


def with_step(cfg: RunConfig, step: float) -> RunConfig:
    return replace(cfg, step=step)
