#!/usr/bin/env python3
"""
ts_search.py - Transition-state search workflow

Endpoint minimization, string-based saddle guess, partitioned rational
function optimization (P-RFO) of the saddle and intrinsic reaction coordinate
(IRC) verification. Works on any surface exposing energy, forces and Hessian,
oracle or learned.
"""

import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from structures import Structure, Surface, rmsd, symmetrize
from thermo import internal_basis


class TsSearchError(RuntimeError):
    """Base class for transition-state search failures."""


class MinimizationError(TsSearchError):
    pass


class SaddleNotConvergedError(TsSearchError):
    pass


class WrongCurvatureIndexError(TsSearchError):
    pass


class IrcDivergenceError(TsSearchError):
    pass


class TsStatus(str, enum.Enum):
    SUCCESS = "Success"
    GUESS_FAILED = "GuessFailed"
    SADDLE_NOT_CONVERGED = "SaddleNotConverged"
    WRONG_CURVATURE_INDEX = "WrongCurvatureIndex"
    IRC_MISMATCH = "IrcMismatch"


class IrcDirection(str, enum.Enum):
    FORWARD = "forward"
    REVERSE = "reverse"


NEGATIVE_EIGEN_TOL = 1e-8  # eV/Å²
MIN_TRUST_RADIUS = 1e-8  # Å
MAX_TRUST_RADIUS = 0.5  # Å


@dataclass(frozen=True)
class TsConfig:
    """Workflow settings; match_tol of 0.05 Å is the usual choice on learned surfaces."""
    n_images: int = 11
    string_sweeps: int = 300
    string_dt: float = 2e-4
    string_clip: float = 0.02
    trust_radius: float = 0.1
    g_tol: float = 1e-6
    min_tol: float = 1e-6
    max_min_iterations: int = 500
    max_saddle_iterations: int = 200
    irc_delta: float = 0.01
    irc_step: float = 0.05
    irc_f_tol: float = 1e-4
    irc_max_steps: int = 2000
    match_tol: float = 1e-3


@dataclass
class OptimizationResult:
    structure: Structure
    energy: float
    iterations: int
    converged: bool


@dataclass
class IrcResult:
    direction: IrcDirection
    endpoint: Structure
    energies: List[float]
    n_steps: int
    converged: bool


@dataclass
class TsReport:
    """Outcome of one reaction; failures are encoded in status, never raised."""
    status: TsStatus
    saddle: Optional[Structure] = None
    saddle_energy: Optional[float] = None
    barrier_forward: Optional[float] = None
    barrier_reverse: Optional[float] = None
    irc_endpoints: Tuple[Optional[Structure], Optional[Structure]] = (None, None)
    endpoint_deviation: Optional[float] = None
    iterations: Dict[str, int] = field(default_factory=dict)
    message: str = ""

    @property
    def success(self) -> bool:
        return self.status == TsStatus.SUCCESS

    def to_dict(self) -> Dict[str, object]:
        def positions(s):
            return None if s is None else s.positions.tolist()

        return {
            "status": self.status.value,
            "saddle": positions(self.saddle),
            "saddle_energy": self.saddle_energy,
            "barrier_forward": self.barrier_forward,
            "barrier_reverse": self.barrier_reverse,
            "irc_endpoints": [positions(s) for s in self.irc_endpoints],
            "endpoint_deviation": self.endpoint_deviation,
            "iterations": dict(self.iterations),
            "message": self.message,
        }


def _basis(surface: Surface, x: np.ndarray) -> Optional[np.ndarray]:
    """Cartesian internal-coordinate basis for rigid-invariant surfaces, None otherwise."""
    if getattr(surface, "rigid_invariant", False) and x.size > 3:
        return internal_basis(x.reshape(-1, 3))
    return None


def _local_model(surface: Surface, s: Structure):
    """Energy, Cartesian gradient, and the projected gradient/Hessian with their basis."""
    x = s.flat_positions
    energy = surface.energy(s)
    grad = -surface.forces(s).reshape(-1)
    hess = symmetrize(surface.hessian(s))
    basis = _basis(surface, x)
    if basis is None:
        return energy, grad, grad, hess, None
    return energy, grad, basis.T @ grad, symmetrize(basis.T @ hess @ basis), basis


def _to_cartesian(step: np.ndarray, basis: Optional[np.ndarray]) -> np.ndarray:
    return step if basis is None else basis @ step


def _clip(step: np.ndarray, trust: float) -> np.ndarray:
    norm = np.linalg.norm(step)
    return step * (trust / norm) if norm > trust else step


def _predicted_change(g: np.ndarray, H: np.ndarray, step: np.ndarray) -> float:
    return float(g @ step + 0.5 * step @ H @ step)


def rfo_min_step(g: np.ndarray, H: np.ndarray, trust: float) -> np.ndarray:
    """Newton step when H is positive definite and it fits the trust region, RFO step otherwise."""
    values, vectors = np.linalg.eigh(H)
    if values[0] > 0:
        newton = -vectors @ ((vectors.T @ g) / values)
        if np.linalg.norm(newton) <= trust:
            return newton
    n = g.size
    augmented = np.zeros((n + 1, n + 1))
    augmented[:n, :n] = H
    augmented[:n, n] = g
    augmented[n, :n] = g
    _, aug_vectors = np.linalg.eigh(augmented)
    v = aug_vectors[:, 0]
    if abs(v[n]) < 1e-14:
        step = v[:n]
    else:
        step = v[:n] / v[n]
    return _clip(step, trust)


def prfo_step(g: np.ndarray, H: np.ndarray, trust: float) -> np.ndarray:
    """
    Partitioned-RFO step: uphill along the lowest mode, downhill along the rest.

    A plain Newton step is taken when the Hessian already has index 1 and the
    step fits the trust region.
    """
    values, vectors = np.linalg.eigh(H)
    gt = vectors.T @ g
    if values[0] < 0 and (values.size == 1 or values[1] > 0):
        newton = -vectors @ (gt / values)
        if np.linalg.norm(newton) <= trust:
            return newton

    step_t = np.zeros_like(gt)
    mu_p = 0.5 * values[0] + np.sqrt(0.25 * values[0] ** 2 + gt[0] ** 2)
    denom = values[0] - mu_p
    step_t[0] = -gt[0] / denom if abs(denom) > 1e-14 else 0.0

    if values.size > 1:
        rest = values[1:]
        n = rest.size
        augmented = np.zeros((n + 1, n + 1))
        augmented[:n, :n] = np.diag(rest)
        augmented[:n, n] = gt[1:]
        augmented[n, :n] = gt[1:]
        mu_n = np.linalg.eigvalsh(augmented)[0]
        denoms = rest - mu_n
        safe = np.abs(denoms) > 1e-14
        step_t[1:][safe] = -gt[1:][safe] / denoms[safe]

    return _clip(vectors @ step_t, trust)


def minimize(surface: Surface, s0: Structure, tol: float = 1e-6, max_iterations: int = 500,
             trust_radius: float = 0.1) -> OptimizationResult:
    """
    Trust-region RFO minimization.

    Steps that raise the energy are rejected and the trust radius halved;
    good agreement with the quadratic model grows it by 1.2.

    Args:
        surface: Energy/force/Hessian provider
        s0: Starting structure
        tol: Convergence threshold on ‖F‖∞ [eV/Å]
        max_iterations: Iteration cap
        trust_radius: Initial trust radius [Å]

    Returns:
        OptimizationResult at the minimum
    """
    s = s0
    trust = trust_radius
    for iteration in range(max_iterations + 1):
        energy, grad, g, H, basis = _local_model(surface, s)
        if np.max(np.abs(grad)) < tol:
            return OptimizationResult(s, energy, iteration, True)
        if iteration == max_iterations:
            break

        while True:
            step = rfo_min_step(g, H, trust)
            predicted = _predicted_change(g, H, step)
            trial = s.with_positions(s.flat_positions + _to_cartesian(step, basis))
            new_energy = surface.energy(trial)
            if new_energy - energy <= 1e-12 * max(1.0, abs(energy)):
                break
            trust *= 0.5
            if trust < MIN_TRUST_RADIUS:
                raise MinimizationError(f"trust radius collapsed at iteration {iteration}")

        ratio = (new_energy - energy) / predicted if abs(predicted) > 1e-14 else 1.0
        if 0.75 < ratio < 1.25:
            trust = min(trust * 1.2, MAX_TRUST_RADIUS)
        elif ratio < 0.25:
            trust *= 0.5
        s = trial

    raise MinimizationError(f"minimization did not converge in {max_iterations} iterations "
                            f"(‖F‖∞ = {np.max(np.abs(grad)):.3e})")


def curvature_index(surface: Surface, s: Structure) -> int:
    """Number of negative Hessian eigenvalues, rigid modes excluded on invariant surfaces."""
    _, _, _, H, _ = _local_model(surface, s)
    return int(np.sum(np.linalg.eigvalsh(H) < -NEGATIVE_EIGEN_TOL))


def saddle_refine(surface: Surface, guess: Structure, trust_radius: float = 0.1,
                  g_tol: float = 1e-6, max_iterations: int = 200) -> OptimizationResult:
    """
    Restricted-step P-RFO refinement of a first-order saddle.

    Every step is taken; the trust radius grows ×1.2 when the energy change
    agrees with the quadratic model within 25% and shrinks ×0.5 otherwise.

    Raises:
        SaddleNotConvergedError: iteration cap or trust-radius collapse
        WrongCurvatureIndexError: converged point does not have exactly one negative mode
    """
    s = guess
    trust = trust_radius
    for iteration in range(max_iterations + 1):
        energy, grad, g, H, basis = _local_model(surface, s)
        if np.max(np.abs(grad)) < g_tol:
            index = int(np.sum(np.linalg.eigvalsh(H) < -NEGATIVE_EIGEN_TOL))
            if index != 1:
                raise WrongCurvatureIndexError(f"stationary point has {index} negative modes")
            return OptimizationResult(s, energy, iteration, True)
        if iteration == max_iterations:
            break

        step = prfo_step(g, H, trust)
        predicted = _predicted_change(g, H, step)
        s = s.with_positions(s.flat_positions + _to_cartesian(step, basis))
        actual = surface.energy(s) - energy
        ratio = actual / predicted if abs(predicted) > 1e-14 else 1.0
        if abs(ratio - 1.0) < 0.25:
            trust = min(trust * 1.2, MAX_TRUST_RADIUS)
        else:
            trust *= 0.5
        if trust < MIN_TRUST_RADIUS:
            raise SaddleNotConvergedError(f"trust radius collapsed at iteration {iteration}")

    raise SaddleNotConvergedError(f"saddle search did not converge in {max_iterations} iterations")


def _reparametrize(images: np.ndarray) -> np.ndarray:
    """Redistribute images at equal arc length along the piecewise-linear string."""
    seg = np.linalg.norm(np.diff(images, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    if arc[-1] <= 0:
        return images
    target = np.linspace(0.0, arc[-1], images.shape[0])
    return np.stack([np.interp(target, arc, images[:, k]) for k in range(images.shape[1])], axis=1)


def path_guess(surface: Surface, reactant: Structure, product: Structure, n_images: int = 11,
               n_sweeps: int = 300, dt: float = 2e-4, clip: float = 0.02) -> Structure:
    """
    Highest-energy node of a relaxed interpolated string.

    Interior images move along the force component perpendicular to the
    local tangent (per-image step capped at `clip`), then the string is
    redistributed at equal arc length. Endpoints stay fixed.
    """
    if n_images < 2:
        raise TsSearchError("a path needs at least 2 images")
    if rmsd(reactant, product) < 1e-10:
        raise TsSearchError("reactant and product are identical")
    if n_images == 2:
        logging.warning("Path with 2 images has no interior node; returning the higher endpoint")
        return max((reactant, product), key=surface.energy)

    start, end = reactant.flat_positions, product.flat_positions
    images = start + np.linspace(0.0, 1.0, n_images)[:, None] * (end - start)

    for _ in range(n_sweeps):
        for i in range(1, n_images - 1):
            tangent = images[i + 1] - images[i - 1]
            tangent /= np.linalg.norm(tangent)
            f = surface.forces(reactant.with_positions(images[i])).reshape(-1)
            perp = f - (f @ tangent) * tangent
            images[i] = images[i] + _clip(dt * perp, clip)
        images = _reparametrize(images)

    energies = [surface.energy(reactant.with_positions(x)) for x in images]
    best = int(np.argmax(energies))
    logging.debug(f"Path guess: image {best} of {n_images}, E = {energies[best]:.6f} eV")
    return reactant.with_positions(images[best])


def imaginary_mode(surface: Surface, saddle: Structure) -> np.ndarray:
    """Cartesian unit vector of the single negative mode, largest component positive."""
    _, _, _, H, basis = _local_model(surface, saddle)
    values, vectors = np.linalg.eigh(H)
    index = int(np.sum(values < -NEGATIVE_EIGEN_TOL))
    if index != 1:
        raise WrongCurvatureIndexError(f"IRC start has {index} negative modes")
    mode = _to_cartesian(vectors[:, 0], basis)
    mode /= np.linalg.norm(mode)
    if mode[np.argmax(np.abs(mode))] < 0:
        mode = -mode
    return mode


def irc(surface: Surface, saddle: Structure, step_size: float = 0.05,
        direction: IrcDirection = IrcDirection.FORWARD, delta: float = 0.01,
        f_tol: float = 1e-4, max_steps: int = 2000, min_tol: float = 1e-6,
        max_rejections: int = 10) -> IrcResult:
    """
    Follow the reaction path downhill from a saddle.

    Displace by ±delta along the imaginary mode, run damped mass-weighted
    steepest descent (step capped at step_size) and re-minimize the endpoint.

    Raises:
        IrcDivergenceError: max_rejections consecutive energy increases
    """
    direction = IrcDirection(direction)
    sign = 1.0 if direction == IrcDirection.FORWARD else -1.0
    inv_mass = 1.0 / np.repeat(saddle.masses, 3)

    s = saddle.with_positions(saddle.flat_positions + sign * delta * imaginary_mode(surface, saddle))
    energy = surface.energy(s)
    energies = [energy]
    alpha = 0.01
    rejections = 0
    steps = 0
    converged = False

    while steps < max_steps:
        forces = surface.forces(s).reshape(-1)
        if np.max(np.abs(forces)) < f_tol:
            converged = True
            break
        trial = s.with_positions(s.flat_positions + _clip(alpha * inv_mass * forces, step_size))
        new_energy = surface.energy(trial)
        if new_energy <= energy:
            s, energy = trial, new_energy
            energies.append(energy)
            alpha *= 1.2
            rejections = 0
            steps += 1
        else:
            alpha *= 0.5
            rejections += 1
            if rejections >= max_rejections:
                raise IrcDivergenceError(
                    f"{direction.value} IRC rejected {rejections} consecutive steps after {steps} steps")

    if not converged:
        logging.warning(f"{direction.value} IRC hit {max_steps} steps; re-minimizing endpoint")
    final = minimize(surface, s, tol=min_tol)
    energies.append(final.energy)
    return IrcResult(direction, final.structure, energies, steps, converged)


def endpoint_deviation(forward: Structure, reverse: Structure,
                       reactant: Structure, product: Structure) -> float:
    """Minimum over the two pairings of the worse endpoint RMSD."""
    direct = max(rmsd(forward, reactant), rmsd(reverse, product))
    swapped = max(rmsd(forward, product), rmsd(reverse, reactant))
    return min(direct, swapped)


def ts_workflow(surface: Surface, reactant: Structure, product: Structure,
                cfg: Optional[TsConfig] = None) -> TsReport:
    """
    Minimize endpoints, guess, refine and verify a transition state.

    Returns:
        TsReport; Success only when the saddle is converged with index 1 and
        both IRC branches return to the optimized endpoints within match_tol
    """
    cfg = cfg or TsConfig()
    iterations: Dict[str, int] = {}
    try:
        r = minimize(surface, reactant, cfg.min_tol, cfg.max_min_iterations, cfg.trust_radius)
        p = minimize(surface, product, cfg.min_tol, cfg.max_min_iterations, cfg.trust_radius)
        iterations.update(reactant_min=r.iterations, product_min=p.iterations)
        if rmsd(r.structure, p.structure) < cfg.match_tol:
            raise TsSearchError("reactant and product minimize to the same structure")
        guess = path_guess(surface, r.structure, p.structure, cfg.n_images,
                           cfg.string_sweeps, cfg.string_dt, cfg.string_clip)
    except TsSearchError as e:
        return TsReport(TsStatus.GUESS_FAILED, iterations=iterations, message=str(e))

    try:
        ts = saddle_refine(surface, guess, cfg.trust_radius, cfg.g_tol, cfg.max_saddle_iterations)
    except WrongCurvatureIndexError as e:
        return TsReport(TsStatus.WRONG_CURVATURE_INDEX, iterations=iterations, message=str(e))
    except TsSearchError as e:
        return TsReport(TsStatus.SADDLE_NOT_CONVERGED, iterations=iterations, message=str(e))
    iterations["saddle"] = ts.iterations

    report = TsReport(TsStatus.IRC_MISMATCH, ts.structure, ts.energy,
                      ts.energy - r.energy, ts.energy - p.energy, iterations=iterations)
    try:
        forward = irc(surface, ts.structure, cfg.irc_step, IrcDirection.FORWARD, cfg.irc_delta,
                      cfg.irc_f_tol, cfg.irc_max_steps, cfg.min_tol)
        reverse = irc(surface, ts.structure, cfg.irc_step, IrcDirection.REVERSE, cfg.irc_delta,
                      cfg.irc_f_tol, cfg.irc_max_steps, cfg.min_tol)
    except TsSearchError as e:
        report.message = str(e)
        return report

    iterations.update(irc_forward=forward.n_steps, irc_reverse=reverse.n_steps)
    report.irc_endpoints = (forward.endpoint, reverse.endpoint)
    report.endpoint_deviation = endpoint_deviation(forward.endpoint, reverse.endpoint,
                                                   r.structure, p.structure)
    if report.endpoint_deviation < cfg.match_tol:
        report.status = TsStatus.SUCCESS
    else:
        report.message = f"IRC endpoints deviate by {report.endpoint_deviation:.4g} Å"
    return report


def run_reactions(reactions: Sequence[Tuple[str, Structure, Structure]], surface: Surface,
                  cfg: Optional[TsConfig] = None, threads: int = 1) -> Tuple[List[TsReport], pd.DataFrame]:
    """
    Run independent reactions in parallel.

    Args:
        reactions: (name, reactant, product) triples
        surface: Surface shared by all workers
        cfg: Workflow settings
        threads: Worker count

    Returns:
        Tuple of (reports in input order, per-reaction DataFrame)
    """
    cfg = cfg or TsConfig()

    def work(item):
        name, reactant, product = item
        return ts_workflow(surface, reactant, product, cfg)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        reports = list(tqdm(pool.map(work, reactions), total=len(reactions), desc="TS search"))

    rows = []
    for (name, _, _), report in zip(reactions, reports):
        rows.append({
            "reaction": name,
            "status": report.status.value,
            "barrier_forward": report.barrier_forward,
            "barrier_reverse": report.barrier_reverse,
            "endpoint_deviation": report.endpoint_deviation,
            "saddle_iterations": report.iterations.get("saddle"),
        })
    frame = pd.DataFrame(rows, columns=["reaction", "status", "barrier_forward", "barrier_reverse",
                                        "endpoint_deviation", "saddle_iterations"])
    n_success = sum(r.success for r in reports)
    logging.info(f"TS search: {n_success}/{len(reports)} reactions succeeded")
    return reports, frame


def success_rate_table(frame: pd.DataFrame) -> pd.DataFrame:
    """Counts and fractions per status."""
    statuses = [s.value for s in TsStatus]
    counts = frame["status"].value_counts().reindex(statuses, fill_value=0)
    total = max(len(frame), 1)
    return pd.DataFrame({"status": statuses, "count": counts.values,
                         "fraction": counts.values / total})
