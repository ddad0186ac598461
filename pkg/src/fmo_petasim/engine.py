"""FMO2 control flow on a charge-equilibration surrogate.

Every fragment is a set of fluctuating point charges ``q`` whose energy is the
convex quadratic

    E_I(q) = 1/2 q^T (A_I + S_I) q + chi_I^T q,    sum(q) = Q_I,

with ``A_I`` the hardness matrix and ``S_I`` the shielded Coulomb coupling
``k / sqrt(r^2 + sigma^2)`` between the fragment's own sites. Fragments
interact through Coulomb terms. Two kernels are used on purpose:

* the exact reference (``full_system_oracle``) and the explicit pair
  calculations couple sites with the shielded kernel ``g(r)``;
* the embedding field seen by monomers and dimers, and the ES pair terms,
  use the bare kernel ``1/r``.

Since ``g(r) - 1/r = O(sigma^2 / r^3)`` the fragment expansion is exact for
two fragments and its error decays with fragment separation.

Energy bookkeeping. The embedded monomer energy is

    E'_I = E_I(q_I) + sum_{J != I} C(q_I, q_J)

with ``C`` the bare Coulomb energy between two charge sets, so every pair
interaction appears twice in ``sum_I E'_I``. The embedded dimer energy
``E'_IJ`` is the joint minimum over (q_I, q_J) of E_I + E_J + their shielded
mutual energy + their bare interaction with all remaining fragments held at
monomer charges. Freezing the pair at monomer charges and coupling it with the
bare kernel gives

    E'_IJ - E'_I - E'_J = C(q_I, q_J) - 2 C(q_I, q_J) = -C(q_I, q_J),

which is exactly the ES pair correction used for far pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from .errors import (
    CapacityError,
    ConvergenceError,
    SingularGeometryError,
    SolverError,
    ValidationError,
)
from .fragments import Fragment, FragmentSystem, PairClassification

__all__ = [
    "EngineConfig",
    "ChargeState",
    "MonomerResult",
    "DimerCorrection",
    "WorkCounters",
    "FMO2Result",
    "external_potential",
    "solve_monomer",
    "scc_loop",
    "solve_scf_dimer",
    "es_dimer_correction",
    "fmo2_total_energy",
    "full_system_oracle",
    "full_energy",
    "ORACLE_MAX_SITES",
    "run_report",
]

ORACLE_MAX_SITES = 2000


@dataclass(frozen=True)
class EngineConfig:
    tol: float = 1e-8
    max_iterations: int = 200
    damping: float = 0.7
    sigma: float = 1.0
    coulomb_constant: float = 1.0

    def __post_init__(self):
        if not self.tol > 0:
            raise ValidationError("tol must be positive")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")
        if not 0 < self.damping <= 1:
            raise ValidationError("damping must lie in (0, 1]")
        if not self.sigma >= 0:
            raise ValidationError("sigma must be >= 0")


@dataclass
class WorkCounters:
    """Work performed by a run.

    ``guess_solves`` counts the isolated-fragment solves used as the initial
    guess; they are kept apart so ``monomer_solves`` equals N_f times the
    number of SCC iterations.
    """

    monomer_solves: int = 0
    scf_dimer_solves: int = 0
    es_evaluations: int = 0
    potential_site_interactions: int = 0
    guess_solves: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ChargeState:
    """Per-fragment charge vectors, in system fragment order."""

    charges: tuple[np.ndarray, ...]

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate(self.charges)

    def totals(self) -> np.ndarray:
        return np.array([q.sum() for q in self.charges])


@dataclass(frozen=True)
class MonomerResult:
    charges: ChargeState
    embedded_energies: np.ndarray
    internal_energies: np.ndarray
    iterations_used: int
    converged: bool
    last_change: float


@dataclass(frozen=True)
class DimerCorrection:
    pair: tuple[int, int]
    kind: str  # "SCF" or "ES"
    value: float


@dataclass(frozen=True)
class FMO2Result:
    total_energy: float
    monomer: MonomerResult
    corrections: tuple[DimerCorrection, ...]
    counters: WorkCounters
    converged: bool

    def breakdown(self) -> dict:
        scf = [c.value for c in self.corrections if c.kind == "SCF"]
        es = [c.value for c in self.corrections if c.kind == "ES"]
        return {
            "monomer_sum": math.fsum(self.monomer.embedded_energies),
            "scf_dimer_sum": math.fsum(scf),
            "es_dimer_sum": math.fsum(es),
        }


# --- kernels and geometry -----------------------------------------------------


def _distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def _bare(r: np.ndarray) -> np.ndarray:
    if np.any(r == 0.0):
        raise SingularGeometryError("coincident sites in different fragments")
    return 1.0 / r


def _shielded(r: np.ndarray, sigma: float) -> np.ndarray:
    if math.isinf(sigma):
        return np.zeros_like(r)
    return 1.0 / np.sqrt(r * r + sigma * sigma)


def _intra_coupling(fragment: Fragment, config: EngineConfig) -> np.ndarray:
    """k * g(r) between distinct sites of one fragment, zero diagonal."""
    pos = fragment.positions
    s = config.coulomb_constant * _shielded(_distances(pos, pos), config.sigma)
    np.fill_diagonal(s, 0.0)
    return s


class _Layout:
    """Flat site indexing plus cached kernel matrices for one system."""

    def __init__(self, system: FragmentSystem, config: EngineConfig):
        self.system = system
        self.config = config
        sizes = [f.n_sites for f in system.fragments]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.slices = [slice(self.offsets[i], self.offsets[i + 1]) for i in range(len(sizes))]
        self.sizes = sizes
        self.n_sites = int(self.offsets[-1])
        self.positions = np.concatenate([f.positions for f in system.fragments])
        self._bare_matrix = None
        self._hess = [
            np.asarray(f.hardness) + _intra_coupling(f, config) for f in system.fragments
        ]

    @property
    def bare_matrix(self) -> np.ndarray:
        """k / r between sites of different fragments; zero inside fragments."""
        if self._bare_matrix is None:
            r = _distances(self.positions, self.positions)
            owner = np.repeat(np.arange(len(self.sizes)), self.sizes)
            inter = owner[:, None] != owner[None, :]
            m = np.zeros_like(r)
            m[inter] = _bare(r[inter])
            self._bare_matrix = self.config.coulomb_constant * m
        return self._bare_matrix

    def hessian(self, i: int) -> np.ndarray:
        return self._hess[i]

    def environment_cost(self, i: int) -> int:
        """Site-site kernel evaluations needed for one fragment's field."""
        return self.sizes[i] * (self.n_sites - self.sizes[i])


def _kkt_solve(hess: np.ndarray, linear: np.ndarray, blocks: Sequence[int],
               totals: Sequence[float]) -> np.ndarray:
    """Minimise 1/2 q^T H q + linear^T q with one sum constraint per block."""
    n = hess.shape[0]
    m = len(blocks)
    c = np.zeros((m, n))
    start = 0
    for row, size in enumerate(blocks):
        c[row, start:start + size] = 1.0
        start += size
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = hess
    kkt[:n, n:] = c.T
    kkt[n:, :n] = c
    rhs = np.concatenate([-linear, np.asarray(totals, dtype=float)])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"singular KKT system of size {n + m}") from exc
    if not np.all(np.isfinite(sol)):
        raise SolverError("non-finite KKT solution")
    q = sol[:n]
    # push the constraint residual from O(eps * cond) down to rounding level
    start = 0
    for size, total in zip(blocks, totals):
        block = q[start:start + size]
        block += (total - block.sum()) / size
        start += size
    return q


def _quadratic(hess: np.ndarray, linear: np.ndarray, q: np.ndarray) -> float:
    return float(0.5 * q @ hess @ q + linear @ q)


# --- operations ---------------------------------------------------------------


def external_potential(system: FragmentSystem, charges: ChargeState, target: int,
                       config: EngineConfig | None = None,
                       counters: WorkCounters | None = None) -> np.ndarray:
    """Bare-kernel electrostatic potential at the sites of fragment ``target``.

    ``target`` is a fragment id. Only the other fragments contribute.
    """
    config = config or EngineConfig()
    if len(charges.charges) != system.n_fragments:
        raise ValidationError("charge state does not match the system")
    ti = system.index_of(target)
    frag = system.fragments[ti]
    v = np.zeros(frag.n_sites)
    interactions = 0
    for j, other in enumerate(system.fragments):
        if j == ti:
            continue
        q = charges.charges[j]
        if q.shape != (other.n_sites,):
            raise ValidationError(f"charges for fragment {other.id} have wrong length")
        v += _bare(_distances(frag.positions, other.positions)) @ q
        interactions += frag.n_sites * other.n_sites
    if counters is not None:
        counters.potential_site_interactions += interactions
    return config.coulomb_constant * v


def solve_monomer(fragment: Fragment, v_ext: np.ndarray,
                  config: EngineConfig | None = None) -> tuple[np.ndarray, float]:
    """Charges minimising the fragment energy in the field ``v_ext``.

    Returns ``(q, internal_energy)``; the internal energy leaves out the
    ``v_ext . q`` term.
    """
    config = config or EngineConfig()
    hess = np.asarray(fragment.hardness) + _intra_coupling(fragment, config)
    return _solve_monomer(hess, fragment, np.asarray(v_ext, dtype=float))


def _solve_monomer(hess: np.ndarray, fragment: Fragment, v_ext: np.ndarray):
    chi = fragment.electronegativity
    q = _kkt_solve(hess, chi + v_ext, [fragment.n_sites], [fragment.net_charge])
    return q, _quadratic(hess, chi, q)


def _isolated_charges(layout: _Layout) -> list[np.ndarray]:
    return [
        _solve_monomer(layout.hessian(i), f, np.zeros(f.n_sites))[0]
        for i, f in enumerate(layout.system.fragments)
    ]


def scc_loop(system: FragmentSystem, config: EngineConfig | None = None,
             counters: WorkCounters | None = None,
             *, _layout: _Layout | None = None) -> MonomerResult:
    """Self-consistent monomer loop (Jacobi sweeps with linear damping).

    Starts from isolated-fragment charges. Each iteration builds every
    fragment's field from the previous iterate, solves all monomers, and mixes
    ``q <- (1 - d) q_old + d q_new``. Stops once the largest charge change is
    at most ``tol``; otherwise returns after ``max_iterations`` with
    ``converged=False``.
    """
    config = config or EngineConfig()
    counters = counters if counters is not None else WorkCounters()
    layout = _layout or _Layout(system, config)
    frags = system.fragments
    n_f = len(frags)
    bare = layout.bare_matrix if n_f > 1 else None

    q = _isolated_charges(layout)
    counters.guess_solves += n_f
    d = config.damping
    converged = False
    change = math.inf
    iterations = 0
    for iterations in range(1, config.max_iterations + 1):
        flat = np.concatenate(q)
        v_all = bare @ flat if bare is not None else np.zeros(layout.n_sites)
        new_q = []
        for i, f in enumerate(frags):
            qi, _ = _solve_monomer(layout.hessian(i), f, v_all[layout.slices[i]])
            new_q.append((1.0 - d) * q[i] + d * qi)
            counters.potential_site_interactions += layout.environment_cost(i)
        counters.monomer_solves += n_f
        change = max(float(np.abs(a - b).max()) for a, b in zip(new_q, q))
        q = new_q
        if change <= config.tol:
            converged = True
            break

    flat = np.concatenate(q)
    v_all = bare @ flat if bare is not None else np.zeros(layout.n_sites)
    internal = np.array([
        _quadratic(layout.hessian(i), f.electronegativity, q[i]) for i, f in enumerate(frags)
    ])
    embedded = np.array([
        internal[i] + float(q[i] @ v_all[layout.slices[i]]) for i in range(n_f)
    ])
    for arr in q:
        arr.setflags(write=False)
    return MonomerResult(
        charges=ChargeState(tuple(q)),
        embedded_energies=embedded,
        internal_energies=internal,
        iterations_used=iterations,
        converged=converged,
        last_change=change,
    )


def _pair_indices(system: FragmentSystem, pair: tuple[int, int]) -> tuple[int, int]:
    a, b = pair
    if a == b:
        raise ValidationError(f"pair {pair} repeats a fragment")
    try:
        return system.index_of(a), system.index_of(b)
    except KeyError as exc:
        raise ValidationError(f"pair {pair} refers to an unknown fragment") from exc


def _require_converged(monomer: MonomerResult, allow_unconverged: bool) -> None:
    if not (monomer.converged or allow_unconverged):
        raise ConvergenceError(
            "monomer charges are not converged",
            {"iterations_used": monomer.iterations_used, "last_change": monomer.last_change},
        )


def solve_scf_dimer(system: FragmentSystem, monomer: MonomerResult, pair: tuple[int, int],
                    config: EngineConfig | None = None,
                    counters: WorkCounters | None = None,
                    *, frozen: bool = False, allow_unconverged: bool = False,
                    _layout: _Layout | None = None) -> float:
    """Embedded dimer energy E'_IJ for the fragment pair ``pair`` (ids).

    ``frozen=True`` is a diagnostic mode: the pair keeps its monomer charges
    and is coupled with the bare kernel, so the dimer correction reduces
    algebraically to the ES term.
    """
    config = config or EngineConfig()
    _require_converged(monomer, allow_unconverged)
    i, j = _pair_indices(system, pair)
    layout = _layout or _Layout(system, config)
    fi, fj = system.fragments[i], system.fragments[j]
    si, sj = layout.slices[i], layout.slices[j]
    bare = layout.bare_matrix
    flat = monomer.charges.flat
    qi, qj = monomer.charges.charges[i], monomer.charges.charges[j]
    # environment field: everyone except I and J, frozen at monomer charges
    v_i = bare[si] @ flat - bare[si, sj] @ qj
    v_j = bare[sj] @ flat - bare[sj, si] @ qi
    if counters is not None:
        counters.potential_site_interactions += (
            (fi.n_sites + fj.n_sites) * (layout.n_sites - fi.n_sites - fj.n_sites)
        )
    hi, hj = layout.hessian(i), layout.hessian(j)
    if frozen:
        return (
            _quadratic(hi, fi.electronegativity, qi)
            + _quadratic(hj, fj.electronegativity, qj)
            + float(qi @ bare[si, sj] @ qj)
            + float(qi @ v_i) + float(qj @ v_j)
        )
    ni, nj = fi.n_sites, fj.n_sites
    r = _distances(fi.positions, fj.positions)
    coupling = config.coulomb_constant * _shielded(r, config.sigma)
    hess = np.zeros((ni + nj, ni + nj))
    hess[:ni, :ni] = hi
    hess[ni:, ni:] = hj
    hess[:ni, ni:] = coupling
    hess[ni:, :ni] = coupling.T
    linear = np.concatenate([fi.electronegativity + v_i, fj.electronegativity + v_j])
    q = _kkt_solve(hess, linear, [ni, nj], [fi.net_charge, fj.net_charge])
    if counters is not None:
        counters.scf_dimer_solves += 1
    return _quadratic(hess, linear, q)


def es_dimer_correction(system: FragmentSystem, monomer: MonomerResult,
                        pair: tuple[int, int], config: EngineConfig | None = None,
                        counters: WorkCounters | None = None,
                        *, allow_unconverged: bool = False) -> float:
    """Frozen-charge pair correction: minus the bare Coulomb energy of I and J."""
    config = config or EngineConfig()
    _require_converged(monomer, allow_unconverged)
    i, j = _pair_indices(system, pair)
    fi, fj = system.fragments[i], system.fragments[j]
    qi, qj = monomer.charges.charges[i], monomer.charges.charges[j]
    kernel = _bare(_distances(fi.positions, fj.positions))
    if counters is not None:
        counters.es_evaluations += 1
    return -config.coulomb_constant * float(qi @ kernel @ qj)


def fmo2_total_energy(system: FragmentSystem, cls: PairClassification,
                      config: EngineConfig | None = None) -> FMO2Result:
    """Two-body fragment expansion of the total energy.

    If the monomer loop does not converge the dimer terms are still evaluated
    from the last iterate and the result carries ``converged=False``.
    """
    config = config or EngineConfig()
    counters = WorkCounters()
    layout = _Layout(system, config)
    monomer = scc_loop(system, config, counters, _layout=layout)
    e_prime = {f.id: float(monomer.embedded_energies[k]) for k, f in enumerate(system.fragments)}

    corrections = []
    for pair in cls.scf_pairs:
        e_pair = solve_scf_dimer(system, monomer, pair, config, counters,
                                 allow_unconverged=True, _layout=layout)
        value = e_pair - e_prime[pair[0]] - e_prime[pair[1]]
        corrections.append(DimerCorrection(tuple(pair), "SCF", value))
    for pair in cls.es_pairs:
        value = es_dimer_correction(system, monomer, pair, config, counters,
                                    allow_unconverged=True)
        corrections.append(DimerCorrection(tuple(pair), "ES", value))
    corrections.sort(key=lambda c: c.pair)

    # fsum makes the total independent of summation order
    total = math.fsum(list(monomer.embedded_energies) + [c.value for c in corrections])
    return FMO2Result(total, monomer, tuple(corrections), counters, monomer.converged)


def _oracle_system(system: FragmentSystem, config: EngineConfig):
    n = system.n_sites
    if n > ORACLE_MAX_SITES:
        raise CapacityError(f"{n} sites exceed the dense-solve limit of {ORACLE_MAX_SITES}")
    pos = np.concatenate([f.positions for f in system.fragments])
    hess = config.coulomb_constant * _shielded(_distances(pos, pos), config.sigma)
    np.fill_diagonal(hess, 0.0)
    start = 0
    for f in system.fragments:
        hess[start:start + f.n_sites, start:start + f.n_sites] += f.hardness
        start += f.n_sites
    linear = np.concatenate([f.electronegativity for f in system.fragments])
    return hess, linear


def full_energy(system: FragmentSystem, charges: ChargeState,
                config: EngineConfig | None = None) -> float:
    """Full-system energy (shielded kernel everywhere) at the given charges."""
    config = config or EngineConfig()
    hess, linear = _oracle_system(system, config)
    return _quadratic(hess, linear, charges.flat)


def full_system_oracle(system: FragmentSystem, config: EngineConfig | None = None,
                       *, return_charges: bool = False):
    """Exact minimum of the full-system energy by one dense KKT solve."""
    config = config or EngineConfig()
    hess, linear = _oracle_system(system, config)
    blocks = [f.n_sites for f in system.fragments]
    totals = [f.net_charge for f in system.fragments]
    q = _kkt_solve(hess, linear, blocks, totals)
    energy = _quadratic(hess, linear, q)
    if return_charges:
        out = []
        start = 0
        for size in blocks:
            out.append(q[start:start + size].copy())
            start += size
        return energy, ChargeState(tuple(out))
    return energy


def run_report(result: FMO2Result, cls: PairClassification,
               oracle: float | None = None) -> dict:
    """JSON-ready summary of one engine run."""
    report = {
        "total_energy": result.total_energy,
        "breakdown": result.breakdown(),
        "iterations_used": result.monomer.iterations_used,
        "converged": result.converged,
        "last_change": result.monomer.last_change,
        "threshold": cls.threshold,
        "n_d": cls.n_d,
        "n_es": cls.n_es,
        "counters": result.counters.as_dict(),
    }
    if oracle is not None:
        report["oracle_energy"] = oracle
        scale = abs(oracle) if oracle else 1.0
        report["relative_error"] = abs(result.total_energy - oracle) / scale
    return report

