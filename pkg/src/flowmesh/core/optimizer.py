"""Bounded Nelder-Mead simplex search driven one objective value at a time.

The optimizer never calls the objective itself: each ``optimizer_step`` takes
the value of the previously emitted candidate and returns the next candidate
(or the final optimum). This lets the workflow engine evaluate candidates
with arbitrary downstream components.
"""

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from flowmesh.exceptions import (
    ComponentError,
    ConfigRangeError,
    DimensionMismatch,
    NonFiniteObjective,
)

Point = Tuple[float, ...]

# reflection, expansion, contraction, shrink
RHO = 1.0
CHI = 2.0
PSI = 0.5
SIGMA = 0.5
INITIAL_STEP = 0.1


class Phase(str, Enum):
    INIT = "Init"
    REFLECT = "Reflect"
    EXPAND = "Expand"
    CONTRACT_OUT = "ContractOut"
    CONTRACT_IN = "ContractIn"
    SHRINK = "Shrink"
    DONE = "Done"


@dataclass(frozen=True)
class OptimizerEmission:
    """Either the next candidate or the final optimum."""

    candidate: Optional[Point] = None
    optimum: Optional[Point] = None
    optimum_value: Optional[float] = None

    @property
    def is_final(self) -> bool:
        return self.optimum is not None


@dataclass(frozen=True)
class OptimizerState:
    lower: Point
    upper: Point
    f_tol: float = 1e-8
    x_tol: float = 1e-6
    max_evaluations: int = 500
    simplex: Tuple[Point, ...] = ()
    values: Tuple[float, ...] = ()
    phase: Phase = Phase.INIT
    pending: Optional[Point] = None
    evaluations: int = 0
    centroid: Optional[Point] = None
    reflected: Optional[Point] = None
    reflected_value: Optional[float] = None
    trial: Optional[Point] = None
    shrink_index: int = 0
    best_point: Optional[Point] = None
    best_value: float = math.inf

    @property
    def dimension(self) -> int:
        return len(self.lower)

    @property
    def done(self) -> bool:
        return self.phase is Phase.DONE

    @classmethod
    def create(
        cls,
        start: Sequence[float],
        lower: Sequence[float],
        upper: Sequence[float],
        f_tol: float = 1e-8,
        x_tol: float = 1e-6,
        max_evaluations: int = 500,
    ) -> "OptimizerState":
        """Validate the configuration and lay out the initial simplex.

        Raises:
            DimensionMismatch: start/lower/upper differ in length or are empty.
            ConfigRangeError: A bound pair is not ``lo < hi`` or a tolerance or
                budget is not positive.
        """
        if not (len(start) == len(lower) == len(upper)) or not start:
            raise DimensionMismatch(
                f"start/lower/upper must have equal non-zero length, got "
                f"{len(start)}/{len(lower)}/{len(upper)}"
            )
        lo = np.asarray(lower, dtype=float)
        hi = np.asarray(upper, dtype=float)
        x0 = np.asarray(start, dtype=float)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ConfigRangeError("bounds must be finite")
        if np.any(lo >= hi):
            raise ConfigRangeError("every bound pair must satisfy lower < upper")
        if not f_tol > 0 or not x_tol > 0:
            raise ConfigRangeError("f_tol and x_tol must be positive")
        if max_evaluations < 1:
            raise ConfigRangeError("max_evaluations must be at least 1")

        x0 = np.clip(x0, lo, hi)
        vertices = [x0]
        for k in range(len(x0)):
            step = INITIAL_STEP * (hi[k] - lo[k])
            y = x0.copy()
            y[k] = x0[k] + step if x0[k] + step <= hi[k] else x0[k] - step
            vertices.append(y)

        return cls(
            lower=_point(lo),
            upper=_point(hi),
            f_tol=float(f_tol),
            x_tol=float(x_tol),
            max_evaluations=int(max_evaluations),
            simplex=tuple(_point(v) for v in vertices),
        )


def optimizer_step(
    state: OptimizerState, objective: Optional[float] = None
) -> Tuple[OptimizerState, OptimizerEmission]:
    """Advance the search by one objective value.

    The very first call takes no objective and returns the first candidate.
    Every later call must carry the objective of the pending candidate.

    Raises:
        NonFiniteObjective: The objective is infinite.
        ComponentError: Objective missing, or the search already finished.
    """
    if state.done:
        raise ComponentError("optimizer already emitted its optimum")
    if state.pending is None:
        return _ask(state, state.simplex[0], Phase.INIT)
    if objective is None:
        raise ComponentError("objective value required for pending candidate")
    if not math.isfinite(objective):
        raise NonFiniteObjective(f"objective {objective} is not finite")

    value = float(objective)
    point = state.pending
    state = replace(state, pending=None, evaluations=state.evaluations + 1)
    if value < state.best_value:
        state = replace(state, best_point=point, best_value=value)

    if state.phase is Phase.INIT:
        return _tell_init(state, value)
    if state.phase is Phase.REFLECT:
        return _tell_reflect(state, value)
    if state.phase is Phase.EXPAND:
        return _tell_expand(state, value)
    if state.phase is Phase.CONTRACT_OUT:
        return _tell_contract_out(state, value)
    if state.phase is Phase.CONTRACT_IN:
        return _tell_contract_in(state, value)
    return _tell_shrink(state, value)


def _point(values) -> Point:
    return tuple(float(v) for v in values)


def _clip(state: OptimizerState, x: np.ndarray) -> Point:
    return _point(np.clip(x, state.lower, state.upper))


def _ask(state: OptimizerState, point: Point, phase: Phase, **changes):
    if state.evaluations >= state.max_evaluations:
        return _finish(state)
    state = replace(state, pending=point, phase=phase, **changes)
    return state, OptimizerEmission(candidate=point)


def _finish(state: OptimizerState):
    state = replace(state, pending=None, phase=Phase.DONE)
    return state, OptimizerEmission(
        optimum=state.best_point, optimum_value=state.best_value
    )


def _tell_init(state: OptimizerState, value: float):
    values = state.values + (value,)
    state = replace(state, values=values)
    if len(values) < len(state.simplex):
        return _ask(state, state.simplex[len(values)], Phase.INIT)
    return _iterate(state, initial=True)


def _iterate(state: OptimizerState, initial: bool = False):
    """Sort the simplex, test convergence and propose a reflection.

    A flat initial simplex ends the search on the f-spread alone; later
    iterations also need the simplex diameter below ``x_tol``.
    """
    sim = np.asarray(state.simplex, dtype=float)
    fsim = np.asarray(state.values, dtype=float)
    order = np.argsort(fsim, kind="stable")
    sim = sim[order]
    fsim = fsim[order]
    state = replace(
        state, simplex=tuple(_point(v) for v in sim), values=_point(fsim)
    )

    spread = float(np.max(np.abs(fsim[1:] - fsim[0])))
    diameter = float(np.max(np.abs(sim[1:] - sim[0])))
    if spread <= state.f_tol and (initial or diameter <= state.x_tol):
        return _finish(state)

    centroid = np.mean(sim[:-1], axis=0)
    reflected = _clip(state, centroid + RHO * (centroid - sim[-1]))
    return _ask(
        state, reflected, Phase.REFLECT, centroid=_point(centroid), trial=reflected
    )


def _accept(state: OptimizerState, point: Point, value: float):
    simplex = state.simplex[:-1] + (point,)
    values = state.values[:-1] + (value,)
    return _iterate(
        replace(
            state,
            simplex=simplex,
            values=values,
            reflected=None,
            reflected_value=None,
            trial=None,
        )
    )


def _tell_reflect(state: OptimizerState, fr: float):
    centroid = np.asarray(state.centroid)
    worst = np.asarray(state.simplex[-1])
    xr = state.trial

    if fr < state.values[0]:
        xe = _clip(state, centroid + RHO * CHI * (centroid - worst))
        if xe == xr:
            return _accept(state, xr, fr)
        return _ask(
            state, xe, Phase.EXPAND, reflected=xr, reflected_value=fr, trial=xe
        )
    if fr < state.values[-2]:
        return _accept(state, xr, fr)
    if fr < state.values[-1]:
        xc = _clip(state, centroid + PSI * (np.asarray(xr) - centroid))
        return _ask(
            state,
            xc,
            Phase.CONTRACT_OUT,
            reflected=xr,
            reflected_value=fr,
            trial=xc,
        )
    xcc = _clip(state, centroid + PSI * (worst - centroid))
    return _ask(state, xcc, Phase.CONTRACT_IN, trial=xcc)


def _tell_expand(state: OptimizerState, fe: float):
    if fe < state.reflected_value:
        return _accept(state, state.trial, fe)
    return _accept(state, state.reflected, state.reflected_value)


def _tell_contract_out(state: OptimizerState, fc: float):
    if fc <= state.reflected_value:
        return _accept(state, state.trial, fc)
    return _start_shrink(state)


def _tell_contract_in(state: OptimizerState, fcc: float):
    if fcc < state.values[-1]:
        return _accept(state, state.trial, fcc)
    return _start_shrink(state)


def _start_shrink(state: OptimizerState):
    sim = np.asarray(state.simplex, dtype=float)
    shrunk = [sim[0]] + [sim[0] + SIGMA * (v - sim[0]) for v in sim[1:]]
    state = replace(
        state,
        simplex=tuple(_point(v) for v in shrunk),
        reflected=None,
        reflected_value=None,
        trial=None,
    )
    return _ask(state, state.simplex[1], Phase.SHRINK, shrink_index=1)


def _tell_shrink(state: OptimizerState, value: float):
    index = state.shrink_index
    values = state.values[:index] + (value,) + state.values[index + 1 :]
    state = replace(state, values=values)
    if index < state.dimension:
        return _ask(
            state, state.simplex[index + 1], Phase.SHRINK, shrink_index=index + 1
        )
    return _iterate(state)
