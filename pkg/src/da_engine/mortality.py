"""Mortality laws: survival curves, conditional densities, death-time sampling.

Every model is reduced internally to a piecewise-constant hazard, which keeps
conditional survival and inverse-CDF sampling in closed form.  Models are
immutable and safe to share across simulation workers; sampling takes an
explicit seed and draws one uniform per participant from a counter-based
(Philox) stream.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

CONSTANT_FORCE = "constant-force"
PIECEWISE_CONSTANT = "piecewise-constant-force"
TABULAR = "tabular-life-table"

# Annual death probabilities of exactly 1 would imply an infinite hazard.
_MAX_QX = 1.0 - 1e-12


class MortalityError(ValueError):
    """Domain error raised for invalid times or malformed model parameters."""


@dataclass(frozen=True)
class HazardModel:
    """A participant's mortality law as a piecewise-constant force of mortality.

    ``rates[i]`` applies on ``[breaks[i], breaks[i+1])``; the last rate
    extends to infinity.  ``breaks[0]`` must be 0.
    """

    kind: str
    breaks: np.ndarray
    rates: np.ndarray
    # cumulative hazard at each break, H(breaks[i]); breaks[0] -> 0
    _cumhaz: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        breaks = np.atleast_1d(np.asarray(self.breaks, dtype=float))
        rates = np.atleast_1d(np.asarray(self.rates, dtype=float))
        if breaks[0] != 0.0:
            raise MortalityError("first hazard segment must start at 0")
        if len(breaks) != len(rates):
            raise MortalityError("breaks and rates must have equal length")
        if np.any(np.diff(breaks) <= 0):
            raise MortalityError("breakpoints must be strictly increasing")
        if np.any(rates < 0):
            raise MortalityError("hazard rates must be non-negative")
        object.__setattr__(self, "breaks", breaks)
        object.__setattr__(self, "rates", rates)
        cum = np.concatenate([[0.0], np.cumsum(rates[:-1] * np.diff(breaks))])
        object.__setattr__(self, "_cumhaz", cum)

    # -- constructors ------------------------------------------------------

    @classmethod
    def constant_force(cls, lam: float) -> "HazardModel":
        if lam < 0:
            raise MortalityError(f"force of mortality must be >= 0, got {lam}")
        return cls(CONSTANT_FORCE, np.array([0.0]), np.array([float(lam)]))

    @classmethod
    def piecewise(cls, breaks, rates) -> "HazardModel":
        return cls(PIECEWISE_CONSTANT, np.asarray(breaks, float), np.asarray(rates, float))

    @classmethod
    def from_life_table(cls, ages, qx) -> "HazardModel":
        """Tabular model from annual death probabilities ``qx`` at integer ages.

        The hazard is interpolated as piecewise-constant between integer ages
        (this keeps conditional survival closed-form); time 0 corresponds to
        the first tabulated age, and the final hazard extends beyond the table.
        """
        ages = np.asarray(ages, dtype=float)
        qx = np.clip(np.asarray(qx, dtype=float), 0.0, _MAX_QX)
        if len(ages) == 0:
            raise MortalityError("life table is empty")
        if np.any(np.diff(ages) != 1.0):
            raise MortalityError("life table ages must be consecutive integers")
        rates = -np.log1p(-qx)
        return cls(TABULAR, ages - ages[0], rates)

    @classmethod
    def from_life_table_csv(cls, path) -> "HazardModel":
        """Load a life table from a CSV file with header columns ``age, qx``."""
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"age", "qx"} <= set(reader.fieldnames):
                raise MortalityError("life table CSV needs a header with columns age,qx")
            rows = [(float(r["age"]), float(r["qx"])) for r in reader]
        if not rows:
            raise MortalityError(f"no rows in life table {path}")
        ages, qx = zip(*rows)
        return cls.from_life_table(ages, qx)

    # -- survival quantities ----------------------------------------------

    def cumulative_hazard(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise MortalityError("time must be non-negative")
        idx = np.searchsorted(self.breaks, t, side="right") - 1
        return self._cumhaz[idx] + self.rates[idx] * (t - self.breaks[idx])

    def hazard(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise MortalityError("time must be non-negative")
        idx = np.searchsorted(self.breaks, t, side="right") - 1
        return self.rates[idx]

    def survival(self, t):
        """P{tau > t}."""
        return np.exp(-self.cumulative_hazard(t))

    def conditional_survival(self, asof, t):
        """P{tau > t | tau > asof}."""
        t = np.asarray(t, dtype=float)
        if np.any(t < asof):
            raise MortalityError("t must be >= asof")
        return np.exp(-(self.cumulative_hazard(t) - self.cumulative_hazard(asof)))

    def conditional_density(self, asof, t):
        """Density of tau at t given survival to ``asof`` (memoryless for constant force)."""
        return self.hazard(t) * self.conditional_survival(asof, t)

    def inverse_cumulative_hazard(self, h):
        """Smallest t with H(t) >= h; ``inf`` when the total hazard never reaches h."""
        h = np.asarray(h, dtype=float)
        idx = np.searchsorted(self._cumhaz, h, side="right") - 1
        idx = np.clip(idx, 0, len(self.rates) - 1)
        rate = self.rates[idx]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = self.breaks[idx] + (h - self._cumhaz[idx]) / rate
        # zero-rate tail segments never accumulate the missing hazard
        t = np.where((rate == 0.0) & (h > self._cumhaz[idx]), np.inf, t)
        return np.where(rate == 0.0, np.where(h > self._cumhaz[idx], np.inf, self.breaks[idx]), t)

    def sample(self, u, asof=0.0):
        """Inverse-CDF death time from uniform ``u`` in [0,1), conditional on tau > asof."""
        u = np.asarray(u, dtype=float)
        target = self.cumulative_hazard(asof) - np.log1p(-u)
        return self.inverse_cumulative_hazard(target)

    def shifted(self, asof: float) -> "HazardModel":
        """The residual-lifetime law at ``asof``: time re-anchored so 0 maps to asof."""
        if asof == 0.0:
            return self
        idx = int(np.searchsorted(self.breaks, asof, side="right") - 1)
        breaks = np.concatenate([[asof], self.breaks[idx + 1 :]]) - asof
        return HazardModel(self.kind, breaks, self.rates[idx:])


def survival_prob(model: HazardModel, t) -> float:
    """P{tau > t}; non-increasing in t, 1 at t = 0."""
    return model.survival(t)


def conditional_density(model: HazardModel, asof, t):
    """Density of tau at ``t >= asof`` conditional on being alive at ``asof``."""
    return model.conditional_density(asof, t)


@dataclass(frozen=True)
class GroupMortality:
    """Ordered pool members with independent lifetimes."""

    members: tuple[HazardModel, ...]

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))

    def __len__(self):
        return len(self.members)

    @classmethod
    def constant_forces(cls, lams) -> "GroupMortality":
        return cls(tuple(HazardModel.constant_force(l) for l in lams))

    def aggregate_hazard(self, t, alive=None) -> float:
        """Sum of surviving members' hazards at t."""
        if alive is None:
            alive = np.ones(len(self.members), dtype=bool)
        return float(sum(m.hazard(t) for m, a in zip(self.members, alive) if a))

    def sample_uniforms(self, seed: int, n_paths: int = 1) -> np.ndarray:
        """(n_paths, n_members) uniforms from a Philox counter-based stream."""
        rng = np.random.Generator(np.random.Philox(key=seed))
        return rng.random((n_paths, len(self.members)))

    def sample_death_matrix(self, seed: int, n_paths: int, asof=0.0) -> np.ndarray:
        """Death times, one row per path, via inverse CDF on per-member uniforms."""
        u = self.sample_uniforms(seed, n_paths)
        out = np.empty_like(u)
        for i, m in enumerate(self.members):
            out[:, i] = m.sample(u[:, i], asof=asof)
        return out


def sample_death_times(group: GroupMortality, seed: int) -> list[tuple[int, float]]:
    """One death time per member, sorted ascending, ties broken by lowest index.

    Sampling is inverse-CDF on a single uniform per participant so the same
    seed reproduces the same lifetimes across scheme variants.
    """
    times = group.sample_death_matrix(seed, 1)[0]
    order = np.lexsort((np.arange(len(times)), times))
    return [(int(i), float(times[i])) for i in order]
