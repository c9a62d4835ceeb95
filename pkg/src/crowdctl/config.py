"""Batch, marketplace and planner settings, loadable from TOML."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .belief import QualityConfig
from .workers import DifficultyPrior, WorkerPool

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


def default_rates(n: int, k: int = 6) -> tuple:
    """Ballots per hour for the whole batch: n at the lowest pay, doubling by the top."""
    if k == 1:
        return (float(n),)
    return tuple(n * (1.0 + i / (k - 1)) for i in range(k))


@dataclass(frozen=True)
class SimConfig:
    n: int = 500
    prior: DifficultyPrior = DifficultyPrior.beta(2.0, 2.0)
    pool: WorkerPool = WorkerPool(2.0, 0.5)
    pay_grid: tuple = (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
    rates_per_hour: tuple | None = None
    dtau_min: float = 15.0
    tau_max_min: float = 360.0
    penalty: float = 200.0
    seed: int = 0
    # quality manager
    lookahead_depth: int = 6
    prob_threshold: float = 1e-7
    max_depth: int = 24
    # planner
    dtheta: float = 10.0
    nu_levels: int = 100
    theta_grid_G: int = 40
    hist_bins: int = 100
    eps_switch: float = 0.1
    repeats: int = 32
    nu_model: str = "trajectory"

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("n must be positive")
        if self.rates_per_hour is None:
            object.__setattr__(self, "rates_per_hour", default_rates(self.n, len(self.pay_grid)))
        object.__setattr__(self, "pay_grid", tuple(float(c) for c in self.pay_grid))
        object.__setattr__(self, "rates_per_hour", tuple(float(r) for r in self.rates_per_hour))
        if len(self.rates_per_hour) != len(self.pay_grid):
            raise ValueError("need one arrival rate per pay level")
        if any(r < 0 for r in self.rates_per_hour):
            raise ValueError("arrival rates must be nonnegative")
        if self.dtau_min <= 0 or self.tau_max_min <= 0:
            raise ValueError("epoch length and deadline must be positive")
        steps = self.tau_max_min / self.dtau_min
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("deadline must be a whole number of epochs")
        if self.eps_switch < 0:
            raise ValueError("eps_switch must be nonnegative")
        if self.nu_model not in ("trajectory", "beta"):
            raise ValueError(f"unknown nu_model {self.nu_model!r}")
        if self.seed is None:
            raise ValueError("a seed is mandatory")

    @property
    def n_epochs(self) -> int:
        return int(round(self.tau_max_min / self.dtau_min))

    @property
    def rates_per_epoch(self) -> tuple:
        return tuple(r * self.dtau_min / 60.0 for r in self.rates_per_hour)

    def quality(self) -> QualityConfig:
        return QualityConfig(self.penalty, self.pay_grid, self.pool.mean_error,
                             self.lookahead_depth, self.prob_threshold, self.max_depth)

    def replace(self, **kw) -> "SimConfig":
        if "n" in kw and "rates_per_hour" not in kw and self.rates_per_hour == default_rates(self.n, len(self.pay_grid)):
            kw["rates_per_hour"] = None
        return dataclasses.replace(self, **kw)

    def scaled_rates(self, factor: float) -> "SimConfig":
        return dataclasses.replace(self, rates_per_hour=tuple(r * factor for r in self.rates_per_hour))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["prior"] = dataclasses.asdict(self.prior)
        d["pool"] = dataclasses.asdict(self.pool)
        d["pay_grid"] = list(self.pay_grid)
        d["rates_per_hour"] = list(self.rates_per_hour)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        flat = {}
        for section in ("batch", "market", "quality", "planner"):
            flat.update(d.pop(section, {}))
        flat.update(d)
        prior = flat.pop("prior", None)
        pool = flat.pop("pool", flat.pop("workers", None))
        if isinstance(prior, dict):
            flat["prior"] = DifficultyPrior(**prior)
        if isinstance(pool, dict):
            flat["pool"] = WorkerPool(**pool)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(flat) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key in ("pay_grid", "rates_per_hour"):
            if key in flat and flat[key] is not None:
                flat[key] = tuple(flat[key])
        return cls(**flat)

    @classmethod
    def load(cls, path) -> "SimConfig":
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))


def dump_toml(cfg: SimConfig) -> str:
    """Minimal TOML writer for SimConfig (flat keys plus two tables)."""
    d = cfg.to_dict()
    prior, pool = d.pop("prior"), d.pop("pool")

    def fmt(v):
        if isinstance(v, str):
            return f'"{v}"'
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        if isinstance(v, bool):
            return "true" if v else "false"
        return repr(v)

    lines = [f"{k} = {fmt(v)}" for k, v in d.items()]
    lines += ["", "[prior]"] + [f"{k} = {fmt(v)}" for k, v in prior.items()]
    lines += ["", "[pool]"] + [f"{k} = {fmt(v)}" for k, v in pool.items()]
    return "\n".join(lines) + "\n"
