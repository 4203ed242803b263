"""Experiment configuration: YAML in, YAML out, defaults mirror the pendulum study."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .domain import ParamDistribution, SystemFamily, affine_family, pendulum_family
from .optimizer import AnnealSchedule, PgConfig
from .systems import CostSpec, Normalization, normalize


class ConfigError(ValueError):
    pass


@dataclass
class FamilyConfig:
    kind: str = "pendulum"  # pendulum | affine
    dt: float = 0.01
    g: float = 10.0
    a0: list | None = None
    b0: list | None = None
    a_dirs: list | None = None
    b_dirs: list | None = None


@dataclass
class CostConfig:
    q: list | None = None  # None -> identity
    r: list | None = None
    sigma_w: list | None = None


@dataclass
class PgSection:
    alpha: float = 1e-3
    max_iters: int = 20_000
    grad_tol: float = 1e-6
    eps: float = 1e-4
    line_search: bool = True


@dataclass
class AnnealSection:
    # rows of [gamma_upper, alpha, n_steps]; n_steps null -> run to inner_grad_tol
    schedule: list = field(default_factory=lambda: [[1.0, 1e-3, 20]])
    inner_grad_tol: float | None = None


@dataclass
class VerifySection:
    m_list: list = field(default_factory=lambda: [10, 20, 500])
    certify_grad_tol: float = 1e-7
    certify_max_iters: int = 50_000
    dr_ref_samples: int = 10_000
    save_samples: bool = True


@dataclass
class EntropicSection:
    m_list: list = field(default_factory=lambda: [500])
    t: float = 1.0


@dataclass
class SgdSection:
    n_iters: int = 20_000
    alpha: float = 2e-4
    gamma0: float = 0.99
    decay: float = 0.0
    eval_every: int = 1000
    n_mc_eval: int = 10_000
    baseline_m: int = 500


@dataclass
class DiagnoseSection:
    m: int = 10
    b_bound: float = 8.0
    slack: float = 2.0


@dataclass
class ExperimentConfig:
    family: FamilyConfig = field(default_factory=FamilyConfig)
    lower: list = field(default_factory=lambda: [0.75, 0.75])
    upper: list = field(default_factory=lambda: [1.25, 1.25])
    cost: CostConfig = field(default_factory=CostConfig)
    seeds: Any = 20  # int: count derived from master_seed; list: explicit seeds
    master_seed: int = 0
    algorithm: str = "anneal"  # batch | anneal | sgd | entropic
    pg: PgSection = field(default_factory=PgSection)
    anneal: AnnealSection = field(default_factory=AnnealSection)
    verify: VerifySection = field(default_factory=VerifySection)
    entropic: EntropicSection = field(default_factory=EntropicSection)
    sgd: SgdSection = field(default_factory=SgdSection)
    diagnose: DiagnoseSection = field(default_factory=DiagnoseSection)
    n_mc: int = 100_000
    delta: float = 0.05
    out_dir: str = "runs/out"
    threads: int = 1
    record_timing: bool = False  # wall_ms is written as 0 unless set, keeping CSVs reproducible

    def validate(self) -> "ExperimentConfig":
        positive = {
            "pg.alpha": self.pg.alpha, "pg.grad_tol": self.pg.grad_tol, "pg.eps": self.pg.eps,
            "sgd.alpha": self.sgd.alpha, "entropic.t": self.entropic.t, "n_mc": self.n_mc,
            "threads": self.threads, "verify.dr_ref_samples": self.verify.dr_ref_samples,
            "sgd.eval_every": self.sgd.eval_every, "sgd.n_mc_eval": self.sgd.n_mc_eval,
            "diagnose.m": self.diagnose.m, "diagnose.slack": self.diagnose.slack,
        }
        for name, value in positive.items():
            if not value > 0:
                raise ConfigError(f"{name} must be positive, got {value!r}")
        if not 0 < self.sgd.gamma0 < 1:
            raise ConfigError("sgd.gamma0 must lie in (0, 1)")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if self.algorithm not in ("batch", "anneal", "sgd", "entropic"):
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.family.kind not in ("pendulum", "affine"):
            raise ConfigError(f"unknown family kind {self.family.kind!r}")
        for m in list(self.verify.m_list) + list(self.entropic.m_list) + [self.sgd.baseline_m]:
            if int(m) < 1:
                raise ConfigError("sample counts must be >= 1")
        if len(self.lower) != len(self.upper) or any(lo > hi for lo, hi in zip(self.lower, self.upper)):
            raise ConfigError("lower/upper must have equal length with lower <= upper")
        if isinstance(self.seeds, int) and self.seeds < 1:
            raise ConfigError("seeds must be >= 1")
        if self.sgd.n_iters < 0 or self.pg.max_iters < 0:
            raise ConfigError("iteration counts must be >= 0")
        for row in self.anneal.schedule:
            if len(row) != 3 or not row[1] > 0:
                raise ConfigError("anneal.schedule rows are [gamma_upper, alpha, n_steps]")
        return self

    # -- derived objects ------------------------------------------------------

    def run_seeds(self) -> list[int]:
        """Explicit list, or ``count`` seeds expanded from ``master_seed``."""
        if isinstance(self.seeds, (list, tuple)):
            return [int(s) for s in self.seeds]
        return [derive_seed(self.master_seed, 0, j) for j in range(int(self.seeds))]

    def problem(self) -> tuple[SystemFamily, ParamDistribution, CostSpec, Normalization]:
        f = self.family
        if f.kind == "pendulum":
            family = pendulum_family(f.dt, f.g)
        else:
            if f.a0 is None or f.b0 is None:
                raise ConfigError("affine family needs a0 and b0")
            family = affine_family(f.a0, f.b0, f.a_dirs or [], f.b_dirs or [])
        dist = ParamDistribution(self.lower, self.upper)
        if dist.lower.size != family.parameter_dim:
            raise ConfigError(f"distribution has {dist.lower.size} coordinates, family needs {family.parameter_dim}")
        a_probe, b_probe = family.stacks(dist.lower[None])
        d_x, d_u = a_probe.shape[-1], b_probe.shape[-1]
        c = self.cost
        q = np.eye(d_x) if c.q is None else np.asarray(c.q, float)
        r = np.eye(d_u) if c.r is None else np.asarray(c.r, float)
        sw = np.eye(d_x) if c.sigma_w is None else np.asarray(c.sigma_w, float)
        cost, norm = normalize(q, r, sw)
        return family.normalized(norm), dist, cost, norm

    def pg_config(self) -> PgConfig:
        p = self.pg
        return PgConfig(p.alpha, int(p.max_iters), p.grad_tol, p.eps, bool(p.line_search))

    def schedule(self) -> AnnealSchedule:
        return AnnealSchedule(tuple((float(u), float(a), None if n is None else int(n))
                                    for u, a, n in self.anneal.schedule))

    # -- io -------------------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        return _build(cls, d or {}).validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if data is not None and not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        return cls.from_dict(data)


def _build(cls, data: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{name} must be a mapping")
            kwargs[name] = _build(type(current), value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def derive_seed(master: int, *key: int) -> int:
    """Per-run seed: first 32-bit word of ``SeedSequence([master, *key])``.

    Streams: ``(0, j)`` run ``j`` sample draws, ``(1,)`` Monte-Carlo
    evaluation, ``(2,)`` the large reference sample, ``(3, j)`` SGD run ``j``.
    """
    return int(np.random.SeedSequence([int(master), *map(int, key)]).generate_state(1)[0])
