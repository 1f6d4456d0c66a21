"""Run configuration: one JSON file that reproduces a run together with the data."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .compression import ConfigError
from .planner import Schedules, SearchOptions, kappa_schedule
from .training import TrainSpec


@dataclass
class RunConfig:
    data_dir: str | None = None
    run_dir: str = "runs/lenet"
    checkpoint: str | None = None
    seed: int = 0
    model: str = "lenet"
    q: list[int] = field(default_factory=lambda: [8, 4, 3, 2])
    kappa_n_max: int = 40
    kappa_divisor: float = 13.0
    alpha: float = 0.005
    lam: float = 0.5
    calib_size: int = 1024
    calib_seed: int = 0
    fisher_chunk: int = 32
    joint_wa: bool = False
    start_at_qmax: bool = True
    charge_initial: bool = True
    fisher_cache: bool = True
    size_constraint: bool = False
    train: TrainSpec = field(default_factory=lambda: TrainSpec(epochs=30))
    finetune: TrainSpec = field(default_factory=lambda: TrainSpec(epochs=20))
    # scheduling ablation: alpha grid and the per-run fine-tuning budget
    ablate_alphas: list[float] = field(default_factory=lambda: [0.05, 0.02, 0.01, 0.006, 0.004, 0.002])
    ablate_finetune: TrainSpec = field(default_factory=lambda: TrainSpec(epochs=1))
    ablate_prune_steps: int = 40
    train_subset: int | None = None
    test_subset: int | None = None

    def schedules(self) -> Schedules:
        return Schedules(q=tuple(self.q), kappa=kappa_schedule(self.kappa_n_max, self.kappa_divisor))

    def search_options(self) -> SearchOptions:
        return SearchOptions(lam=self.lam, cost="size" if self.size_constraint else "bops",
                             joint_wa=self.joint_wa, start_at_qmax=self.start_at_qmax,
                             charge_initial=self.charge_initial, fisher_cache=self.fisher_cache,
                             calib_chunk=self.fisher_chunk)

    def validate(self) -> None:
        try:
            self.schedules()
        except ValueError as e:
            raise ConfigError(f"schedules: {e}") from e
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha: must lie in (0, 1], got {self.alpha}")
        if self.lam < 0:
            raise ConfigError(f"lam: must be >= 0, got {self.lam}")
        if self.model not in ("lenet",):
            raise ConfigError(f"model: unknown architecture {self.model!r}")
        if self.calib_size < 1 or self.fisher_chunk < 1:
            raise ConfigError("calib_size and fisher_chunk must be >= 1")
        if any(not 0.0 < a <= 1.0 for a in self.ablate_alphas):
            raise ConfigError("ablate_alphas: every entry must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict, source: str = "<config>") -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"{source}: unknown field(s) {', '.join(unknown)}")
        kwargs = {}
        defaults = cls()
        for k, v in d.items():
            _check_type(k, v, getattr(defaults, k), source)
            if k in ("train", "finetune", "ablate_finetune"):
                if not isinstance(v, dict):
                    raise ConfigError(f"{source}: field {k!r} must be an object")
                bad = sorted(set(v) - {f.name for f in fields(TrainSpec)})
                if bad:
                    raise ConfigError(f"{source}: unknown field(s) {', '.join(f'{k}.{b}' for b in bad)}")
                try:
                    v = TrainSpec(**{**asdict(getattr(cls(), k)), **v})
                except (TypeError, ValueError) as e:
                    raise ConfigError(f"{source}: field {k!r}: {e}") from e
            kwargs[k] = v
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigError(f"{path}: cannot read config ({e.strerror})") from e
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from e
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        return cls.from_dict(d, str(path))


def _check_type(name: str, value, default, source: str) -> None:
    if value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str) or default is None:
        ok = isinstance(value, (str, int)) if default is None else isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list) and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in value)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{source}: field {name!r} has the wrong type ({type(value).__name__})")
