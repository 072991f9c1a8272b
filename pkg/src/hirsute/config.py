"""Run configuration: dataclass defaults, config-file parsing, CLI overlay.

Config files are plain ``key = value`` text ('#' starts a comment). CLI
flags override file values; every run writes the effective configuration
snapshot into its output directory so results stay reproducible.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import DataError
from .pairs import PairCategory, RatioClassScheme
from .protocol import SplitPlan
from .synthgen import GenConfig


@dataclass
class RunConfig:
    """All tunable parameters of a run; field names double as config keys."""

    # paths
    manifest: str | None = None
    embeddings: str | None = None
    masks: str | None = None
    out: str | None = None
    # evaluation protocol
    seed: int = 0
    n_splits: int = 5
    target_fmr: float = 1e-4
    tail_frac: float | None = None  # None: scoring/protocol defaults apply
    bins: int = 100_000
    block_size: int = 256
    workers: int = 1
    scope: str | None = None        # None: run each demographic separately
    groups: str = "cl_vs_cl,cl_vs_fh_L1,fh_L2_vs_fh_L2"
    # ratio class thresholds
    cl_max: float = 0.001
    fh_s_max: float = 0.1
    fh_l2_min: float = 0.15
    include_shadow: bool = False
    # synthetic generation
    n_subjects: int = 2000
    images_per_subject: int = 3
    dim: int = 512
    identity_spread: float = 0.5
    within_subject_noise: float = 0.015
    beta: float = 0.5
    clean_fraction: float = 0.5
    write_masks: bool = False

    def validate(self) -> None:
        if not 0.0 < self.target_fmr < 1.0:
            raise ValueError(f"target_fmr must be in (0, 1), got {self.target_fmr}")
        if self.tail_frac is not None and not 0.0 < self.tail_frac <= 1.0:
            raise ValueError(f"tail_frac must be in (0, 1], got {self.tail_frac}")
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.n_splits < 1:
            raise ValueError("n_splits must be >= 1")
        self.scheme()      # raises on inconsistent class thresholds
        self.group_list()  # raises on unknown category names

    def scheme(self) -> RatioClassScheme:
        return RatioClassScheme(
            cl_max=self.cl_max, fh_s_max=self.fh_s_max, fh_l2_min=self.fh_l2_min
        )

    def group_list(self) -> tuple[PairCategory, ...]:
        names = [g.strip() for g in self.groups.split(",") if g.strip()]
        return tuple(PairCategory.parse(name) for name in names)

    def split_plan(self) -> SplitPlan:
        return SplitPlan(seed=self.seed, n_splits=self.n_splits)

    def gen_config(self) -> GenConfig:
        return GenConfig(
            n_subjects=self.n_subjects,
            images_per_subject=self.images_per_subject,
            dim=self.dim,
            identity_spread=self.identity_spread,
            within_subject_noise=self.within_subject_noise,
            hair_axis_strength=self.beta,
            clean_fraction=self.clean_fraction,
            seed=self.seed,
        )

    def snapshot(self) -> str:
        """Effective configuration as sorted key = value lines."""
        lines = []
        for f in sorted(dataclasses.fields(self), key=lambda f: f.name):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {'' if value is None else value}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_BOOL_VALUES = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _coerce(name: str, raw: str):
    f = _FIELDS[name]
    raw = raw.strip()
    if raw == "":
        return None
    if f.type in ("str | None", "str"):
        return raw
    if f.type == "bool":
        try:
            return _BOOL_VALUES[raw.lower()]
        except KeyError:
            raise DataError(f"config key {name!r}: expected a boolean, got {raw!r}") from None
    if f.type == "int":
        try:
            return int(raw)
        except ValueError:
            raise DataError(f"config key {name!r}: expected an integer, got {raw!r}") from None
    try:
        return float(raw)
    except ValueError:
        raise DataError(f"config key {name!r}: expected a number, got {raw!r}") from None


def load_config_file(path) -> dict:
    """Parse a key = value config file into a {field: value} dict."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise DataError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def build_config(file_path=None, overrides: dict | None = None) -> RunConfig:
    """RunConfig from defaults, then config file, then CLI overrides."""
    values: dict = {}
    if file_path is not None:
        values.update(load_config_file(file_path))
    for key, value in (overrides or {}).items():
        if value is not None:
            if key not in _FIELDS:
                raise ValueError(f"unknown config field {key!r}")
            values[key] = value
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg
