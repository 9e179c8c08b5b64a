"""Experiment configuration and its flat key/value file format.

One ``key = value`` per line; ``#`` starts a comment; list values are
comma-separated; booleans are ``true``/``false``; ``none`` clears an optional
value.  Keys are the fields of :class:`ExperimentConfig` and values are parsed
with the field's type, so a typo or a malformed number is an error::

    kind = convergence
    n = 200
    q = 200
    r = 5
    p = 0.3
    algorithms = altgdmin, altmin
    trials = 20
    master_seed = 1

A ``summary.json`` written by a previous run may be given instead; its
embedded config is used, which makes any run replayable.
"""
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from typing import List, Optional

from ..errors import FormatError

KINDS = ("convergence", "timing", "noisy_floor", "phase_transition", "fed_equivalence")
# CLI subcommand -> kind
COMMANDS = {"convergence": "convergence", "timing": "timing", "noisy-floor": "noisy_floor",
            "phase": "phase_transition", "fed-equiv": "fed_equivalence"}
_NOT_HASHED = ("output_dir",)


@dataclass
class ExperimentConfig:
    kind: str = "convergence"
    n: int = 200
    q: int = 200
    r: int = 5
    spectrum: str = "gaussian"
    kappa: float = 1.0
    p: float = 0.3
    p_grid: List[float] = field(default_factory=list)
    eps_noise: float = 0.0
    eps_grid: List[float] = field(default_factory=list)
    noise_shape: str = "rademacher"
    algorithms: List[str] = field(default_factory=lambda: ["altgdmin"])
    gammas: List[int] = field(default_factory=list)
    trials: int = 20
    master_seed: int = 0
    success_threshold: float = 1e-10
    T: int = 400
    eta_rule: str = "theory"
    c_eta: float = 0.5
    c_emp: float = 1.0
    sigma_source: str = "estimate"
    power_iters: int = 15
    mu_threshold: str = "estimate"
    split_mode: str = "reuse"
    fresh_ground_truth: bool = False
    inner_iters: int = 10
    c_step: float = 0.75
    lambda_balance: float = 0.5
    projgd_c: float = 0.8
    stall_window: Optional[int] = None
    plateau_window: int = 10
    plateau_rtol: float = 0.01
    output_dir: str = "runs"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.success_threshold > 0:
            raise ValueError("success_threshold must be > 0")
        if self.kind == "phase_transition":
            if not self.p_grid:
                raise ValueError("phase_transition needs a nonempty p_grid")
            if list(self.p_grid) != sorted(self.p_grid):
                raise ValueError("p_grid must be sorted")
        if self.kind == "noisy_floor" and not self.eps_grid:
            raise ValueError("noisy_floor needs a nonempty eps_grid")
        if self.kind == "fed_equivalence" and not self.gammas:
            raise ValueError("fed_equivalence needs a nonempty gammas list")
        if not self.algorithms:
            raise ValueError("algorithms must be nonempty")

    def to_dict(self):
        return dataclasses.asdict(self)

    def hash(self):
        """Stable short hash of everything that affects numeric results."""
        d = {k: v for k, v in self.to_dict().items() if k not in _NOT_HASHED}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def _field_types():
    hints = typing.get_type_hints(ExperimentConfig)
    return {f.name: hints[f.name] for f in dataclasses.fields(ExperimentConfig)}


def _parse_scalar(tp, text, key):
    text = text.strip()
    try:
        if tp is bool:
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError(text)
            return low == "true"
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        return text
    except ValueError:
        raise FormatError(f"{key}: cannot parse {text!r} as {tp.__name__}") from None


def parse_value(key, text):
    types = _field_types()
    if key not in types:
        raise FormatError(f"unknown config key {key!r}")
    tp = types[key]
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union and type(None) in args:
        if text.strip().lower() == "none":
            return None
        tp = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(tp), typing.get_args(tp)
    if origin in (list, List):
        items = [s for s in (t.strip() for t in text.split(",")) if s]
        return [_parse_scalar(args[0], s, key) for s in items]
    return _parse_scalar(tp, text, key)


def parse_config(text, **overrides):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise FormatError(f"line {lineno}: duplicate key {key!r}")
        values[key] = parse_value(key, val)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def dump_config(cfg):
    """Inverse of :func:`parse_config`."""
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif v is None:
            v = "none"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def load_config(path, **overrides):
    with open(path) as fh:
        text = fh.read()
    if str(path).endswith(".json"):
        meta = json.loads(text)
        d = dict(meta.get("config", meta))
        d.update({k: v for k, v in overrides.items() if v is not None})
        return ExperimentConfig(**d)
    return parse_config(text, **overrides)
