"""
Experiment module for reinforced tree walks.
Parses experiment specs, validates them, runs the requested experiment and
writes a result bundle.

Spec files are flat `key = value` text with `#` comments (lists are comma
separated), or JSON objects with the same keys. Keys:

    name          bundle name (default: file stem)
    kind          speed | upper-tail | lower-tail | regen-stats | oracle-check   (required)
    b             branching factor                                               (required)
    scheme        linear | once | ktimes                                         (required)
    c             reinforcement factor                                           (required)
    k_max         cap for ktimes
    horizon       steps per replica (speed, regen-stats)
    seed          64-bit seed (default 0)
    replicas      replicas per estimate (default 100)
    n_grid        horizons for tail experiments / oracle-check
    epsilon       deviation above (upper) or below (lower, level = auto) the speed
    level         lower-tail level: a number or `auto` for (speed - epsilon) n
    speed         known speed; estimated by a pilot run when absent
    speed_horizon, speed_replicas   pilot run size
    N, M, margin  truncation caps and censoring margin (margin = auto derives one)
    tilts         tilt magnitudes tried when naive estimates run out of hits
    event         endpoint | regen (upper-tail event family)
    permutations  permutation count for i.i.d. diagnostics
    workers, out  execution defaults, overridable on the command line
"""

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Optional, Union

from adapters.replicas import ReplicaRunner, get_runner
from core import __version__
from core.estimators import (
    TILT_GRID,
    InsufficientDataError,
    ReplicaOutcome,
    TailEstimate,
    TailMethod,
    choose_tilt,
    decay_classify,
    increment_tail_fit,
    lower_lattice_level,
    rate_curve,
    regen_moments,
    simulate,
    speed_direct,
    speed_ratio,
    subadditivity_audit,
    tail_from_outcomes,
    tilted_from_outcomes,
    upper_lattice_threshold,
)
from core.oracle import exact_distribution, get_oracle_nmax
from core.regeneration import TruncationParams, default_margin, iid_diagnostics
from core.storage import (
    append_index,
    bundle_name,
    ensure_bundle_dir,
    get_output_dir,
    load_summary,
    save_plot_data,
    save_summary,
    save_table,
    save_timing,
)
from core.walk import ResourceLimitError, Scheme, SchemeKind, WalkConfig

logger = logging.getLogger(__name__)

TAIL_COLUMNS = ["n", "p_hat", "stderr", "method", "replicas", "seed", "spec_hash"]
RATE_COLUMNS = ["n", "rate", "ci_lo", "ci_hi", "seed", "spec_hash"]

# Relative standard error above which a naive tail point is retried with tilting.
MAX_NAIVE_RELATIVE_ERROR = 0.25


class SpecError(Exception):
    """An experiment spec could not be parsed or failed validation."""

    pass


class ExperimentKind(Enum):
    SPEED = "speed"
    UPPER_TAIL = "upper-tail"
    LOWER_TAIL = "lower-tail"
    REGEN_STATS = "regen-stats"
    ORACLE_CHECK = "oracle-check"


@dataclass
class ExperimentSpec:
    """Everything needed to reproduce one experiment."""

    kind: ExperimentKind
    b: int
    scheme: Scheme
    name: str = "experiment"
    horizon: int = 10_000
    seed: int = 0
    replicas: int = 100
    n_grid: list[int] = field(default_factory=list)
    epsilon: float = 0.1
    level: Optional[float] = None
    speed: Optional[float] = None
    speed_horizon: int = 20_000
    speed_replicas: int = 20
    N: int = 10
    M: Optional[int] = None
    margin: Optional[int] = None
    tilts: list[float] = field(default_factory=lambda: list(TILT_GRID))
    event: str = "endpoint"
    permutations: int = 1000
    workers: Optional[int] = None
    out: Optional[str] = None

    def walk_config(self, horizon: Optional[int] = None) -> WalkConfig:
        return WalkConfig(self.b, self.scheme, self.horizon if horizon is None else horizon, self.seed)

    def resolved_margin(self) -> int:
        return default_margin(self.b, self.scheme.c) if self.margin is None else self.margin

    def truncation(self) -> TruncationParams:
        return TruncationParams(N=self.N, M=math.inf if self.M is None else self.M, margin=self.resolved_margin())

    def to_dict(self) -> dict[str, Any]:
        """Echo of the experiment identity; execution settings (workers, out) are left out."""
        out = asdict(self)
        out["kind"] = self.kind.value
        out["scheme"] = self.scheme.to_dict()
        out.pop("workers")
        out.pop("out")
        return out

    def spec_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class ExperimentResult:
    """What a driver hands back: summary values, CSV tables, plot series and notes."""

    results: dict[str, Any]
    tables: dict[str, list[dict[str, Any]]] = field(default_factory=dict)
    columns: dict[str, list[str]] = field(default_factory=dict)
    plots: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)


@dataclass
class ResultBundle:
    """A finished experiment on disk."""

    directory: Path
    summary_path: Path
    tables: dict[str, Path]
    plots: dict[str, Path]
    notes: list[str]
    summary: dict[str, Any]


# ---------------------------------------------------------------------------
# Parsing and validation
# ---------------------------------------------------------------------------

_INT_KEYS = {"b", "horizon", "seed", "replicas", "speed_horizon", "speed_replicas", "N", "permutations", "workers", "k_max"}
_FLOAT_KEYS = {"c", "epsilon", "speed"}
_LIST_INT_KEYS = {"n_grid"}
_LIST_FLOAT_KEYS = {"tilts"}
_OPTIONAL_INT_KEYS = {"M", "margin"}
_STR_KEYS = {"name", "kind", "scheme", "event", "out", "level"}
KNOWN_KEYS = _INT_KEYS | _FLOAT_KEYS | _LIST_INT_KEYS | _LIST_FLOAT_KEYS | _OPTIONAL_INT_KEYS | _STR_KEYS
REQUIRED_KEYS = ("kind", "b", "scheme", "c")


def _coerce(key: str, raw: Any, where: str) -> Any:
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _LIST_INT_KEYS | _LIST_FLOAT_KEYS:
            items = raw if isinstance(raw, list) else [x for x in str(raw).split(",") if x.strip()]
            cast = int if key in _LIST_INT_KEYS else float
            return [cast(x) for x in items]
        if key in _OPTIONAL_INT_KEYS:
            return None if str(raw).strip().lower() in ("auto", "inf", "none") else int(raw)
        return str(raw).strip()
    except (TypeError, ValueError) as e:
        raise SpecError(f"{where}: bad value for '{key}': {raw!r} ({e})")


def parse_spec_text(text: str, source: str = "<spec>") -> dict[str, Any]:
    """
    Parse spec text (key = value or JSON) into a dict of typed values.

    Raises:
        SpecError: Naming the offending line or key
    """
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise SpecError(f"{source}:{e.lineno}: invalid JSON ({e.msg})")
        if not isinstance(raw, dict):
            raise SpecError(f"{source}: JSON spec must be an object")
        items = [(str(k), v, f"{source}: key '{k}'") for k, v in raw.items()]
    else:
        items = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            content = line.split("#", 1)[0].strip()
            if not content:
                continue
            if "=" not in content:
                raise SpecError(f"{source}:{lineno}: expected 'key = value', got {content!r}")
            key, value = (part.strip() for part in content.split("=", 1))
            items.append((key, value, f"{source}:{lineno}"))

    values: dict[str, Any] = {}
    for key, value, where in items:
        if key not in KNOWN_KEYS:
            raise SpecError(f"{where}: unknown key '{key}'")
        values[key] = _coerce(key, value, where)
    return values


def build_spec(values: dict[str, Any], default_name: str = "experiment") -> ExperimentSpec:
    """
    Validate parsed values and build an ExperimentSpec.

    Every precondition of the requested experiment is checked here, before any
    simulation starts.

    Raises:
        SpecError: Naming the missing or invalid field
    """
    for key in REQUIRED_KEYS:
        if key not in values:
            raise SpecError(f"missing required field '{key}'")
    try:
        kind = ExperimentKind(values["kind"])
    except ValueError:
        raise SpecError(f"field 'kind': unknown experiment kind {values['kind']!r}")
    try:
        scheme_kind = SchemeKind(values["scheme"].lower())
        scheme = Scheme(scheme_kind, values["c"], values.get("k_max"))
    except ValueError as e:
        raise SpecError(f"field 'scheme': {e}")

    fields = {k: v for k, v in values.items() if k not in ("kind", "scheme", "c", "k_max")}
    fields.setdefault("name", default_name)
    level = fields.pop("level", None)
    spec = ExperimentSpec(kind=kind, scheme=scheme, **fields)
    if level is not None and level.lower() != "auto":
        try:
            spec.level = float(level)
        except ValueError:
            raise SpecError(f"field 'level': expected a number or 'auto', got {level!r}")
    validate_spec(spec)
    return spec


def validate_spec(spec: ExperimentSpec) -> None:
    """Check preconditions of the experiment kind; raises SpecError naming the field."""

    def need(ok: bool, field_name: str, message: str) -> None:
        if not ok:
            raise SpecError(f"field '{field_name}': {message}")

    need(spec.b >= 2, "b", f"branching factor must be >= 2, got {spec.b}")
    need(0 <= spec.seed < 2**64, "seed", "must be a 64-bit unsigned integer")
    need(spec.replicas >= 2, "replicas", f"need at least 2 replicas, got {spec.replicas}")
    need(spec.event in ("endpoint", "regen"), "event", f"must be 'endpoint' or 'regen', got {spec.event!r}")
    need(spec.N >= 1, "N", "must be >= 1")
    need(spec.M is None or spec.M >= 1, "M", "must be >= 1")
    need(spec.margin is None or spec.margin >= 0, "margin", "must be >= 0")
    need(all(t >= 0 for t in spec.tilts), "tilts", "list tilt magnitudes (>= 0); lower tails negate them")

    if spec.kind in (ExperimentKind.SPEED, ExperimentKind.REGEN_STATS):
        need(spec.horizon >= 1, "horizon", "must be >= 1")
    if spec.kind in (ExperimentKind.UPPER_TAIL, ExperimentKind.LOWER_TAIL):
        need(len(spec.n_grid) >= 1, "n_grid", "tail experiments need an n grid")
        need(spec.n_grid == sorted(set(spec.n_grid)), "n_grid", "must be strictly increasing")
        need(spec.n_grid[0] >= 1, "n_grid", "horizons must be >= 1")
        need(spec.speed is None or 0 <= spec.speed <= 1, "speed", "must lie in [0, 1]")
        need(spec.speed_replicas >= 2, "speed_replicas", "need at least 2 pilot replicas")
        need(spec.speed_horizon >= 1, "speed_horizon", "must be >= 1")
    if spec.kind is ExperimentKind.UPPER_TAIL:
        need(spec.epsilon > 0, "epsilon", "must be > 0")
        need(spec.speed is None or spec.speed + spec.epsilon <= 1, "epsilon", "speed + epsilon must be <= 1")
    if spec.kind is ExperimentKind.LOWER_TAIL:
        need(spec.level is None or spec.level >= 0, "level", "must be >= 0")
        need(spec.level is not None or spec.epsilon > 0, "epsilon", "must be > 0 when level = auto")
    if spec.kind is ExperimentKind.ORACLE_CHECK:
        need(len(spec.n_grid) >= 1, "n_grid", "oracle-check needs the horizons to enumerate")
        need(all(n >= 0 for n in spec.n_grid), "n_grid", f"horizons must be >= 0, got {spec.n_grid}")


def spec_from_summary(summary: dict[str, Any]) -> ExperimentSpec:
    """
    Rebuild the spec echoed in a bundle's summary.json.

    Raises:
        SpecError: If the echo is missing or invalid
    """
    try:
        values = dict(summary["spec"])
        scheme = Scheme.from_dict(values.pop("scheme"))
        kind = ExperimentKind(values.pop("kind"))
        spec = ExperimentSpec(kind=kind, scheme=scheme, **values)
    except (KeyError, TypeError, ValueError) as e:
        raise SpecError(f"summary does not hold a valid spec echo: {e}")
    validate_spec(spec)
    return spec


def load_spec(path_or_preset: Union[str, Path]) -> ExperimentSpec:
    """
    Load a spec file, a built-in preset by name, or the spec of an earlier
    bundle (its directory or its summary.json).

    Raises:
        SpecError: If the file is unreadable, malformed or invalid
    """
    name = str(path_or_preset)
    if name in PRESETS and not Path(name).exists():
        return replace(PRESETS[name])
    path = Path(path_or_preset)
    if path.is_dir() or path.name == "summary.json":
        summary = load_summary(path if path.is_dir() else path.parent)
        if summary is None:
            raise SpecError(f"no summary.json found at {path}")
        return spec_from_summary(summary)
    try:
        text = path.read_text()
    except OSError as e:
        raise SpecError(f"cannot read spec {path}: {e}")
    return build_spec(parse_spec_text(text, source=str(path)), default_name=path.stem)


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

# Sums n + m + 1 of the base horizons 50, 100, 150, 200, so the subadditivity audit has 16 ordered pairs.
_AUDIT_GRID = [50, 100, 101, 150, 151, 200, 201, 251, 301, 351, 401]
_DECAY_GRID = [10, 20, 40, 80, 160]

PRESETS: dict[str, ExperimentSpec] = {
    "thm1-upper-linear": ExperimentSpec(
        kind=ExperimentKind.UPPER_TAIL,
        name="thm1-upper-linear",
        b=70,
        scheme=Scheme.linear(2),
        epsilon=0.02,
        n_grid=_AUDIT_GRID,
        replicas=20_000,
        speed_horizon=20_000,
        speed_replicas=20,
        N=10,
    ),
    "thm2-upper-orrw": ExperimentSpec(
        kind=ExperimentKind.UPPER_TAIL,
        name="thm2-upper-orrw",
        b=2,
        scheme=Scheme.once(2),
        epsilon=0.1,
        n_grid=_AUDIT_GRID,
        replicas=20_000,
        speed_horizon=20_000,
        speed_replicas=20,
        N=10,
    ),
    "thm3-lower-orrw": ExperimentSpec(
        kind=ExperimentKind.LOWER_TAIL,
        name="thm3-lower-orrw",
        b=2,
        scheme=Scheme.once(2),
        level=1,
        n_grid=_DECAY_GRID,
        replicas=200_000,
    ),
    "eq13-lower-linear": ExperimentSpec(
        kind=ExperimentKind.LOWER_TAIL,
        name="eq13-lower-linear",
        b=2,
        scheme=Scheme.linear(2),
        level=1,
        n_grid=_DECAY_GRID,
        replicas=200_000,
    ),
    "lemma21-tail": ExperimentSpec(
        kind=ExperimentKind.REGEN_STATS,
        name="lemma21-tail",
        b=70,
        scheme=Scheme.linear(2),
        horizon=2_000,
        replicas=50,
        N=5,
        M=50,
    ),
    "speed-sanity": ExperimentSpec(
        kind=ExperimentKind.SPEED,
        name="speed-sanity",
        b=2,
        scheme=Scheme.linear(1),
        horizon=100_000,
        replicas=100,
    ),
}

PRESET_DESCRIPTIONS = {
    "thm1-upper-linear": "Upper-tail rate curve, linear c=2, b=70 (positive exponential rate alpha)",
    "thm2-upper-orrw": "Upper-tail rate curve, once-reinforced c=2, b=2 (positive exponential rate beta)",
    "thm3-lower-orrw": "Lower tail P(h <= 1), once-reinforced c=2, b=2 (exponential decay)",
    "eq13-lower-linear": "Lower tail P(h <= 1), linear c=2, b=2 (polynomial decay)",
    "lemma21-tail": "Regeneration increments, linear c=2, b=70 (0.115^k height tail, i.i.d. checks)",
    "speed-sanity": "Speed of the simple walk, b=2 (calibration against (b-1)/(b+1))",
}


def list_experiments() -> list[tuple[str, str]]:
    """Catalog of built-in presets as (name, description) pairs."""
    return [(name, PRESET_DESCRIPTIONS[name]) for name in PRESETS]


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------


def speed_bound(scheme: Scheme, b: int) -> Optional[float]:
    """Strict upper bound on the speed: b/(b+2) for linear c=2, b/(b+c) for once-reinforced."""
    if scheme.kind is SchemeKind.LINEAR and scheme.c == 2:
        return b / (b + 2)
    if scheme.kind is SchemeKind.ONCE and scheme.c > 1:
        return b / (b + scheme.c)
    return None


def simple_walk_speed(b: int) -> float:
    """Speed (b-1)/(b+1) of the depth chain of a simple random walk."""
    return (b - 1) / (b + 1)


def _pilot_speed(spec: ExperimentSpec, runner: ReplicaRunner) -> tuple[float, dict[str, Any]]:
    if spec.speed is not None:
        return spec.speed, {"source": "spec", "estimate": spec.speed}
    outcomes = simulate(spec.walk_config(spec.speed_horizon), spec.speed_replicas, runner=runner)
    est = speed_direct(outcomes)
    logger.info(f"Pilot speed {est.estimate:.4f} +/- {est.stderr:.4f} from {est.replicas} replicas")
    return est.estimate, {"source": "pilot", **est.to_dict()}


def run_speed(spec: ExperimentSpec, runner: ReplicaRunner) -> ExperimentResult:
    config = spec.walk_config()
    margin = spec.resolved_margin()
    outcomes = simulate(config, spec.replicas, margin=margin, runner=runner)
    direct = speed_direct(outcomes)
    result = ExperimentResult({"margin": margin, "speed_direct": direct.to_dict()})

    pairs = [pair for o in outcomes for pair in o.pairs]
    try:
        ratio = speed_ratio(pairs)
        combined = math.sqrt(direct.stderr**2 + ratio.stderr**2)
        result.results["speed_ratio"] = ratio.to_dict()
        result.results["moments"] = regen_moments(pairs, spec.truncation()).to_dict()
        result.results["agreement"] = {
            "difference": direct.estimate - ratio.estimate,
            "combined_stderr": combined,
            "within_3se": abs(direct.estimate - ratio.estimate) <= 3 * combined,
        }
    except InsufficientDataError as e:
        result.notes.append(f"speed_ratio skipped: {e}")

    bound = speed_bound(spec.scheme, spec.b)
    if bound is not None:
        result.results["bound"] = {"value": bound, "below_with_3se": direct.estimate + 3 * direct.stderr < bound}
    if spec.scheme.c == 1:
        reference = simple_walk_speed(spec.b)
        result.results["simple_walk_reference"] = {
            "value": reference,
            "within_3se": abs(direct.estimate - reference) <= 3 * direct.stderr,
        }

    result.tables["speed"] = [
        {"replica": o.replica, "final_height": o.final_height, "speed": o.final_height / o.horizon} for o in outcomes
    ]
    result.columns["speed"] = ["replica", "final_height", "speed", "seed", "spec_hash"]
    result.plots["speed_by_replica"] = [(o.replica, o.final_height / o.horizon) for o in outcomes]
    return result


def _relative_error(est: TailEstimate) -> float:
    return est.stderr / est.p_hat if est.p_hat > 0 else math.inf


def _tail_point(
    spec: ExperimentSpec,
    runner: ReplicaRunner,
    n: int,
    threshold: float,
    upper: bool,
    notes: list[str],
) -> TailEstimate:
    """
    Naive estimate first; if it is too noisy, rerun with the best tilt from the grid
    and keep whichever of the two has the smaller relative error.
    """
    if not upper and threshold < 0:
        return TailEstimate(n, threshold, 0.0, 0.0, TailMethod.EXACT)
    config = spec.walk_config(n)
    regen = upper and spec.event == "regen"
    margin = spec.resolved_margin() if regen else None
    outcomes = simulate(config, spec.replicas, margin=margin, runner=runner)
    naive = tail_from_outcomes(outcomes, threshold, upper=upper, statistic="regen" if regen else "endpoint")
    noisy = naive.zero_hit or _relative_error(naive) > MAX_NAIVE_RELATIVE_ERROR
    if not noisy or not any(spec.tilts) or regen:
        if naive.zero_hit:
            notes.append(f"n={n}: zero hits, p_hat is the rule-of-three bound {naive.p_hat:g}")
        return naive

    tilt, _ = choose_tilt(config, n, threshold, upper=upper, grid=spec.tilts, runner=runner)
    tilted = tilted_from_outcomes(simulate(config, spec.replicas, tilt=tilt, runner=runner), threshold, upper, tilt)
    if tilted.hits == 0:
        notes.append(f"n={n}: tilted run had no hits either")
        return naive
    if tilted.degenerate_ess:
        notes.append(f"n={n}: degenerate importance weights at tilt {tilt} (ESS={tilted.ess:.1f}), kept the naive estimate")
        return naive
    if not naive.zero_hit and _relative_error(tilted) >= _relative_error(naive):
        notes.append(f"n={n}: tilt {tilt} did not improve on the naive estimate")
        return naive
    return tilted


def _tail_tables(estimates: list[TailEstimate], result: ExperimentResult) -> None:
    curve = rate_curve(estimates)
    result.results["tail"] = [e.to_row() for e in estimates]
    result.results["rate_curve"] = curve.to_dict()
    if curve.too_few_points:
        result.notes.append("rate curve: fewer than 4 usable points, no plateau fit")
    result.tables["tail"] = [e.to_row() for e in estimates]
    result.columns["tail"] = TAIL_COLUMNS
    result.tables["rate"] = [vars(p) for p in curve.points]
    result.columns["rate"] = RATE_COLUMNS
    result.plots["tail"] = [(e.n, e.p_hat) for e in estimates]
    result.plots["rate"] = [(p.n, p.rate) for p in curve.points]


def run_upper_tail(spec: ExperimentSpec, runner: ReplicaRunner) -> ExperimentResult:
    speed, speed_info = _pilot_speed(spec, runner)
    if speed + spec.epsilon > 1:
        raise SpecError(f"field 'epsilon': estimated speed {speed:.4f} + epsilon exceeds 1")
    regen = spec.event == "regen"

    def threshold_of(n: int) -> int:
        x = (speed + spec.epsilon) * n
        return math.ceil(x - 1e-9) if regen else upper_lattice_threshold(x, n)

    notes: list[str] = []
    estimates = [_tail_point(spec, runner, n, threshold_of(n), True, notes) for n in spec.n_grid]

    result = ExperimentResult({"speed": speed_info, "epsilon": spec.epsilon, "event": spec.event}, notes=notes)
    if regen:
        result.results["margin"] = spec.resolved_margin()
    _tail_tables(estimates, result)
    curve_points = result.results["rate_curve"]["points"]
    result.results["rate_positive"] = bool(curve_points) and all(p["ci_lo"] > 0 for p in curve_points)

    audit = subadditivity_audit(estimates, spec.N, spec.b)
    result.results["subadditivity_audit"] = {
        "pairs_checked": len(audit),
        "all_ok": all(row.ok for row in audit),
        "rows": [vars(row) for row in audit],
    }
    return result


def run_lower_tail(spec: ExperimentSpec, runner: ReplicaRunner) -> ExperimentResult:
    speed, speed_info = _pilot_speed(spec, runner) if spec.level is None else (None, None)

    def level_of(n: int) -> int:
        if spec.level is not None:
            return lower_lattice_level(spec.level, n)
        return lower_lattice_level(max(0.0, (speed - spec.epsilon) * n), n)

    notes: list[str] = []
    estimates = [_tail_point(spec, runner, n, level_of(n), False, notes) for n in spec.n_grid]

    result = ExperimentResult({"level": spec.level if spec.level is not None else "auto", "speed": speed_info}, notes=notes)
    _tail_tables(estimates, result)
    try:
        report = decay_classify([(e.n, e.p_hat, e.stderr) for e in estimates if e.usable])
        result.results["decay"] = report.to_dict()
    except InsufficientDataError as e:
        result.notes.append(f"decay classification skipped: {e}")
    return result


def run_regen_stats(spec: ExperimentSpec, runner: ReplicaRunner) -> ExperimentResult:
    config = spec.walk_config()
    params = spec.truncation()
    outcomes: list[ReplicaOutcome] = simulate(config, spec.replicas, margin=params.margin, runner=runner)
    pairs = [pair for o in outcomes for pair in o.pairs]
    result = ExperimentResult({"margin": params.margin, "pairs": len(pairs)})

    per_run = []
    for o in outcomes:
        report = iid_diagnostics(o.pairs, permutations=spec.permutations, seed=spec.seed + o.replica)
        if not report.insufficient_data:
            per_run.append(report.within_bands)
    result.results["iid"] = {
        "runs_checked": len(per_run),
        "pass_fraction": (sum(per_run) / len(per_run)) if per_run else None,
        "pooled": iid_diagnostics(pairs, permutations=spec.permutations, seed=spec.seed).to_dict(),
    }
    if not per_run:
        result.notes.append("no replica produced 30 increments; per-run i.i.d. checks skipped")

    try:
        result.results["moments"] = regen_moments(pairs, params).to_dict()
        result.results["speed_ratio"] = speed_ratio(pairs).to_dict()
    except InsufficientDataError as e:
        result.notes.append(f"moments skipped: {e}")

    for which in ("delta_t", "H"):
        try:
            fit = increment_tail_fit(pairs, which, config=config)
        except InsufficientDataError as e:
            result.notes.append(f"{which} tail fit skipped: {e}")
            continue
        result.results[f"tail_fit_{which}"] = fit.to_dict()
        result.tables[f"survival_{which}"] = [{"k": k, "survival": s} for k, s in fit.survival]
        result.plots[f"survival_{which}"] = [(k, s) for k, s in fit.survival if s > 0]
        if fit.lemma_rows:
            result.tables["lemma_tail"] = [vars(row) for row in fit.lemma_rows]
        if fit.degenerate:
            result.notes.append(f"{which} survival is degenerate")
    return result


def run_oracle_check(spec: ExperimentSpec, runner: ReplicaRunner) -> ExperimentResult:
    n_max = get_oracle_nmax()
    too_long = [n for n in spec.n_grid if n > n_max]
    if too_long:
        raise ResourceLimitError(f"oracle-check horizons {too_long} exceed n_max={n_max} (set RTREE_ORACLE_NMAX)")
    rows = []
    for n in spec.n_grid:
        exact = exact_distribution(spec.walk_config(n), n).as_floats()
        outcomes = simulate(spec.walk_config(n), spec.replicas, runner=runner)
        counts = [0] * (n + 1)
        for o in outcomes:
            counts[o.final_height] += 1
        for height, p in enumerate(exact):
            mc = counts[height] / spec.replicas
            stderr = math.sqrt(p * (1 - p) / spec.replicas)
            diff = mc - p
            rows.append(
                {
                    "n": n,
                    "height": height,
                    "exact": p,
                    "mc": mc,
                    "stderr": stderr,
                    "diff": diff,
                    "within_3se": abs(diff) <= 3 * stderr if stderr > 0 else diff == 0,
                }
            )
    result = ExperimentResult({"atoms": len(rows), "all_within_3se": all(r["within_3se"] for r in rows)})
    result.tables["oracle_check"] = rows
    result.columns["oracle_check"] = ["n", "height", "exact", "mc", "stderr", "diff", "within_3se", "seed", "spec_hash"]
    for n in spec.n_grid:
        result.plots[f"oracle_n{n}"] = [(r["height"], r["exact"]) for r in rows if r["n"] == n]
    return result


DRIVERS: dict[ExperimentKind, Callable[[ExperimentSpec, ReplicaRunner], ExperimentResult]] = {
    ExperimentKind.SPEED: run_speed,
    ExperimentKind.UPPER_TAIL: run_upper_tail,
    ExperimentKind.LOWER_TAIL: run_lower_tail,
    ExperimentKind.REGEN_STATS: run_regen_stats,
    ExperimentKind.ORACLE_CHECK: run_oracle_check,
}


def run_experiment(
    spec: ExperimentSpec,
    workers: Optional[int] = None,
    out: Optional[Union[str, Path]] = None,
    seed: Optional[int] = None,
) -> ResultBundle:
    """
    Run one experiment and write its result bundle.

    Args:
        spec: Validated experiment spec
        workers: Worker count (overrides spec, then RTREE_WORKERS)
        out: Output directory (overrides spec, then RTREE_OUTPUT_DIR)
        seed: Seed override

    Returns:
        ResultBundle describing the files written
    """
    if seed is not None:
        spec = replace(spec, seed=seed)
    validate_spec(spec)
    spec_hash = spec.spec_hash()
    runner = get_runner(workers if workers is not None else spec.workers)
    base = Path(out) if out is not None else (Path(spec.out) if spec.out else get_output_dir())

    logger.info(f"Running {spec.kind.value} experiment '{spec.name}' (spec {spec_hash[:8]}, seed {spec.seed})")
    started = datetime.now()
    result = DRIVERS[spec.kind](spec, runner)
    finished = datetime.now()

    bundle_dir = ensure_bundle_dir(bundle_name(spec.name, spec_hash), base)
    stamp = {"seed": spec.seed, "spec_hash": spec_hash}
    tables = {}
    for name, rows in result.tables.items():
        tables[name] = save_table(bundle_dir, name, [{**row, **stamp} for row in rows], result.columns.get(name))
    plots = {name: save_plot_data(bundle_dir, name, points, header=f"{spec.name} {name}") for name, points in result.plots.items()}

    for note in result.notes:
        logger.warning(note)
    summary = {
        "spec": spec.to_dict(),
        "spec_hash": spec_hash,
        "seed": spec.seed,
        "code_version": __version__,
        "results": result.results,
        "notes": result.notes,
    }
    summary_path = save_summary(bundle_dir, summary)
    save_timing(bundle_dir, started, finished)
    append_index({"name": spec.name, "kind": spec.kind.value, "spec_hash": spec_hash, "bundle": str(bundle_dir)}, base)
    logger.info(f"Bundle written to {bundle_dir}")
    return ResultBundle(bundle_dir, summary_path, tables, plots, result.notes, summary)
