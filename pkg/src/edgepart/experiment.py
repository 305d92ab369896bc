"""Batch experiments: spec files, run matrices and CSV output.

An experiment is a JSON document naming a model, a scenario family, a list of
policies and a list of seeds.  Every (policy, seed) pair is one independent
run; results are written as

* ``summary.csv``          one row per run
* ``traces/<policy>_seed<seed>.csv``  one row per interval
* ``plot_latency.csv`` / ``plot_memory.csv``  per-step mean and spread across seeds
* ``gap.txt``              ratio-to-Optimal report, when Optimal is among the policies

Nothing time-dependent is written, so the same spec always produces the same
bytes.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .baselines import PolicyKind
from .model import ConfigError, ModelConfig
from .partitioner import Limits
from .simulator import BackgroundLoad, RunFailure, RunTrace, ScenarioConfig, run_inference
from .units import GIB, gbps_to_bytes_per_sec, gflops_to_flops

SPEC_VERSION = 1

SUMMARY_COLUMNS = (
    "policy",
    "seed",
    "devices",
    "status",
    "total_latency_s",
    "peak_device_memory_bytes",
    "final_total_memory_bytes",
    "infeasible_intervals",
    "violation_intervals",
    "migration_count",
    "ratio_to_optimal",
    "note",
)

TRACE_COLUMNS = (
    "tau",
    "tokens",
    "status",
    "objective_s",
    "cumulative_latency_s",
    "inference_s",
    "migration_s",
    "sync_s",
    "total_memory_bytes",
    "peak_device_memory_bytes",
    "violations",
    "migrations",
    "assignment",
)


def fmt(x) -> str:
    """CSV cell text: ints verbatim, floats to 9 significant digits."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".9g")
    return str(x)


@dataclass(frozen=True)
class EmitFlags:
    trace_csv: bool = True
    summary_csv: bool = True
    plotdata: bool = True


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    model: ModelConfig
    scenario: ScenarioConfig
    policies: tuple[PolicyKind, ...]
    seeds: tuple[int, ...]
    # inclusive range; a run with seed s uses lo + s % (hi - lo + 1) devices
    device_counts: tuple[int, int] | None = None
    limits: Limits = Limits()
    include_tail_compute: bool = False
    galaxy_k: int | None = None
    outputs: str = "results"
    emit: EmitFlags = EmitFlags()

    def __post_init__(self) -> None:
        if not self.name:
            raise ConfigError("experiment needs a name")
        if not self.policies:
            raise ConfigError("experiment needs at least one policy")
        if len(set(self.policies)) != len(self.policies):
            raise ConfigError("policies are listed more than once")
        if not self.seeds:
            raise ConfigError("experiment needs at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds are listed more than once")
        for s in self.seeds:
            if not 0 <= s < 2**64:
                raise ConfigError(f"seed {s} is not a 64-bit unsigned integer")
        if self.device_counts is not None:
            lo, hi = self.device_counts
            if not 1 <= lo <= hi:
                raise ConfigError("device_count range needs 1 <= lo <= hi")

    def devices_for(self, seed: int) -> int:
        if self.device_counts is None:
            return self.scenario.device_count
        lo, hi = self.device_counts
        return lo + seed % (hi - lo + 1)

    def scenario_for(self, seed: int) -> ScenarioConfig:
        return replace(self.scenario, device_count=self.devices_for(seed), seed=seed)

    def with_seeds(self, seeds: Sequence[int]) -> "ExperimentSpec":
        return replace(self, seeds=tuple(seeds))

    def with_outputs(self, outputs: str) -> "ExperimentSpec":
        return replace(self, outputs=str(outputs))

    # -- JSON ------------------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        sc = self.scenario
        return {
            "version": SPEC_VERSION,
            "name": self.name,
            "model": asdict(self.model),
            "scenario": {
                "device_count": list(self.device_counts) if self.device_counts else sc.device_count,
                "mem_range": list(sc.mem_range),
                "compute_range": list(sc.compute_range),
                "bandwidth_range": list(sc.bandwidth_range),
                "mem_sigma": sc.mem_sigma,
                "compute_sigma": sc.compute_sigma,
                "background": asdict(sc.background),
            },
            "policies": [p.value for p in self.policies],
            "seeds": list(self.seeds),
            "limits": {
                "t_max": self.limits.t_max,
                "iterations": self.limits.iterations,
                "t_ref": self.limits.t_ref,
            },
            "options": {
                "include_tail_compute": self.include_tail_compute,
                "galaxy_k": self.galaxy_k,
            },
            "outputs": self.outputs,
            "emit": asdict(self.emit),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentSpec":
        if not isinstance(data, Mapping):
            raise ConfigError("experiment spec must be a JSON object")
        _check_keys(
            data,
            {"version", "name", "model", "scenario", "policies", "seeds", "limits", "options", "outputs", "emit"},
            "spec",
        )
        version = data.get("version")
        if version != SPEC_VERSION:
            raise ConfigError(f"unsupported spec version {version!r} (expected {SPEC_VERSION})")
        for key in ("name", "model", "policies", "seeds"):
            if key not in data:
                raise ConfigError(f"spec is missing {key!r}")
        try:
            model = ModelConfig(**_section(data, "model", set(ModelConfig.__dataclass_fields__)))
            scenario, counts = _scenario(_section(data, "scenario", None))
            limits = Limits(**_section(data, "limits", {"t_max", "iterations", "t_ref"}))
            options = _section(data, "options", {"include_tail_compute", "galaxy_k"})
            emit = EmitFlags(**_section(data, "emit", set(EmitFlags.__dataclass_fields__)))
        except TypeError as exc:
            raise ConfigError(f"bad spec value: {exc}") from None
        policies = data["policies"]
        if not isinstance(policies, list):
            raise ConfigError("policies must be a list")
        return cls(
            name=str(data["name"]),
            model=model,
            scenario=scenario,
            policies=tuple(PolicyKind.parse(str(p)) for p in policies),
            seeds=parse_seeds(data["seeds"]),
            device_counts=counts,
            limits=limits,
            include_tail_compute=bool(options.get("include_tail_compute", False)),
            galaxy_k=options.get("galaxy_k"),
            outputs=str(data.get("outputs", "results")),
            emit=emit,
        )

    @classmethod
    def loads(cls, text: str) -> "ExperimentSpec":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"spec is not valid JSON: {exc}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read spec {path}: {exc}") from None
        return cls.loads(text)


def _check_keys(data: Mapping, allowed: set, where: str) -> None:
    extra = sorted(set(data) - allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(extra)}")


def _section(data: Mapping, key: str, allowed: set | None) -> dict:
    value = data.get(key, {})
    if not isinstance(value, Mapping):
        raise ConfigError(f"{key} must be an object")
    if allowed is not None:
        _check_keys(value, allowed, key)
    return dict(value)


def _scenario(raw: dict) -> tuple[ScenarioConfig, tuple[int, int] | None]:
    _check_keys(
        raw,
        {"device_count", "mem_range", "compute_range", "bandwidth_range", "mem_sigma", "compute_sigma", "background"},
        "scenario",
    )
    counts = None
    dc = raw.pop("device_count", 25)
    if isinstance(dc, list):
        if len(dc) != 2 or not all(isinstance(v, int) for v in dc):
            raise ConfigError("device_count must be an integer or [lo, hi]")
        counts = (dc[0], dc[1])
        dc = dc[0]
    elif not isinstance(dc, int):
        raise ConfigError("device_count must be an integer or [lo, hi]")
    bg = raw.pop("background", {})
    if not isinstance(bg, Mapping):
        raise ConfigError("background must be an object")
    _check_keys(bg, {"amplitude", "change_prob"}, "background")
    for key in ("mem_range", "compute_range", "bandwidth_range"):
        if key in raw:
            if not isinstance(raw[key], list) or len(raw[key]) != 2:
                raise ConfigError(f"{key} must be [lo, hi]")
            raw[key] = tuple(raw[key])
    return ScenarioConfig(device_count=dc, background=BackgroundLoad(**bg), **raw), counts


def parse_seeds(value) -> tuple[int, ...]:
    """A count ``n`` means seeds 0..n-1; a list is taken as given."""
    if isinstance(value, bool):
        raise ConfigError("seeds must be a count or a list of integers")
    if isinstance(value, int):
        if value < 1:
            raise ConfigError("seed count must be >= 1")
        return tuple(range(value))
    if isinstance(value, list) and all(isinstance(s, int) and not isinstance(s, bool) for s in value):
        return tuple(value)
    raise ConfigError("seeds must be a count or a list of integers")


# -- presets -------------------------------------------------------------------

ALL_POLICIES = tuple(PolicyKind)


def _default_scenario(devices: int) -> ScenarioConfig:
    return ScenarioConfig(
        device_count=devices,
        mem_range=(2 * GIB, 8 * GIB),
        compute_range=(gflops_to_flops(5), gflops_to_flops(50)),
        bandwidth_range=(gbps_to_bytes_per_sec(1), gbps_to_bytes_per_sec(10)),
    )


PRESETS: dict[str, ExperimentSpec] = {
    "small-scale": ExperimentSpec(
        name="small-scale",
        model=ModelConfig(heads=4, d_model=2048, new_tokens=4),
        scenario=_default_scenario(3),
        device_counts=(3, 5),
        policies=ALL_POLICIES,
        seeds=tuple(range(20)),
        outputs="results/small-scale",
    ),
    "medium-scale": ExperimentSpec(
        name="medium-scale",
        model=ModelConfig(heads=32, d_model=2048, new_tokens=1000),
        scenario=_default_scenario(25),
        policies=(PolicyKind.RESOURCE_AWARE, PolicyKind.EDGESHARD_LIKE, PolicyKind.GALAXY_LIKE),
        seeds=tuple(range(5)),
        # ffn alone needs ~36 GFLOP per interval near n=1000; a 2 s reference
        # interval keeps it placeable on loaded devices
        limits=Limits(t_ref=2.0),
        outputs="results/medium-scale",
    ),
}


def preset(name: str) -> ExperimentSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


# -- running -------------------------------------------------------------------


@dataclass(frozen=True)
class RunResult:
    policy: PolicyKind
    seed: int
    devices: int
    trace: RunTrace | None = None
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.trace is not None


def run_one(spec: ExperimentSpec, policy: PolicyKind, seed: int) -> RunResult:
    scenario = spec.scenario_for(seed)
    try:
        trace = run_inference(
            spec.model,
            scenario,
            policy,
            spec.limits,
            include_tail_compute=spec.include_tail_compute,
            galaxy_k=spec.galaxy_k,
        )
    except (RunFailure, ConfigError) as exc:
        return RunResult(policy, seed, scenario.device_count, error=str(exc))
    return RunResult(policy, seed, scenario.device_count, trace)


def _run_task(args) -> RunResult:
    return run_one(*args)


def run_matrix(spec: ExperimentSpec, jobs: int = 1) -> list[RunResult]:
    """Every (policy, seed) run, ordered by the experiment's policy order then seed."""
    tasks = [(spec, p, s) for p in spec.policies for s in sorted(spec.seeds)]
    if jobs <= 1 or len(tasks) == 1:
        return [_run_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        # map() yields in submission order whatever the completion order
        return list(pool.map(_run_task, tasks, chunksize=1))


# -- CSV output ----------------------------------------------------------------


def _csv_text(columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def trace_rows(trace: RunTrace) -> list[list]:
    lam = trace.config.tokens_per_interval
    n_max = trace.config.new_tokens
    rows = []
    cumulative = 0.0
    for r in trace.records:
        cumulative += r.objective
        rows.append(
            [
                r.tau,
                min(r.tau * lam, n_max),
                r.status,
                r.objective,
                cumulative,
                r.delay.total_inference,
                r.delay.total_migration,
                r.delay.sync_delay,
                sum(r.memory),
                max(r.memory),
                " ".join(f"{j}:{used}>{fmt(cap)}" for j, used, cap in r.violations),
                " ".join(f"{b}:{s}>{d}" for b, s, d in r.migrations),
                r.assignment.encode(),
            ]
        )
    return rows


def trace_csv(trace: RunTrace) -> str:
    return _csv_text(TRACE_COLUMNS, trace_rows(trace))


def summary_rows(results: Sequence[RunResult]) -> list[list]:
    optimal = {
        r.seed: r.trace.total_latency
        for r in results
        if r.policy is PolicyKind.OPTIMAL and r.ok
    }
    has_optimal = any(r.policy is PolicyKind.OPTIMAL for r in results)
    rows = []
    for r in results:
        if not r.ok:
            rows.append([r.policy.value, r.seed, r.devices, "failed"] + [None] * 7 + [r.error])
            continue
        t = r.trace
        total = t.total_latency
        ratio = None
        if has_optimal and r.seed in optimal and optimal[r.seed] > 0:
            ratio = total / optimal[r.seed]
        rows.append(
            [
                r.policy.value,
                r.seed,
                r.devices,
                "ok",
                total,
                t.peak_memory,
                t.total_memory[-1],
                t.infeasible_intervals,
                t.violation_intervals,
                t.migration_total,
                ratio,
                "",
            ]
        )
    return rows


def summary_csv(results: Sequence[RunResult]) -> str:
    return _csv_text(SUMMARY_COLUMNS, summary_rows(results))


def plot_series(results: Sequence[RunResult]) -> tuple[str, str]:
    """Latency and memory per token step, mean and population std across seeds."""
    lat_rows, mem_rows = [], []
    policies = list(dict.fromkeys(r.policy for r in results))
    for policy in policies:
        traces = [r.trace for r in results if r.policy is policy and r.ok]
        if not traces:
            continue
        lam = traces[0].config.tokens_per_interval
        n_max = traces[0].config.new_tokens
        step = np.array([[rec.objective for rec in t.records] for t in traces])
        cumulative = np.cumsum(step, axis=1)
        total_mem = np.array([t.total_memory for t in traces], dtype=float)
        peak_mem = np.array([[max(rec.memory) for rec in t.records] for t in traces], dtype=float)
        for k in range(step.shape[1]):
            n = min((k + 1) * lam, n_max)
            lat_rows.append(
                [
                    policy.value, n, len(traces),
                    float(step[:, k].mean()), float(step[:, k].std()),
                    float(cumulative[:, k].mean()), float(cumulative[:, k].std()),
                ]
            )
            mem_rows.append(
                [
                    policy.value, n, len(traces),
                    float(total_mem[:, k].mean()), float(total_mem[:, k].std()),
                    float(peak_mem[:, k].mean()), float(peak_mem[:, k].std()),
                ]
            )
    lat = _csv_text(
        ("policy", "n", "runs", "step_latency_mean_s", "step_latency_std_s",
         "cumulative_latency_mean_s", "cumulative_latency_std_s"),
        lat_rows,
    )
    mem = _csv_text(
        ("policy", "n", "runs", "total_memory_mean_bytes", "total_memory_std_bytes",
         "peak_device_memory_mean_bytes", "peak_device_memory_std_bytes"),
        mem_rows,
    )
    return lat, mem


# -- optimality gap ------------------------------------------------------------


@dataclass(frozen=True)
class GapStats:
    policy: str
    seeds: int
    minimum: float
    median: float
    mean: float
    maximum: float
    # seeds on which ResourceAware's ratio is <= this policy's
    resource_aware_no_worse: int


@dataclass(frozen=True)
class GapReport:
    stats: tuple[GapStats, ...]
    excluded_seeds: tuple[int, ...]
    failures: tuple[tuple[str, int, str], ...] = field(default=())

    def get(self, policy: str) -> GapStats:
        for s in self.stats:
            if s.policy == policy:
                return s
        raise KeyError(policy)

    def render(self) -> str:
        lines = ["policy           seeds      min   median     mean      max  RA<=policy"]
        for s in self.stats:
            lines.append(
                f"{s.policy:<16} {s.seeds:>5} {s.minimum:8.4f} {s.median:8.4f} "
                f"{s.mean:8.4f} {s.maximum:8.4f}  {s.resource_aware_no_worse:>4}/{s.seeds}"
            )
        if self.excluded_seeds:
            lines.append("excluded seeds (a run failed): " + " ".join(map(str, self.excluded_seeds)))
            for policy, seed, note in self.failures:
                lines.append(f"  {policy} seed {seed}: {note}")
        return "\n".join(lines) + "\n"


def read_summary(paths: Sequence) -> list[dict[str, str]]:
    rows: list[dict[str, str]] = []
    seen = set()
    for path in paths:
        try:
            with open(path, newline="") as fh:
                reader = csv.DictReader(fh)
                missing = {"policy", "seed", "status", "total_latency_s"} - set(reader.fieldnames or ())
                if missing:
                    raise ConfigError(f"{path}: missing column(s) {', '.join(sorted(missing))}")
                for row in reader:
                    key = (row["policy"], row["seed"])
                    if key in seen:
                        raise ConfigError(f"{path}: duplicate row for {row['policy']} seed {row['seed']}")
                    seen.add(key)
                    rows.append(row)
        except OSError as exc:
            raise ConfigError(f"cannot read summary {path}: {exc}") from None
    return rows


def report_optimality_gap(paths_or_rows) -> GapReport:
    """Ratio of each policy's total latency to Optimal's on the same seed.

    Seeds where any run failed are left out of every distribution.
    """
    rows = paths_or_rows
    if rows and not isinstance(rows[0], Mapping):
        rows = read_summary(rows)
    ref = PolicyKind.OPTIMAL.value
    if not any(r["policy"] == ref for r in rows):
        raise ConfigError("summary has no Optimal rows; the gap is undefined")
    seeds = sorted({int(r["seed"]) for r in rows})
    failures = tuple(
        (r["policy"], int(r["seed"]), r.get("note", ""))
        for r in rows
        if r["status"] != "ok"
    )
    excluded = {seed for _, seed, _ in failures}
    optimal = {int(r["seed"]): float(r["total_latency_s"]) for r in rows if r["policy"] == ref and r["status"] == "ok"}
    for seed in seeds:
        if seed not in optimal and seed not in excluded:
            raise ConfigError(f"seed {seed} has no Optimal row")
    ratios: dict[str, dict[int, float]] = {}
    for r in rows:
        seed = int(r["seed"])
        if seed in excluded:
            continue
        ratios.setdefault(r["policy"], {})[seed] = float(r["total_latency_s"]) / optimal[seed]
    ra = ratios.get(PolicyKind.RESOURCE_AWARE.value, {})
    stats = []
    for policy, by_seed in ratios.items():
        values = [by_seed[s] for s in sorted(by_seed)]
        no_worse = sum(1 for s, v in by_seed.items() if s in ra and ra[s] <= v)
        stats.append(
            GapStats(
                policy,
                len(values),
                min(values),
                statistics.median(values),
                statistics.fmean(values),
                max(values),
                no_worse,
            )
        )
    return GapReport(tuple(stats), tuple(sorted(excluded)), failures)


# -- top level -----------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentResult:
    spec: ExperimentSpec
    results: tuple[RunResult, ...]
    out_dir: Path
    files: tuple[Path, ...]

    @property
    def failures(self) -> list[RunResult]:
        return [r for r in self.results if not r.ok]

    def exit_code(self) -> int:
        return 2 if self.failures else 0


def _write(path: Path, text: str, files: list[Path]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)
    files.append(path)


def run_experiment(spec: ExperimentSpec, *, jobs: int = 1, out_dir=None) -> ExperimentResult:
    """Run the full matrix and write every requested output file."""
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")
    out = Path(out_dir if out_dir is not None else spec.outputs)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    results = run_matrix(spec, jobs)
    files: list[Path] = []
    _write(out / "spec.json", spec.dumps(), files)
    if spec.emit.summary_csv:
        _write(out / "summary.csv", summary_csv(results), files)
    if spec.emit.trace_csv:
        for r in results:
            if r.ok:
                _write(out / "traces" / f"{r.policy.value}_seed{r.seed}.csv", trace_csv(r.trace), files)
    if spec.emit.plotdata:
        lat, mem = plot_series(results)
        _write(out / "plot_latency.csv", lat, files)
        _write(out / "plot_memory.csv", mem, files)
    if PolicyKind.OPTIMAL in spec.policies and any(r.ok for r in results if r.policy is PolicyKind.OPTIMAL):
        report = report_optimality_gap(_csv_dicts(summary_csv(results)))
        _write(out / "gap.txt", report.render(), files)
    return ExperimentResult(spec, tuple(results), out, tuple(files))


def _csv_dicts(text: str) -> list[dict[str, str]]:
    return list(csv.DictReader(io.StringIO(text)))


def parse_trace_csv(text: str) -> list[dict[str, Any]]:
    """Read a trace CSV back; numeric columns become numbers."""
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        parsed: dict[str, Any] = dict(row)
        for key in ("tau", "tokens", "total_memory_bytes", "peak_device_memory_bytes"):
            parsed[key] = int(row[key])
        for key in ("objective_s", "cumulative_latency_s", "inference_s", "migration_s", "sync_s"):
            parsed[key] = float(row[key])
        out.append(parsed)
    return out


def is_close_9(a: float, b: float) -> bool:
    """Equal at the 9 significant digits the CSV files carry."""
    return math.isclose(a, b, rel_tol=5e-9, abs_tol=0.0) or fmt(a) == fmt(b)
