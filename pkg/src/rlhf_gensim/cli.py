"""Command-line entry point.

Subcommands: ``simulate``, ``sweep``, ``plan-bench``, ``gen-trace`` and
``validate``. Settings come from an optional JSON run config; any flag given
on the command line overrides the file. Exit codes: 0 success, 1 bad
configuration or input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, PlacementError, TraceFormatError, TraceValidationError
from .pipeline import STRATEGIES, PlannerConfig, TrainingResult, plan_step, run_training
from .placement import ClusterTopology
from .predictor import LengthHistory, NoiseModel, predict_lengths
from .profile import LatencyProfile
from .simulator import SimConfig
from .workload import SynthConfig, WorkloadTrace, generate_synthetic, load_trace, save_trace

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
SWEEP_PARAMS = {"tau": "tau", "lambda": "lam", "window": "window"}


@dataclass
class RunConfig:
    trace: str | None = None                # trace file; None generates one from ``synth``
    trace_format: str | None = None
    synth: dict = field(default_factory=lambda: {"paper_calibration": True})  # SynthConfig overrides
    strategies: list[str] = field(default_factory=lambda: ["elastic", "static_baseline"])
    tau: float = 0.7
    lam: float = 0.7
    window: int = 1
    alpha: float = 0.5
    n_min: int = 1
    n_max: int | None = None
    b_prefill: int = 256
    dedup: bool = True
    overlap_penalty: bool = True
    static_actors: int = 3
    profile: str | None = None              # latency profile JSON; None uses the built-in analytic one
    topology: str | None = None             # topology JSON; None uses 2 nodes x 8 GPUs
    rho: float | None = None                # overrides the profile's rate
    gpus_per_actor: int | None = None       # overrides the profile's value
    G: int = 4
    seed: int = 0
    max_prompt_len: int = 1024
    max_response_len: int = 2048
    kv_bytes_per_token: float = 36864.0
    migration_bytes_per_token: float | None = None
    model_bytes: float = 6.0e9
    prep_latency: float = 0.0
    learn_latency: float = 0.0
    prediction_accuracy: float = 1.0        # bucket accuracy of the length predictor
    record_events: bool = True
    output_dir: str = "out"

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(obj) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            obj = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(obj, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(obj)

    def validate(self) -> "RunConfig":
        for name in ("trace", "profile", "topology"):
            p = getattr(self, name)
            if p is not None and not Path(p).exists():
                raise ConfigError(f"{name} file not found: {p}")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad or not self.strategies:
            raise ConfigError(f"unknown strategies {bad}; choose from {', '.join(STRATEGIES)}")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must lie in (0, 1], got {self.tau}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not 0.0 <= self.prediction_accuracy <= 1.0:
            raise ConfigError("prediction_accuracy must lie in [0, 1]")
        if self.G < 1:
            raise ConfigError("G must be >= 1")
        if self.rho is not None and self.rho <= 0:
            raise ConfigError("rho must be positive")
        if self.kv_bytes_per_token < 0:
            raise ConfigError("kv_bytes_per_token must be non-negative")
        self.planner_config()
        return self

    # -- component construction

    def planner_config(self) -> PlannerConfig:
        return PlannerConfig(lam=self.lam, n_min=self.n_min, n_max=self.n_max, b_prefill=self.b_prefill,
                             dedup=self.dedup, overlap_penalty=self.overlap_penalty,
                             static_actors=self.static_actors, model_bytes=self.model_bytes)

    def sim_config(self) -> SimConfig:
        return SimConfig(tau=self.tau, kv_bytes_per_token=self.kv_bytes_per_token,
                         migration_bytes_per_token=self.migration_bytes_per_token,
                         prep_latency=self.prep_latency, learn_latency=self.learn_latency,
                         record_events=self.record_events)

    def latency_profile(self) -> LatencyProfile:
        prof = LatencyProfile.load(self.profile) if self.profile else LatencyProfile.analytic()
        if self.rho is not None:
            prof.rho = self.rho
        if self.gpus_per_actor is not None:
            if self.gpus_per_actor < 1:
                raise ConfigError("gpus_per_actor must be >= 1")
            prof.gpus_per_actor = self.gpus_per_actor
        return prof

    def cluster(self) -> ClusterTopology:
        return ClusterTopology.load(self.topology) if self.topology else ClusterTopology.uniform(2, 8)

    def synth_config(self) -> SynthConfig:
        names = {f.name for f in dataclasses.fields(SynthConfig)}
        unknown = sorted(set(self.synth) - names)
        if unknown:
            raise ConfigError(f"unknown synth keys: {', '.join(unknown)}")
        kw = {"responses_per_prompt": self.G, "max_prompt_len": self.max_prompt_len,
              "max_response_len": self.max_response_len, **self.synth}
        for key in ("prompt_len_range", "outlier_scale"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return SynthConfig(**kw)

    def workload(self) -> WorkloadTrace:
        if self.trace:
            return load_trace(self.trace, self.trace_format)
        return generate_synthetic(self.synth_config(), self.seed)

    def noise(self) -> NoiseModel | None:
        if self.prediction_accuracy >= 1.0:
            return None
        return NoiseModel(bucket_accuracy=self.prediction_accuracy, seed=self.seed)


# ---------------------------------------------------------------------------
# output helpers


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _csv_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


def _jsonl_text(objs) -> str:
    return "".join(json.dumps(o, sort_keys=True) + "\n" for o in objs)


def _format_table(rows: list[dict], cols: list[str]) -> str:
    def fmt(v):
        return f"{v:.4g}" if isinstance(v, float) else str(v)

    cells = [[c for c in cols]] + [[fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    lines = ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _run(cfg: RunConfig, trace: WorkloadTrace, strategy: str) -> TrainingResult:
    return run_training(trace, strategy, cfg.planner_config(), cfg.sim_config(), cfg.latency_profile(),
                        cfg.cluster(), window=cfg.window, alpha=cfg.alpha, noise=cfg.noise())


def _mean_busy(res: TrainingResult) -> float:
    """Mean over steps of the total decode busy seconds across actors."""
    return sum(sum(r.busy.values()) for r in res.steps) / len(res.steps)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig) -> int:
    cfg.validate()
    trace = cfg.workload()
    out = Path(cfg.output_dir)
    summary, table = {}, []
    for strategy in cfg.strategies:
        res = _run(cfg, trace, strategy)
        agg = res.aggregates()
        summary[strategy] = agg
        table.append(agg)
        d = out / strategy
        _write_atomic(d / "steps.csv", _csv_text([r.row() for r in res.steps]))
        _write_atomic(d / "plans.jsonl", _jsonl_text(p.to_dict() for p in res.plans))
        if cfg.record_events:
            _write_atomic(d / "events.jsonl",
                          _jsonl_text({"step": r.step_idx, **e} for r in res.steps for e in r.events))
    _write_atomic(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_atomic(out / "comparison.csv", _csv_text(table))
    cols = ["strategy", "mean_step_time", "mean_cost", "mean_gpu_seconds", "mean_actors", "total_cuts",
            "total_migrations", "total_redundant_prefill_tokens"]
    print(_format_table(table, cols))
    return EXIT_OK


def _direction(values: list[float]) -> tuple[str, list[int]]:
    """Trend of a series plus the steps ``i -> i+1`` that go against the
    first observed trend."""
    d = np.sign(np.diff(values))
    if np.all(d >= 0):
        return "non-decreasing", []
    if np.all(d <= 0):
        return "non-increasing", []
    first = d[d != 0][0]
    return "mixed", [int(i) for i in np.nonzero(d == -first)[0]]


def cmd_sweep(cfg: RunConfig, param: str, values: list[float], strategy: str = "elastic") -> int:
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"cannot sweep {param!r}; choose from {', '.join(SWEEP_PARAMS)}")
    if not values:
        raise ConfigError("no sweep values given")
    cfg.validate()
    if param == "window":
        if any(v != int(v) for v in values):
            raise ConfigError(f"window values must be integers, got {values}")
        values = [int(v) for v in values]
    points = [dataclasses.replace(cfg, **{SWEEP_PARAMS[param]: v}).validate() for v in values]
    trace = cfg.workload()  # one trace instance for every point
    rows = []
    for p, v in zip(points, values):
        res = _run(p, trace, strategy)
        agg = res.aggregates()
        rows.append({"value": v, "mean_cost": agg["mean_cost"], "mean_time": agg["mean_step_time"],
                     "mean_gpu_seconds": agg["mean_gpu_seconds"], "mean_busy": _mean_busy(res),
                     "mean_actors": agg["mean_actors"], "total_cuts": agg["total_cuts"],
                     "total_migrations": agg["total_migrations"]})
    out = Path(cfg.output_dir)
    _write_atomic(out / f"sweep_{param}.csv", _csv_text(rows))
    order = sorted(range(len(rows)), key=lambda i: rows[i]["value"])
    diag = {"param": param, "strategy": strategy, "values": [rows[i]["value"] for i in order],
            "migration_disabled": cfg.sim_config().migration_bytes == float("inf")}
    for metric in ("mean_cost", "mean_time", "mean_busy"):
        series = [rows[i][metric] for i in order]
        direction, against = _direction(series) if len(series) > 1 else ("constant", [])
        diag[metric] = {"direction": direction, "against_trend": against}
    _write_atomic(out / f"sweep_{param}_diagnostics.json", json.dumps(diag, indent=2, sort_keys=True) + "\n")
    print(_format_table(rows, ["value", "mean_cost", "mean_time", "mean_busy", "mean_actors"]))
    for metric in ("mean_cost", "mean_time", "mean_busy"):
        print(f"{metric}: {diag[metric]['direction']} in {param}")
    return EXIT_OK


def bench_inputs(batch_size: int, nodes: int, gpus_per_node: int, seed: int = 0, G: int = 4):
    """A synthetic batch with one step of history, and a matching cluster."""
    trace = generate_synthetic(SynthConfig(num_prompts=batch_size, num_steps=2, responses_per_prompt=G,
                                           paper_calibration=True), seed)
    history = LengthHistory()
    history.observe_step(trace.steps[0])
    batch = trace.batch(trace.steps[1])
    return trace, history, batch, ClusterTopology.uniform(nodes, gpus_per_node)


def plan_once(batch, history, G, pcfg, scfg, profile, topo) -> float:
    """Milliseconds for predict + dedup + assign + scale + place on one batch."""
    t0 = time.perf_counter()
    predicted = predict_lengths(history, batch)
    plan_step(1, batch, predicted, G, "elastic", pcfg, scfg, profile, topo)
    return (time.perf_counter() - t0) * 1e3


def cmd_plan_bench(cfg: RunConfig, batch_size: int, nodes: int, gpus_per_node: int = 8,
                   repeats: int = 5, warmup: int = 1) -> list[float]:
    if batch_size < 1 or nodes < 1 or gpus_per_node < 1 or repeats < 1:
        raise ConfigError("batch size, node count, GPUs per node and repeats must be >= 1")
    cfg.validate()
    _, history, batch, topo = bench_inputs(batch_size, nodes, gpus_per_node, cfg.seed, cfg.G)
    profile, pcfg, scfg = cfg.latency_profile(), cfg.planner_config(), cfg.sim_config()
    for _ in range(warmup):
        plan_once(batch, history, cfg.G, pcfg, scfg, profile, topo)
    times = [plan_once(batch, history, cfg.G, pcfg, scfg, profile, topo) for _ in range(repeats)]
    for i, ms in enumerate(times):
        print(f"run {i}: {ms:.3f} ms")
    print(f"median: {float(np.median(times)):.3f} ms  (batch {batch_size}, {nodes}x{gpus_per_node} GPUs)")
    return times


def cmd_gen_trace(cfg: RunConfig, path: str, fmt: str | None = None) -> int:
    trace = generate_synthetic(cfg.synth_config(), cfg.seed)
    save_trace(trace, path, fmt)
    print(f"wrote {len(trace.steps)} steps, {len(trace.prompts)} prompts to {path}")
    return EXIT_OK


def cmd_validate(path: str, fmt: str | None = None) -> int:
    if not Path(path).exists():
        raise ConfigError(f"trace file not found: {path}")
    trace = load_trace(path, fmt)
    n_resp = sum(s.n_responses() for s in trace.steps)
    print(f"ok: {len(trace.prompts)} prompts, {len(trace.steps)} steps, G={trace.responses_per_prompt}, "
          f"{n_resp} responses")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


_FLAGS = [
    ("--trace", str, "trace file (csv or jsonl)"),
    ("--trace-format", str, "csv or jsonl; inferred from the suffix by default"),
    ("--tau", float, "cut threshold"),
    ("--lam", float, "scaling weight between time and cost"),
    ("--window", int, "history window per prompt"),
    ("--alpha", float, "EWMA smoothing weight"),
    ("--n-min", int, "fewest decode actors"),
    ("--n-max", int, "most decode actors"),
    ("--b-prefill", int, "prompts per prefill pass"),
    ("--dedup", _bool, "shared prefill on the learner GPUs"),
    ("--overlap-penalty", _bool, "penalise actor counts whose transfers cannot be hidden"),
    ("--static-actors", int, "actor count of the baselines"),
    ("--profile", str, "latency profile JSON"),
    ("--topology", str, "cluster topology JSON"),
    ("--rho", float, "dollars per GPU-second"),
    ("--gpus-per-actor", int, "GPUs per decode actor"),
    ("--G", int, "responses per prompt (synthetic traces)"),
    ("--seed", int, "random seed"),
    ("--max-prompt-len", int, "longest prompt in tokens"),
    ("--max-response-len", int, "longest response in tokens"),
    ("--kv-bytes-per-token", float, "KV cache bytes per token"),
    ("--migration-bytes-per-token", float, "bytes per token moved on migration (inf disables)"),
    ("--model-bytes", float, "model weight bytes"),
    ("--prep-latency", float, "fixed preparation phase seconds"),
    ("--learn-latency", float, "fixed learning phase seconds"),
    ("--prediction-accuracy", float, "bucket accuracy of the length predictor"),
    ("--record-events", _bool, "write the event log"),
    ("--output-dir", str, "output directory"),
]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--strategies", help="comma-separated strategies")
    p.add_argument("--synth", help="JSON object of synthetic-trace overrides")
    for flag, typ, help_ in _FLAGS:
        p.add_argument(flag, type=typ, default=None, help=help_,
                       dest=flag[2:].replace("-", "_"))


def config_from_args(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    updates = {}
    for flag, _, _ in _FLAGS:
        name = flag[2:].replace("-", "_")
        v = getattr(args, name)
        if v is not None:
            updates[name] = v
    if args.strategies:
        updates["strategies"] = [s.strip() for s in args.strategies.split(",") if s.strip()]
    if args.synth:
        try:
            extra = json.loads(args.synth)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--synth is not valid JSON: {exc}") from None
        updates["synth"] = {**cfg.synth, **extra}
    return dataclasses.replace(cfg, **updates)


def _parse_values(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"sweep values must be numbers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rlhf-gensim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="replay a trace under one or more strategies")
    _add_config_flags(p)

    p = sub.add_parser("sweep", help="vary one hyperparameter on a fixed trace")
    _add_config_flags(p)
    p.add_argument("--param", required=True, choices=sorted(SWEEP_PARAMS))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--strategy", default="elastic", choices=STRATEGIES)

    p = sub.add_parser("plan-bench", help="time the per-step planning pipeline")
    _add_config_flags(p)
    p.add_argument("--batch-size", type=int, default=512)
    p.add_argument("--nodes", type=int, default=20)
    p.add_argument("--gpus-per-node", type=int, default=8)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)

    p = sub.add_parser("gen-trace", help="write a synthetic trace")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "jsonl"))

    p = sub.add_parser("validate", help="check a trace file")
    p.add_argument("path")
    p.add_argument("--format", choices=("csv", "jsonl"))
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            return cmd_validate(args.path, args.format)
        cfg = config_from_args(args)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.param, _parse_values(args.values), args.strategy)
        if args.command == "plan-bench":
            cmd_plan_bench(cfg, args.batch_size, args.nodes, args.gpus_per_node, args.repeats, args.warmup)
            return EXIT_OK
        if args.command == "gen-trace":
            return cmd_gen_trace(cfg, args.out, args.format)
    except (ConfigError, TraceFormatError, TraceValidationError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PlacementError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
