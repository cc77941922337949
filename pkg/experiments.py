# ============================================================
# Experiment runners behind the CLI subcommands
# ============================================================
"""
Every runner takes a RunSpec, writes manifest.json first, then its
results into spec.output_dir:

    report.json   deterministic results (no wall-clock values)
    timings.json  wall-clock measurements, when the run has any
    *.csv         plot-ready tables

and records run_started / artifact_written / run_finished events in the
hash-chained ledger one level above the run directory.
"""

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence

import numpy as np

import persistence
from config import LAB_VERSION, SCHEMA_VERSION, RunSpec, load_section
from data import BatchStream, gen_selective_copy, load_text_corpus
from dynamics import (
    divergence_probe,
    fit_deviation_rate,
    half_ratio,
    lyapunov_closed_form,
    lyapunov_numeric,
    precision_probe,
)
from errors import DynamicsError, LabError, LoraError, TrainingError
from lora import load_adapters, save_adapters, verify_tying
from numerics import FP64_POLICY, PrecisionPolicy, max_relative_deviation
from ssm_core import ScanElements, mamba_forward, random_params, scan_parallel, scan_sequential
from toy_model import ToyLM, save_model
from train import POLICY_PRESETS, Variant, compare_variants, efficiency_check, evaluate, train_loop

logger = logging.getLogger(__name__)

POSITIVE_TOLERANCE = 0.0


class RunContext:
    """Lock, manifest and ledger bookkeeping around one run directory."""

    def __init__(self, spec: RunSpec, config):
        self.spec = spec
        self.config = config
        self.directory = spec.output_dir
        self.ledger = os.path.join(os.path.dirname(os.path.abspath(spec.output_dir)), persistence.LEDGER_NAME)
        self._lock = None

    def __enter__(self) -> "RunContext":
        self._lock = persistence.output_lock(self.directory)
        self._lock.__enter__()
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "lab_version": LAB_VERSION,
            "subcommand": self.spec.subcommand,
            "seed": self.spec.seed,
            "workers": self.spec.workers,
            "config": self.config.model_dump(mode="json"),
            "config_path": self.spec.config_path,
            "overrides": dict(self.spec.overrides),
        }
        persistence.write_json(self.path("manifest.json"), manifest)
        self._event("run_started", run=os.path.basename(os.path.abspath(self.directory)), subcommand=self.spec.subcommand)
        logger.info("[RUN] %s -> %s (seed %d)", self.spec.subcommand, self.directory, self.spec.seed)
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "ok" if exc is None else "failed"
        try:
            self._event("run_finished", status=status, error=getattr(exc, "message", None) if exc else None)
        finally:
            self._lock.__exit__(exc_type, exc, tb)
        return False

    def path(self, name: str) -> str:
        return os.path.join(self.directory, name)

    def _event(self, event: str, **fields) -> None:
        persistence.append_event(self.ledger, {"event": event, **fields})

    def record_artifact(self, name: str) -> None:
        self._event("artifact_written", artifact=name, sha256=persistence.file_sha256(self.path(name)))

    def write_json(self, name: str, payload: dict) -> None:
        body = dict(payload)
        body["schema_version"] = SCHEMA_VERSION
        persistence.write_json(self.path(name), body)
        self.record_artifact(name)

    def write_csv(self, name: str, header: Sequence[str], rows) -> None:
        persistence.write_csv(self.path(name), header, rows, schema_version=SCHEMA_VERSION)
        self.record_artifact(name)


def _map(fn, items, workers: int) -> list:
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _section(spec: RunSpec):
    return load_section(spec.subcommand, spec.config_path, spec.overrides, preset=spec.option("preset"))


# ============================================================
# lyapunov
# ============================================================
def run_lyapunov(spec: RunSpec) -> int:
    cfg = _section(spec)
    if cfg.draws <= 0:
        raise DynamicsError("no draws requested")
    if not cfg.d or not cfg.T:
        raise DynamicsError("d and T grids must not be empty")

    def draw(i: int) -> dict:
        d = cfg.d[i % len(cfg.d)]
        T = cfg.T[(i // len(cfg.d)) % len(cfg.T)]
        params = random_params(d, T, cfg.mode, seed=[spec.seed, i], gate_enabled=cfg.gate_enabled, weight_scale=cfg.weight_scale)
        u = np.random.default_rng([spec.seed, i, 1]).standard_normal((T, d))
        trace = mamba_forward(params, u, None, FP64_POLICY)
        closed = lyapunov_closed_form(params.A_log, trace.delta_bar)
        numeric = lyapunov_numeric(params, u)
        return {
            "draw": i,
            "d": d,
            "T": T,
            "lambda_max": numeric.lambda_max,
            "closed_form_lambda_max": closed.lambda_max,
            "max_abs_gap": float(np.max(np.abs(numeric.per_dim - closed.per_dim))),
            "per_dim": numeric.per_dim,
        }

    with RunContext(spec, cfg) as run:
        records = _map(draw, range(cfg.draws), spec.workers)
        summary = {
            "draws": len(records),
            "max_lambda": max(r["lambda_max"] for r in records),
            "positive_count": sum(1 for r in records if r["lambda_max"] > POSITIVE_TOLERANCE),
            "max_closed_form_gap": max(r["max_abs_gap"] for r in records),
        }
        run.write_json("report.json", {"estimates": records, "summary": summary})
        run.write_csv(
            "lyapunov.csv",
            ["draw", "d", "T", "lambda_max", "closed_form_lambda_max"],
            ([r["draw"], r["d"], r["T"], r["lambda_max"], r["closed_form_lambda_max"]] for r in records),
        )
    logger.info("[LYAPUNOV] %d draws, max lambda %.3e, %d positive", summary["draws"], summary["max_lambda"], summary["positive_count"])
    return 0


# ============================================================
# divergence
# ============================================================
def run_divergence(spec: RunSpec) -> int:
    cfg = _section(spec)
    if cfg.models <= 0:
        raise DynamicsError("no draws requested")

    draws = []
    for m in range(cfg.models):
        params = random_params(cfg.d, cfg.T, cfg.mode, seed=[spec.seed, m], gate_enabled=cfg.gate_enabled)
        u = np.random.default_rng([spec.seed, m, 1]).standard_normal((cfg.T, cfg.d))
        draws.append((params, u))

    def probe(job):
        policy_name, epsilon = job
        policy = POLICY_PRESETS[policy_name]
        traces, zetas, overflowed = [], [], False
        for params, u in draws:
            trace = divergence_probe(params, u, epsilon, cfg.perturb, policy)
            traces.append(trace.deviations)
            overflowed = overflowed or trace.overflowed
            try:
                zetas.append(fit_deviation_rate(trace))
            except DynamicsError:
                pass
        return policy_name, epsilon, np.mean(np.stack(traces), axis=0), zetas, overflowed

    def reference_gap(policy_name: str):
        policy = POLICY_PRESETS[policy_name]
        means, ratios, overflowed = [], [], False
        for params, u in draws:
            trace = precision_probe(params, u, policy, FP64_POLICY)
            overflowed = overflowed or trace.overflowed
            means.append(float(np.mean(trace.deviations)))
            ratios.append(half_ratio(trace))
        return {
            "policy": policy_name,
            "mean_divergence": float(np.mean(means)),
            "max_half_ratio": float(np.max(ratios)),
            "overflowed": overflowed,
        }

    jobs = [(p, eps) for p in cfg.policies for eps in cfg.epsilons]
    with RunContext(spec, cfg) as run:
        rows = []
        for policy_name, epsilon, mean_trace, zetas, overflowed in _map(probe, jobs, spec.workers):
            name = f"divergence_{policy_name}_eps{epsilon:g}.csv"
            run.write_csv(name, ["step", "deviation"], ([t + 1, v] for t, v in enumerate(mean_trace)))
            rows.append({
                "policy": policy_name,
                "epsilon": epsilon,
                "trace_file": name,
                "mean_deviation": float(np.mean(mean_trace)),
                "first_deviation": float(mean_trace[0]),
                "last_deviation": float(mean_trace[-1]),
                "zeta_max": max(zetas) if zetas else None,
                "zeta_fitted": len(zetas),
                "overflowed": overflowed,
            })
        precision_rows = _map(reference_gap, list(cfg.policies), spec.workers)
        run.write_csv(
            "divergence_summary.csv",
            ["policy", "mean_divergence", "max_half_ratio"],
            ([r["policy"], r["mean_divergence"], r["max_half_ratio"]] for r in precision_rows),
        )
        run.write_json("report.json", {"probes": rows, "precision": precision_rows})
    return 0


# ============================================================
# scan-bench
# ============================================================
def run_scan_bench(spec: RunSpec) -> int:
    cfg = _section(spec)
    fmt = PrecisionPolicy.named(cfg.precision).activation_format
    workers_grid = sorted(set(cfg.workers) | {spec.workers})

    rows, timings = [], []
    for T in cfg.T:
        rng = np.random.default_rng([spec.seed, T])
        elements = ScanElements(rng.uniform(0.5, 1.0, size=(T, cfg.d)), rng.standard_normal((T, cfg.d)))
        x0 = rng.standard_normal(cfg.d)

        seq_times = []
        for _ in range(cfg.repeats):
            started = time.perf_counter()
            reference = scan_sequential(elements, x0, fmt)
            seq_times.append(time.perf_counter() - started)

        first = None
        for workers in workers_grid:
            par_times = []
            for _ in range(cfg.repeats):
                started = time.perf_counter()
                result = scan_parallel(elements, x0, chunk=cfg.chunk, workers=workers, fmt=fmt)
                par_times.append(time.perf_counter() - started)
            if first is None:
                first = result
            rows.append({
                "T": T,
                "workers": workers,
                "max_deviation": max_relative_deviation(result, reference),
                "matches_other_workers": bool(np.array_equal(result, first)),
            })
            timings.append({"T": T, "workers": workers, "sequential_s": min(seq_times), "parallel_s": min(par_times)})

    with RunContext(spec, cfg) as run:
        run.write_json("report.json", {"rows": rows, "precision": fmt.value, "chunk": cfg.chunk})
        run.write_json("timings.json", {"rows": timings})
        run.write_csv(
            "scan_bench.csv",
            ["T", "workers", "max_deviation", "sequential_s", "parallel_s"],
            ([r["T"], r["workers"], r["max_deviation"], t["sequential_s"], t["parallel_s"]] for r, t in zip(rows, timings)),
        )
    return 0


# ============================================================
# train
# ============================================================
def _train_data(cfg, seed: int):
    if cfg.corpus:
        stream = load_text_corpus(cfg.corpus, cfg.T, seed=seed, batch_size=cfg.batch_size)
        split = max(1, len(stream) // 10) if len(stream) > 1 else 0
        heldout = (stream.inputs[:split], stream.targets[:split]) if split else (stream.inputs, stream.targets)
        train = stream
        if split:
            train = BatchStream(stream.inputs[split:], stream.targets[split:], stream.vocab_size, seed, cfg.batch_size, stream.pad_id)
        return train, heldout
    train = gen_selective_copy(seed, cfg.T, cfg.vocab, cfg.n_train, k=cfg.k, batch_size=cfg.batch_size)
    held = gen_selective_copy(seed + 1, cfg.T, cfg.vocab, cfg.n_heldout, k=cfg.k, batch_size=cfg.batch_size)
    return train, (held.inputs, held.targets)


def _parse_variants(names: Sequence[str]) -> Optional[List[Variant]]:
    if not names:
        return None
    out = []
    for name in names:
        method, _, precision = name.partition("-")
        if method not in ("Full", "ALL", "SLL") or precision not in POLICY_PRESETS:
            raise LabError(f"unknown variant '{name}'")
        out.append(Variant(method, precision))
    return out


def run_train(spec: RunSpec) -> int:
    cfg = _section(spec)
    tcfg = cfg.train_config(spec.seed)
    if cfg.precision not in POLICY_PRESETS:
        raise TrainingError(None, f"unknown precision policy '{cfg.precision}'")
    policy = POLICY_PRESETS[cfg.precision]

    data, heldout = _train_data(cfg, spec.seed)
    if data.is_empty():
        raise TrainingError(None, "training data is empty")
    if heldout[0].shape[0] == 0:
        heldout = (data.inputs[:1], data.targets[:1])

    def build(seed: int) -> ToyLM:
        return ToyLM(data.vocab_size, cfg.d, cfg.mode, T_max=max(cfg.T, data.seq_len), gate_enabled=cfg.gate_enabled, seed=seed)

    with RunContext(spec, cfg) as run:
        if spec.option("compare"):
            rows, summary = compare_variants(tcfg, build, data, heldout, _parse_variants(cfg.variants))
            check = efficiency_check(rows)
            run.write_json("report.json", {
                "variants": [row.to_dict(timings=False) for row in rows],
                "summary": summary,
                "memory_ok": check.get("memory_ok"),
                "config": tcfg.model_dump(mode="json"),
            })
            run.write_json("timings.json", {
                "variants": [{"variant": r.variant, "atps": r.metrics.atps, "atps_ratio": r.atps_ratio, "wall_seconds": r.metrics.wall_seconds} for r in rows],
                "efficiency": check,
            })
            run.write_csv(
                "compare.csv",
                ["variant", "atps", "atps_ratio", "mmpt", "mmpt_ratio", "peak_bytes", "divergence"],
                ([r.variant, r.metrics.atps, r.atps_ratio, r.metrics.mmpt, r.mmpt_ratio, r.metrics.peak_bytes, r.divergence] for r in rows),
            )
            if check.get("available") and not (check["atps_ok"] and check["memory_ok"]):
                logger.warning("[TRAIN] efficiency direction not met: %s", check)
                if cfg.strict_efficiency:
                    raise TrainingError(None, "efficiency direction check failed")
            return 0

        model = build(spec.seed)
        metrics = train_loop(model, tcfg, policy, data)
        evaluation = evaluate(model, heldout, FP64_POLICY)

        report = metrics.deterministic_dict()
        report["config"] = tcfg.model_dump(mode="json")
        report["evaluation"] = evaluation.to_dict()
        report["checkpoints"] = []
        if metrics.steps > 0:
            save_model(run.path("model.ssmd"), model)
            run.record_artifact("model.ssmd")
            report["checkpoints"].append("model.ssmd")
            if model.adapters:
                save_adapters(run.path("adapters.ssmd"), model.adapters, {"d": model.d, "mode": model.mode.value})
                run.record_artifact("adapters.ssmd")
                report["checkpoints"].append("adapters.ssmd")

        run.write_json("report.json", report)
        run.write_json("metrics.json", metrics.to_dict(tcfg))
        run.write_csv("metrics.csv", ["step", "lr", "loss", "grad_norm"], ([r["step"], r["lr"], r["loss"], r["grad_norm"]] for r in metrics.rows()))
    return 0


# ============================================================
# lora-verify
# ============================================================
def run_lora_verify(spec: RunSpec) -> int:
    cfg = _section(spec)
    path = spec.option("checkpoint") or cfg.checkpoint
    if not path:
        raise LoraError("checkpoint has no adapter")
    adapters, merged, meta = load_adapters(path)
    if "fused_buffer" not in adapters:
        raise LoraError("checkpoint has no adapter")
    if "d" not in meta:
        raise LoraError("checkpoint metadata lacks d")

    adapter = adapters["fused_buffer"]
    report = verify_tying(adapter, int(meta["d"]), delta=merged["fused_buffer"] - adapter.base)
    with RunContext(spec, cfg) as run:
        run.write_json("report.json", {"checkpoint": os.path.basename(path), "target": "fused_buffer", "tying": report.to_dict(), "ok": report.ok})
    if not report.ok:
        logger.error("[LORA] tying check failed for %s", path)
        return 2
    return 0


# ============================================================
# report
# ============================================================
def index_runs(root: str) -> List[Dict]:
    runs = []
    if not os.path.isdir(root):
        return runs
    for name in sorted(os.listdir(root)):
        manifest_path = os.path.join(root, name, "manifest.json")
        if not os.path.isfile(manifest_path):
            continue
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
        runs.append({
            "name": name,
            "subcommand": manifest.get("subcommand"),
            "seed": manifest.get("seed"),
            "schema_version": manifest.get("schema_version"),
            "has_report": os.path.isfile(os.path.join(root, name, "report.json")),
        })
    return runs


def run_report(spec: RunSpec) -> int:
    cfg = _section(spec)
    root = spec.output_dir
    runs = index_runs(root)
    os.makedirs(root, exist_ok=True)
    persistence.write_json(os.path.join(root, "index.json"), {
        "runs": runs,
        "schema_version": SCHEMA_VERSION,
        "lab_version": LAB_VERSION,
        "config": cfg.model_dump(mode="json"),
    })
    ledger = os.path.join(root, persistence.LEDGER_NAME)
    ledger_ok = None
    if os.path.exists(ledger):
        ledger_ok, _ = persistence.verify_ledger(ledger)
    logger.info("[REPORT] indexed %d runs under %s (ledger ok: %s)", len(runs), root, ledger_ok)

    if spec.option("serve"):
        import uvicorn

        from routes.reports import create_app

        uvicorn.run(create_app(root), host=spec.option("host") or cfg.host, port=int(spec.option("port") or cfg.port))
    return 0


RUNNERS = {
    "lyapunov": run_lyapunov,
    "divergence": run_divergence,
    "scan-bench": run_scan_bench,
    "train": run_train,
    "lora-verify": run_lora_verify,
    "report": run_report,
}
