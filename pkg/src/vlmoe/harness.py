"""Experiment orchestration: training runs, ablation sweeps, routing reports, EP simulation."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data, objectives as O
from . import svg
from .model import (
    IMAGE,
    TEXT,
    MoMEConfig,
    MoMEModel,
    per_token_param_count,
    router_param_count,
    total_param_count,
)
from .parallel import DEFAULT_ALPHA, WorkerTopology, imbalance_metrics, trace_from_assignments
from .tensor import load_checkpoint

log = logging.getLogger(__name__)

AXES = {
    "experts": [1, 4, 8, 16, 32],
    "strategy": ["none", "T", "V", "TV"],
    "aux": ["load", "vloss", "zloss"],
    "bpr": ["on", "off"],
}


class SpecError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    model: dict = field(default_factory=dict)  # MoMEConfig overrides
    steps: int = 2000
    seeds: list[int] = field(default_factory=lambda: [0])
    batch: list[int] = field(default_factory=lambda: [32, 32, 32])
    objectives: dict = field(default_factory=lambda: {"mlm": True, "mim": True, "vlm": True})
    axis: str | None = None
    axis_values: list | None = None
    out: str = "runs/default"
    train_scenes: int = 4096
    val_scenes: int = 128
    eval_every: int = 100
    routing_log_every: int = 500
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_frac: float = 0.05
    init_checkpoint: str | None = None
    freeze_moe: bool = False
    record_wall_time: bool = False
    alpha: float = DEFAULT_ALPHA

    def validate(self) -> None:
        if self.steps < 0:
            raise SpecError("steps must be >= 0")
        if not self.seeds or any(not isinstance(s, int) or s < 0 for s in self.seeds):
            raise SpecError("seeds must be a nonempty list of nonnegative integers")
        if len(self.batch) != 3 or any(b < 0 for b in self.batch):
            raise SpecError("batch must be three nonnegative sizes (text, image, pair)")
        if set(self.objectives) - {"mlm", "mim", "vlm"}:
            raise SpecError(f"unknown objectives: {sorted(set(self.objectives) - {'mlm', 'mim', 'vlm'})}")
        if self.axis is not None and self.axis not in AXES:
            raise SpecError(f"axis must be one of {sorted(AXES)}, got {self.axis!r}")
        for value in self.cell_values():
            if value is not None:
                self.config_for(value)
        if self.train_scenes < 1 or self.val_scenes < 1:
            raise SpecError("scene counts must be positive")
        if self.eval_every < 1 or self.routing_log_every < 1:
            raise SpecError("eval_every and routing_log_every must be positive")
        if self.lr <= 0 or self.weight_decay < 0 or not 0 <= self.warmup_frac < 1:
            raise SpecError("invalid optimizer settings")
        if self.init_checkpoint is not None and not Path(self.init_checkpoint).exists():
            raise SpecError(f"init checkpoint {self.init_checkpoint} does not exist")
        try:
            MoMEConfig.from_dict(self.model)
        except (TypeError, ValueError) as exc:
            raise SpecError(f"invalid model config: {exc}") from exc

    def cell_values(self) -> list:
        if self.axis is None:
            return [None]
        return list(self.axis_values if self.axis_values is not None else AXES[self.axis])

    def config_for(self, value=None) -> MoMEConfig:
        cfg = dict(self.model)
        if self.axis == "experts":
            cfg["E"] = int(value)
        elif self.axis == "strategy":
            if value not in AXES["strategy"]:
                raise SpecError(f"unknown strategy {value!r}")
            cfg["scale_T"], cfg["scale_V"] = "T" in value, "V" in value
        elif self.axis == "aux":
            if value not in AXES["aux"]:
                raise SpecError(f"unknown aux loss {value!r}")
            cfg["aux_V"] = value
        elif self.axis == "bpr":
            if value not in AXES["bpr"]:
                raise SpecError(f"bpr value must be 'on' or 'off', got {value!r}")
            cfg["bpr_T"] = cfg["bpr_V"] = value == "on"
        try:
            return MoMEConfig.from_dict(cfg)
        except (TypeError, ValueError) as exc:
            raise SpecError(f"invalid model config for {self.axis}={value}: {exc}") from exc

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown spec fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        raw = json.loads(Path(path).read_text())
        model_fields = {f.name for f in dataclasses.fields(MoMEConfig)}
        if raw and set(raw) <= model_fields:
            return cls(model=raw)
        return cls.from_dict(raw)


def cell_name(axis: str | None, value) -> str:
    return "." if axis is None else f"{axis}={value}"


# ---------------------------------------------------------------- training


def _jsonl(fh, row: dict) -> None:
    fh.write(json.dumps(row, sort_keys=True) + "\n")


def routing_records(step: int, routing: dict) -> list[dict]:
    """Columnar per-(task, layer, modality) routing log rows."""
    rows = []
    for task, layers in routing.items():
        for lr in layers:
            plan = lr.plan
            rows.append(
                {
                    "step": step,
                    "task": task,
                    "layer": lr.layer,
                    "modality": lr.modality,
                    "capacity": int(plan.capacity),
                    "num_experts": int(plan.num_experts),
                    "token_id": np.repeat(np.arange(plan.num_tokens), plan.k).tolist(),
                    "kind": np.repeat(lr.kinds, plan.k).tolist(),
                    "expert_id": plan.expert_ids.reshape(-1).tolist(),
                    "gate": [round(float(g), 12) for g in plan.weights.reshape(-1)],
                    "kept": plan.kept.reshape(-1).tolist(),
                }
            )
    return rows


def validation_batches(config: MoMEConfig, spec: ExperimentSpec, seed: int) -> O.StepBatches:
    corpus = data.generate("val", spec.val_scenes, seed)
    n = spec.val_scenes
    sizes = tuple(n if spec.objectives.get(k, True) and b else 0 for k, b in zip(("mlm", "mim", "vlm"), spec.batch))
    rng = np.random.default_rng(1_000_000 + seed)
    # evaluation uses every val scene once per stream, masked with a fixed generator
    batches = O.StepBatches(None, None, None)
    idx = np.arange(n)
    if sizes[0]:
        batches.mlm = O.make_text_batch(corpus.captions[idx], O.MLM_RATIO, rng, config.text_vocab)
    if sizes[1]:
        batches.mim = O.make_image_batch(corpus.pixels[idx], config, O.MIM_RATIO, rng)
    if sizes[2]:
        batches.vlm = (
            O.make_text_batch(corpus.captions[idx], O.VLM_TEXT_RATIO, rng, config.text_vocab),
            O.make_image_batch(corpus.pixels[idx], config, O.MIM_RATIO, rng),
        )
    return batches


@dataclass
class RunResult:
    out_dir: Path
    train_rows: list[dict]
    val_rows: list[dict]
    model: MoMEModel

    @property
    def final_val(self) -> dict:
        return self.val_rows[-1]

    @property
    def initial_val(self) -> dict:
        return self.val_rows[0]


def run_training(spec: ExperimentSpec, seed: int, out_dir, config: MoMEConfig | None = None,
                 write: bool = True) -> RunResult:
    """Train one (config, seed) cell; writes metrics.jsonl, val.jsonl, routing.jsonl, checkpoint.bin."""
    config = config or spec.config_for(None)
    out_dir = Path(out_dir)
    model = MoMEModel(config, seed=seed)
    if spec.init_checkpoint:
        model.load_state(load_checkpoint(spec.init_checkpoint))
    if spec.freeze_moe:
        model.freeze_moe()
    corpus = data.generate("train", spec.train_scenes, seed)
    val = validation_batches(config, spec, seed)
    optimizer = O.AdamW(
        model.params, lr=spec.lr, weight_decay=spec.weight_decay, total_steps=max(spec.steps, 1),
        warmup_frac=spec.warmup_frac, frozen=set(model.frozen),
    )
    rng = np.random.default_rng(seed)
    sizes = tuple(b if spec.objectives.get(k, True) else 0 for k, b in zip(("mlm", "mim", "vlm"), spec.batch))

    train_rows, val_rows = [], []
    files = {}
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
        config.save(out_dir / "config.json")
        files = {name: open(out_dir / f"{name}.jsonl", "w") for name in ("metrics", "val", "routing")}

    def log_val(step: int) -> None:
        ev = O.evaluate(model, val)
        row = {"step": step, **{k: ev[k] for k in ("total", "mlm", "mim", "vlm", "aux")},
               "drop_rate_by_layer": ev["drop_rate_by_layer"]}
        val_rows.append(row)
        if write:
            _jsonl(files["val"], row)

    try:
        log_val(0)
        for step in range(spec.steps):
            batches = O.sample_batches(corpus, config, rng, sizes)
            try:
                row = O.pretrain_step(model, batches, optimizer, rng, step)
            except O.NonFiniteLoss as exc:
                if write:
                    (out_dir / "diagnostics.json").write_text(json.dumps(exc.diagnostics, indent=2))
                raise
            routing = row.pop("_routing")
            if not spec.record_wall_time:
                row["wall_ms"] = None
            train_rows.append(row)
            if write:
                _jsonl(files["metrics"], row)
                last = step + 1 == spec.steps
                if step % spec.routing_log_every == 0 or last:
                    for rec in routing_records(step, routing):
                        _jsonl(files["routing"], rec)
            if (step + 1) % spec.eval_every == 0 or step + 1 == spec.steps:
                log_val(step + 1)
    finally:
        for fh in files.values():
            fh.close()
    if write:
        model.save(out_dir / "checkpoint.bin")
    return RunResult(out_dir, train_rows, val_rows, model)


def cmd_train(spec: ExperimentSpec) -> list[RunResult]:
    spec.validate()
    results = []
    for value in spec.cell_values():
        config = spec.config_for(value)
        for seed in spec.seeds:
            out = Path(spec.out) / cell_name(spec.axis, value) / f"seed_{seed}"
            log.info("training %s seed %d -> %s", cell_name(spec.axis, value), seed, out)
            results.append(run_training(spec, seed, out, config))
    return results


# ---------------------------------------------------------------- ablation


def stability(train_rows: list[dict]) -> float:
    """Std of step-to-step total-loss changes over the second half of training."""
    losses = np.array([r["loss_total"] for r in train_rows])
    tail = losses[len(losses) // 2 :]
    return float(np.std(np.diff(tail))) if tail.size > 2 else 0.0


def cmd_ablate(spec: ExperimentSpec) -> dict:
    if spec.axis is None:
        raise SpecError("ablate needs an axis")
    results = cmd_train(spec)
    by_cell = defaultdict(list)
    it = iter(results)
    for value in spec.cell_values():
        for _ in spec.seeds:
            by_cell[value].append(next(it))
    rows = []
    for value, runs in by_cell.items():
        cfg = runs[0].model.config
        finals = [r.final_val for r in runs]
        drops = [np.mean(list(r.train_rows[-1]["drop_rate_by_layer"].values()) or [0.0]) for r in runs if r.train_rows]
        rows.append(
            {
                spec.axis: value,
                "val_total": float(np.mean([f["total"] for f in finals])),
                "val_mlm": float(np.mean([f["mlm"] for f in finals])),
                "val_mim": float(np.mean([f["mim"] for f in finals])),
                "val_vlm": float(np.mean([f["vlm"] for f in finals])),
                "drop_rate": float(np.mean(drops)) if drops else 0.0,
                "stability": float(np.mean([stability(r.train_rows) for r in runs])),
                "params_per_token_text": per_token_param_count(cfg, TEXT),
                "params_per_token_image": per_token_param_count(cfg, IMAGE),
                "params_total": total_param_count(cfg),
                "params_router": router_param_count(cfg),
                "seeds": list(spec.seeds),
            }
        )
    table = {"axis": spec.axis, "steps": spec.steps, "rows": rows}
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(table, indent=2) + "\n")
    (out / "ablation.md").write_text(markdown_table(table))
    return table


def markdown_table(table: dict) -> str:
    axis = table["axis"]
    cols = [axis, "val_total", "val_mlm", "val_mim", "val_vlm", "drop_rate", "stability",
            "params_per_token_text", "params_per_token_image", "params_total"]
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for row in table["rows"]:
        cells = [f"{row[c]:.4f}" if isinstance(row[c], float) else str(row[c]) for c in cols]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- reporting


def read_routing_log(run_dir) -> list[dict]:
    path = Path(run_dir) / "routing.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no routing log at {path}")
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    if not rows:
        raise FileNotFoundError(f"routing log {path} is empty")
    return rows


def summarize_record(rec: dict) -> dict:
    e = rec["num_experts"]
    expert = np.asarray(rec["expert_id"])
    kept = np.asarray(rec["kept"], dtype=bool)
    kinds = np.asarray(rec["kind"])
    breakdown = {}
    for ex in range(e):
        sel = expert == ex
        names, counts = np.unique(kinds[sel], return_counts=True)
        breakdown[str(ex)] = {str(n): int(c) for n, c in zip(names, counts)}
    demand = np.bincount(expert, minlength=e)
    kept_counts = np.bincount(expert[kept], minlength=e)
    return {
        "step": rec["step"],
        "task": rec["task"],
        "layer": rec["layer"],
        "modality": rec["modality"],
        "capacity": rec["capacity"],
        "tokens": len(set(rec["token_id"])),
        "assignments": int(expert.size),
        "kind_breakdown": breakdown,
        "demand": demand.tolist(),
        "kept": kept_counts.tolist(),
        "dropped": int((~kept).sum()),
        "drop_rate": float((~kept).mean()) if kept.size else 0.0,
        "demand_over_capacity": (demand / rec["capacity"]).tolist(),
    }


def cmd_report(run_dir) -> dict:
    """Per-layer routing breakdowns and drop profiles (JSON + SVG) from a run's routing log."""
    run_dir = Path(run_dir)
    records = read_routing_log(run_dir)
    summaries = [summarize_record(r) for r in records]
    last_step = max(s["step"] for s in summaries)
    by_layer: dict[str, list] = defaultdict(list)
    for s in summaries:
        if s["step"] == last_step:
            by_layer[f"{s['modality']}-layer{s['layer']}"].append(s)
    report = {"last_step": last_step, "records": summaries,
              "drop_profiles": {k: {s["task"]: s["demand_over_capacity"] for s in v} for k, v in sorted(by_layer.items())}}
    out = run_dir / "report"
    out.mkdir(exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    for key, items in sorted(by_layer.items()):
        series = {s["task"]: s["demand_over_capacity"] for s in items}
        (out / f"drop_{key}.svg").write_text(
            svg.bar_chart(series, title=f"expert demand / capacity, {key}, step {last_step}", threshold=1.0)
        )
        for s in items:
            (out / f"kinds_{s['task']}_{key}.svg").write_text(
                svg.stacked_bars(s["kind_breakdown"], title=f"token kinds per expert, {s['task']} {key}")
            )
    return report


# ---------------------------------------------------------------- simulation


def cmd_simulate(run_dir, workers: int, alpha: float = DEFAULT_ALPHA) -> dict:
    """Replay recorded routing decisions through the expert-parallel model."""
    run_dir = Path(run_dir)
    records = read_routing_log(run_dir)
    out_rows = []
    for rec in records:
        e = rec["num_experts"]
        topo = WorkerTopology(workers, e, rec["capacity"])
        token_ids = np.asarray(rec["token_id"])
        n = int(token_ids.max()) + 1 if token_ids.size else 0
        k = len(token_ids) // max(n, 1)
        expert = np.asarray(rec["expert_id"]).reshape(n, k)
        kept = np.asarray(rec["kept"], dtype=bool).reshape(n, k)
        trace = trace_from_assignments(expert, kept, topo)
        out_rows.append({key: rec[key] for key in ("step", "task", "layer", "modality")}
                        | {"workers": workers, "trace": trace.to_dict(), "metrics": imbalance_metrics(trace, alpha)})
    result = {"workers": workers, "alpha": alpha, "layers": out_rows}
    (run_dir / f"simulate_w{workers}.json").write_text(json.dumps(result, indent=2) + "\n")
    return result


def summarize_run(result: RunResult) -> dict:
    return {
        "out_dir": str(result.out_dir),
        "initial_val_total": result.initial_val["total"],
        "final_val_total": result.final_val["total"],
        "relative_drop": 1.0 - result.final_val["total"] / result.initial_val["total"],
        "steps": len(result.train_rows),
    }


def elapsed(start: float) -> str:
    s = time.perf_counter() - start
    return f"{int(s // 60)}m{s % 60:04.1f}s" if s >= 60 else f"{s:.1f}s"
