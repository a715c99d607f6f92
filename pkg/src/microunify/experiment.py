"""End-to-end pipeline: dense training, ADMM compression, evaluation, benchmarks."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .admm import admm_train, finalize, history_to_csv
from .blocking import BlockShape
from .config import ExperimentConfig
from .data import Dataset, load_idx
from .gemm import OpCount, bench_case, compile_model, micro_forward, predicted_model_ops
from .nn import Model, evaluate, fit, score
from .projection import LayerConstraint, verify_constraint
from .storage import compression_ratio, deserialize, serialize


class VerificationError(RuntimeError):
    """A compressed model failed its constraint check or op-count audit."""


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


@dataclass
class RunReport:
    baseline_metric: float
    compressed_metric: float
    dense_path_metric: float
    metric: str
    ratio_magnitudes_only: float
    ratio_with_sign_bits: float
    predicted_multiplies: int
    measured_multiplies: int
    dense_multiplies: int
    verified: bool
    layer_methods: dict = field(default_factory=dict)
    wall_times: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, default=float)


def micro_evaluate(model: Model, report, data: Dataset, metric: str, batch_size: int = 256):
    """Metric and measured op count with fc/conv layers run by the micro kernel."""
    compiled = compile_model(model, report)
    outs, ops = [], OpCount()
    for xb, _ in data.batches(batch_size):
        out, c = micro_forward(model, compiled, xb)
        outs.append(out)
        ops = ops + c
    return score(np.concatenate(outs), data.y, metric), ops


def cmd_train_dense(cfg: ExperimentConfig, out: Path | None = None) -> tuple[Model, dict]:
    model = cfg.build_model()
    train, test = cfg.dataset()
    t0 = time.perf_counter()
    losses = fit(model, train, cfg.train)
    metrics = {"metric": cfg.metric_name, "train": evaluate(model, train, cfg.metric_name),
               "test": evaluate(model, test, cfg.metric_name), "final_loss": losses[-1] if losses else None,
               "wall_time": time.perf_counter() - t0}
    out = out or cfg.path("checkpoint")
    if out is not None:
        atomic_write(out, serialize(model))
        atomic_write(Path(str(out) + ".metrics.json"), json.dumps(metrics, indent=2))
    return model, metrics


def load_model(path) -> tuple[Model, object]:
    return deserialize(Path(path).read_bytes())


def cmd_compress(cfg: ExperimentConfig, checkpoint, out=None):
    """ADMM-train, finalize, verify and serialize; returns (bytes, RunReport, history)."""
    model, _ = load_model(checkpoint)
    expected = cfg.build_model()
    if model.describe() != expected.describe() or model.input_shape != expected.input_shape:
        raise ValueError("checkpoint does not match the configured architecture")
    spec = cfg.build_spec(model)
    train, test = cfg.dataset()
    metric = cfg.metric_name
    times = {}
    baseline = evaluate(model, test, metric)
    t0 = time.perf_counter()
    trained, history = admm_train(model, train, spec, cfg.admm)
    times["admm"] = time.perf_counter() - t0
    final, report = finalize(trained, spec)
    check = verify_constraint(final.weights(), spec, report)
    if not check.ok:
        raise VerificationError(f"constraint verification failed: {check.violations[:5]}")
    blob = serialize(final, report)
    t0 = time.perf_counter()
    compressed_metric, measured = micro_evaluate(final, report, test, metric)
    times["micro_eval"] = time.perf_counter() - t0
    predicted = predicted_model_ops(final, report, len(test))
    if predicted.multiplies != measured.multiplies:
        raise VerificationError(f"measured {measured.multiplies} multiplies, predicted {predicted.multiplies}")
    methods = {str(i): (f"{c.method} {c.block_shape} r={c.ratio:g}" if c.active else "none")
               for i, c in spec.layers.items()}
    run = RunReport(baseline, compressed_metric, evaluate(final, test, metric), metric,
                    compression_ratio(final, report), compression_ratio(final, report, "with_sign_bits"),
                    predicted.multiplies, measured.multiplies,
                    predicted_model_ops(final, None, len(test)).multiplies, True, methods, times)
    out = out or cfg.path("model")
    if out is not None:
        atomic_write(out, blob)
        atomic_write(cfg.path("report", str(out) + ".report.json"), run.to_json())
        hist = cfg.path("history", str(out) + ".history.csv")
        atomic_write(hist, history_to_csv(history))
    return blob, run, history


def load_eval_data(spec: str, seed_cfg: ExperimentConfig | None = None) -> Dataset:
    """`spec` is IMAGES.idx[,LABELS.idx]; with a config the test split is used."""
    if seed_cfg is not None:
        return seed_cfg.dataset()[1]
    parts = [p for p in spec.split(",") if p]
    for p in parts:
        if not Path(p).exists():
            raise FileNotFoundError(f"dataset file {p} does not exist")
    return load_idx(parts[0], parts[1] if len(parts) > 1 else None)


def cmd_eval(model_path, data: Dataset) -> dict:
    model, report = load_model(model_path)
    metric = "accuracy" if model.loss == "softmax_cross_entropy" else "psnr"
    value, measured = micro_evaluate(model, report, data, metric)
    predicted = predicted_model_ops(model, report, len(data))
    if predicted.multiplies != measured.multiplies:
        raise VerificationError(f"measured {measured.multiplies} multiplies, predicted {predicted.multiplies}")
    return {"metric": metric, "value": value, "dense_path_value": evaluate(model, data, metric),
            "measured_multiplies": measured.multiplies, "predicted_multiplies": predicted.multiplies,
            "measured_adds": measured.adds, "samples": len(data)}


BENCH_SHAPES = ("2x2", "4x1", "8x1", "16x1", "2x2x2")
BENCH_RATIOS = (0.0, 0.25, 0.5, 0.75, 1.0)


def cmd_bench_gemm(shapes=BENCH_SHAPES, ratios=BENCH_RATIOS, layer_shape=(64, 32, 3, 3),
                   n_cols: int = 64, seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(layer_shape).astype(np.float32)
    rows = []
    for s in shapes:
        for r in ratios:
            c = LayerConstraint("unify", BlockShape.parse(s), r)
            res = bench_case(w, c, n_cols, rng)
            rows.append({"shape": "x".join(map(str, layer_shape)), "spec": f"unify {s} r={r:g}", **res})
    return rows


def bench_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, ["shape", "spec", "naive_mults", "micro_mults", "reduction", "wall_time"])
    w.writeheader()
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def inspect_model(model: Model, report) -> str:
    lines = []
    for i, layer in model.trainable_layers().items():
        rep = report.layers.get(i)
        head = f"layer {i} {layer.describe()} weights {tuple(layer.w.shape)}"
        if rep is None:
            lines.append(f"{head}: none")
            continue
        lines.append(f"{head}: {rep.method} {rep.block_shape} blocks {len(rep.blocks)}/{rep.num_blocks} "
                     f"(ratio {len(rep.blocks) / max(rep.num_blocks, 1):.3f}, ragged {len(rep.ragged)})")
        if rep.method == "unify" and len(rep.magnitudes):
            counts, edges = np.histogram(rep.magnitudes, bins=8)
            lines.append("  magnitudes: " + "  ".join(f"[{a:.3g},{b:.3g}):{c}"
                                                     for a, b, c in zip(edges[:-1], edges[1:], counts)))
    return "\n".join(lines)
