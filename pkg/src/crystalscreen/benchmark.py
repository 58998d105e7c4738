"""End-to-end screening check on the synthetic benchmark with the oracle as ground truth."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

from . import diffusion, jepa
from .crystal_core import crystal_to_record
from .pipeline import PipelineConfig, run_pipeline
from .runio import stage_seed, write_jsonl_records
from .synthetic import make_benchmark

log = logging.getLogger(__name__)


@dataclass
class BenchmarkBudget:
    jepa_steps: int = 1000
    diffusion_steps: int = 1500
    n_generate: int = 300
    k_percent: float = 20.0
    relaxer: str = "full"
    relax_steps: int = 150


def prepare(seed, workdir, budget: BenchmarkBudget | None = None) -> PipelineConfig:
    """Build the benchmark for `seed`, train both models and return a pipeline config pointing at them."""
    budget = budget or BenchmarkBudget()
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    bench = make_benchmark(seed)
    training = workdir / "training.jsonl"
    write_jsonl_records(training, [crystal_to_record(c) for c in bench.training])

    jcfg = jepa.JepaConfig(steps=budget.jepa_steps, seed=stage_seed(seed, "jepa"))
    jmodel, jstate, _ = jepa.train_jepa(bench.jepa_corpus, jcfg)
    jepa.save_model(workdir / "jepa.ckpt", jmodel, jstate)

    dcfg = diffusion.DiffusionConfig(steps=budget.diffusion_steps, seed=stage_seed(seed, "diffusion"))
    dmodel, dstate, _ = diffusion.train_diffusion(bench.training, dcfg)
    diffusion.save_model(workdir / "generator.ckpt", dmodel, dstate)

    return PipelineConfig(
        generator=str(workdir / "generator.ckpt"),
        jepa=str(workdir / "jepa.ckpt"),
        training=str(training),
        n_generate=budget.n_generate,
        k_percent=budget.k_percent,
        seed=seed,
        relaxer=budget.relaxer,
        relax_steps=budget.relax_steps,
    )


def _summary(result):
    ev = dict(result.report["evaluation"])
    ev.pop("delta_e", None)
    ev["counts"] = result.report["counts"]
    return ev


def run(seed, workdir, budget: BenchmarkBudget | None = None) -> dict:
    cfg = prepare(seed, workdir, budget)
    return _summary(run_pipeline(cfg, Path(workdir) / "run"))


def run_seeds(seeds, workdir, budget: BenchmarkBudget | None = None, train_seed=0) -> list:
    """Train once on benchmark `train_seed`, then run the pipeline once per seed with those models."""
    base = prepare(train_seed, Path(workdir) / "models", budget)
    out = []
    for s in seeds:
        cfg = dataclasses.replace(base, seed=int(s))
        out.append(_summary(run_pipeline(cfg, Path(workdir) / f"run{s}")))
    return out
