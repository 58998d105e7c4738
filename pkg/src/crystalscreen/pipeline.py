"""Screening-and-refinement loop: generate, relax, keep valid/unique/novel
survivors, rank them by mean squared embedding distance to their reference
crystals, and fine-tune the generator on the closest k percent.

Every stage writes immutable files into the run directory; rerunning with the
same config skips stages whose outputs already exist.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffusion, jepa
from .crystal_core import Crystal, crystal_from_record, crystal_to_record, read_jsonl
from .errors import ConfigError, EmptyReferenceSet
from .metrics import NoveltyIndex, stability, uniqueness, validity
from .oracle import FullRelaxer, GradientRelaxer, IdentityRelaxer, MorseOracle
from .phase_diagram import PhaseDiagram
from .runio import (
    config_hash,
    metadata,
    read_csv,
    read_jsonl_records,
    stage_seed,
    write_csv,
    write_json,
    write_jsonl_records,
)

log = logging.getLogger(__name__)

ARTIFACTS = (
    "config.json",
    "generated.jsonl",
    "relaxed.jsonl",
    "filtered.csv",
    "refsets.jsonl",
    "scores.csv",
    "selected.jsonl",
    "finetuned.ckpt",
    "report.json",
)


@dataclass
class PipelineConfig:
    generator: str = ""
    jepa: str = ""
    training: str = ""
    n_generate: int = 200
    k_percent: float = 20.0
    epsilon: float = 0.1
    seed: int = 0
    relaxer: str = "identity"
    # gradient: fixed steepest-descent steps; full: L-BFGS iteration cap
    relax_steps: int = 50
    relax_step_size: float = 0.01
    oracle_seed: int = 0
    en_threshold: float = 0.0
    finetune_lr_factor: float = 0.1
    finetune_steps_fraction: float = 0.2
    # fraction of the original training corpus mixed into the fine-tune set
    mix_original: float = 0.0
    evaluate: bool = True

    def __post_init__(self):
        if not 0 < self.k_percent <= 100:
            raise ConfigError(f"k_percent must lie in (0, 100], got {self.k_percent}")
        if self.n_generate < 1:
            raise ConfigError("n_generate must be >= 1")
        if self.relaxer not in ("identity", "gradient", "full"):
            raise ConfigError(f"unknown relaxer {self.relaxer!r}")
        if not 0.0 <= self.mix_original <= 1.0:
            raise ConfigError("mix_original must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown pipeline keys: {unknown}")
        return cls(**d)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class PipelineRun:
    run_dir: Path
    generated: int
    filtered: int
    ranked: int
    selected: int
    report: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# reference sets and embedding distance


def reference_set(c: Crystal, training) -> list:
    """Ids of training crystals whose element set lies inside c's, in corpus order."""
    elems = set(c.species)
    refs = [t.id for t in training if set(t.species) <= elems]
    if not refs:
        raise EmptyReferenceSet(f"{c.id}: no training crystal within elements {sorted(elems)}")
    return refs


def embedding_distance(h_c, refs) -> float:
    """Mean over references of the squared Euclidean distance."""
    refs = np.asarray(refs, dtype=float)
    if refs.ndim != 2 or len(refs) == 0:
        raise EmptyReferenceSet("embedding distance needs at least one reference embedding")
    h_c = np.asarray(h_c, dtype=float).reshape(-1)
    if refs.shape[1] != h_c.shape[0]:
        raise ValueError(f"embedding dims differ: {h_c.shape[0]} vs {refs.shape[1]}")
    return float(np.mean(np.sum((refs - h_c) ** 2, axis=1)))


def select_top(scores: dict, k_percent, n_filtered):
    """Ids sorted by (D_C, id) truncated to ceil(k% of the filtered count)."""
    order = sorted(scores, key=lambda i: (scores[i], i))
    m = min(len(order), math.ceil(k_percent / 100.0 * n_filtered - 1e-9))
    return order[:m], order[m:]


# ---------------------------------------------------------------------------
# stages


def _crystal_records(crystals):
    return [crystal_to_record(c) for c in crystals]


def _load_crystals(path):
    return [crystal_from_record(r) for r in read_jsonl_records(path)]


def _make_relaxer(cfg: PipelineConfig, oracle):
    if cfg.relaxer == "gradient":
        return GradientRelaxer(oracle, steps=cfg.relax_steps, step_size=cfg.relax_step_size)
    if cfg.relaxer == "full":
        return FullRelaxer(oracle, max_iter=cfg.relax_steps)
    return IdentityRelaxer()


def run_pipeline(cfg: PipelineConfig, run_dir) -> PipelineRun:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cdict = cfg.to_dict()
    meta = metadata(cdict, "pipeline")
    cfg_path = run_dir / "config.json"
    resolved = {"_meta": meta, "pipeline": cdict}
    if cfg_path.exists():
        old = json.loads(cfg_path.read_text())
        if old.get("_meta", {}).get("config_hash") != meta["config_hash"]:
            raise ConfigError(f"{run_dir} holds a run with a different config; use a fresh directory")
    else:
        write_json(cfg_path, resolved)

    training = read_jsonl(cfg.training)
    oracle = MorseOracle(cfg.oracle_seed)
    gen_model = None

    def generator():
        nonlocal gen_model
        if gen_model is None:
            gen_model = diffusion.load_model(cfg.generator)
        return gen_model

    # 1. sample
    p = run_dir / "generated.jsonl"
    if not p.exists():
        model, _ = generator()
        samples = diffusion.sample(model, cfg.n_generate, seed=stage_seed(cfg.seed, "generate"), id_prefix="gen")
        write_jsonl_records(p, _crystal_records(samples), meta=meta)
        log.info("generated %d crystals", len(samples))
    generated = _load_crystals(p)

    # 2a. relax
    p = run_dir / "relaxed.jsonl"
    if not p.exists():
        relax = _make_relaxer(cfg, oracle)
        recs = []
        for c in generated:
            r = relax(c)
            rec = crystal_to_record(r)
            if cfg.relaxer != "identity":
                rec["relax_energy_before"] = oracle.energy_per_atom(c)
                rec["relax_energy_after"] = oracle.energy_per_atom(r)
            recs.append(rec)
        write_jsonl_records(p, recs, meta=meta)
    relaxed = _load_crystals(p)

    # 2b. valid / unique / novel filter
    p = run_dir / "filtered.csv"
    if not p.exists():
        val = [validity(c, cfg.en_threshold) for c in relaxed]
        uniq = uniqueness(relaxed)
        nov = NoveltyIndex(training)
        rows = []
        for c, v, u in zip(relaxed, val, uniq):
            n = nov.is_novel(c)
            rows.append([c.id, v.valid, bool(u), n, v.valid and bool(u) and n, ";".join(v.reasons)])
        write_csv(p, ["id", "valid", "unique", "novel", "kept", "reasons"], rows, meta=meta)
    kept_ids = [r["id"] for r in read_csv(p) if r["kept"] == "true"]
    by_id = {c.id: c for c in relaxed}
    survivors = [by_id[i] for i in kept_ids]

    # 3. reference sets
    p = run_dir / "refsets.jsonl"
    if not p.exists():
        recs = []
        for c in survivors:
            try:
                recs.append({"id": c.id, "refs": reference_set(c, training)})
            except EmptyReferenceSet as exc:
                log.warning("excluded from ranking: %s", exc)
                recs.append({"id": c.id, "refs": [], "excluded": "EmptyReferenceSet"})
        write_jsonl_records(p, recs, meta=meta)
    refsets = {r["id"]: r["refs"] for r in read_jsonl_records(p) if r["refs"]}

    # 4. embedding distance
    p = run_dir / "scores.csv"
    if not p.exists():
        jmodel, _ = jepa.load_model(cfg.jepa)
        ranked = [c for c in survivors if c.id in refsets]
        train_emb = jepa.embed_corpus(jmodel, training)
        row_of = {t.id: i for i, t in enumerate(training)}
        emb = jepa.embed_corpus(jmodel, ranked) if ranked else np.zeros((0, jmodel.embed_dim))
        rows = []
        for c, h in zip(ranked, emb):
            refs = refsets[c.id]
            rows.append([c.id, embedding_distance(h, train_emb[[row_of[r] for r in refs]]), len(refs)])
        write_csv(p, ["id", "d_c", "n_ref"], rows, meta=meta)
    scores = {r["id"]: float(r["d_c"]) for r in read_csv(p)}

    # 5. select and fine-tune
    sel_ids, rej_ids = select_top(scores, cfg.k_percent, len(survivors))
    p = run_dir / "selected.jsonl"
    if not p.exists():
        write_jsonl_records(p, _crystal_records([by_id[i] for i in sel_ids]), meta=meta)
    selected = _load_crystals(p)

    p = run_dir / "finetuned.ckpt"
    finetune_info = {}
    if not p.exists():
        model, _ = generator()
        corpus = list(selected)
        rng = np.random.default_rng(stage_seed(cfg.seed, "mix_original"))
        n_mix = int(round(cfg.mix_original * len(training)))
        if n_mix:
            corpus += [training[i] for i in np.sort(rng.choice(len(training), n_mix, replace=False))]
        if corpus:
            ft_cfg = dataclasses.replace(model.config, seed=stage_seed(cfg.seed, "finetune"))
            steps = max(1, math.ceil(cfg.finetune_steps_fraction * model.config.steps))
            model = dataclasses.replace(model, config=ft_cfg)
            model, state, curve = diffusion.train_diffusion(corpus, ft_cfg, model=model, lr=cfg.finetune_lr_factor * ft_cfg.lr, steps=steps)
            diffusion.save_model(p, model, state)
            finetune_info = {"steps": steps, "corpus": len(corpus), "final_loss": curve[-1]}
        else:
            log.warning("nothing selected; fine-tuned checkpoint equals the pre-trained generator")
            diffusion.save_model(p, model)
            finetune_info = {"steps": 0, "corpus": 0, "skipped": True}

    # report
    p = run_dir / "report.json"
    if not p.exists():
        report = {
            "_meta": meta,
            "counts": {
                "generated": len(generated),
                "filtered": len(survivors),
                "ranked": len(scores),
                "selected": len(sel_ids),
                "excluded_no_refs": len(survivors) - len(scores),
            },
            "finetune": finetune_info,
        }
        if cfg.evaluate:
            report["evaluation"] = evaluate_selection(cfg, training, by_id, sel_ids, rej_ids, oracle)
        write_json(p, report)
    report = json.loads(p.read_text())
    c = report["counts"]
    return PipelineRun(run_dir, c["generated"], c["filtered"], c["ranked"], c["selected"], report)


def evaluate_selection(cfg: PipelineConfig, training, by_id, sel_ids, rej_ids, oracle) -> dict:
    """Oracle-scored comparison of the selected set against rejected survivors and a random pick.

    Survivors are already valid, unique and novel, so S.U.N within any subset
    equals its stable fraction; crystals whose hull cannot be evaluated count as
    unstable and are left out of the delta_e means.
    """
    pd = PhaseDiagram.from_crystals(training)
    ranked = sel_ids + rej_ids
    flags, des = stability([by_id[i] for i in ranked], pd, oracle.energy_per_atom, cfg.epsilon)
    stable = dict(zip(ranked, flags))
    de = dict(zip(ranked, des))

    def mean_de(ids):
        v = [de[i] for i in ids if de[i] is not None]
        return float(np.mean(v)) if v else None

    def sun(ids):
        return float(np.mean([stable[i] for i in ids])) if ids else None

    rng = np.random.default_rng(stage_seed(cfg.seed, "random_baseline"))
    rand_ids = [ranked[i] for i in np.sort(rng.choice(len(ranked), len(sel_ids), replace=False))] if ranked else []
    return {
        "epsilon": cfg.epsilon,
        "mean_delta_e_selected": mean_de(sel_ids),
        "mean_delta_e_rejected": mean_de(rej_ids),
        "sun_selected": sun(sel_ids),
        "sun_random": sun(rand_ids),
        "sun_all_ranked": sun(ranked),
        "unevaluated": sum(de[i] is None for i in ranked),
        "delta_e": {i: de[i] for i in ranked},
    }


__all__ = [
    "ARTIFACTS",
    "PipelineConfig",
    "PipelineRun",
    "config_hash",
    "embedding_distance",
    "evaluate_selection",
    "reference_set",
    "run_pipeline",
    "select_top",
]
