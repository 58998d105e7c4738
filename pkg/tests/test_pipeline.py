import json
import math

import numpy as np
import pytest

from crystalscreen import diffusion, jepa
from crystalscreen.crystal_core import Crystal, crystal_to_record
from crystalscreen.errors import ConfigError, EmptyReferenceSet
from crystalscreen.pipeline import ARTIFACTS, PipelineConfig, embedding_distance, reference_set, run_pipeline, select_top
from crystalscreen.runio import read_csv, read_jsonl_records, write_jsonl_records

A, B, C = 11, 17, 8


def xtal(species, id):
    n = len(species)
    return Crystal(np.arange(n)[:, None] * np.full((1, 3), 1.0 / max(n, 1)), tuple(species), 4.0 * np.eye(3), id=id)


def test_reference_set_example():
    corpus = [xtal([A], "A"), xtal([B], "B"), xtal([A, B, B], "AB2"), xtal([A, A, B, B], "A2B2"), xtal([C], "C"), xtal([A, C], "AC")]
    assert reference_set(xtal([A, A, B], "q"), corpus) == ["A", "B", "AB2", "A2B2"]
    assert reference_set(xtal([A], "q"), corpus) == ["A"]
    with pytest.raises(EmptyReferenceSet):
        reference_set(xtal([29], "q"), corpus)


def test_embedding_distance_cases():
    h = np.array([1.0, 2.0, 3.0, 4.0])
    assert embedding_distance(h, [h]) == 0.0
    assert embedding_distance(np.zeros(4), [[3.0, 4.0, 0.0, 0.0]]) == 25.0
    rng = np.random.default_rng(0)
    refs = rng.normal(size=(3, 4))
    naive = sum(sum((h[k] - r[k]) ** 2 for k in range(4)) for r in refs) / 3
    assert embedding_distance(h, refs) == pytest.approx(naive, abs=1e-12)
    with pytest.raises(EmptyReferenceSet):
        embedding_distance(h, np.zeros((0, 4)))
    with pytest.raises(ValueError):
        embedding_distance(h, [[1.0, 2.0]])


def test_select_top_counts_and_ties():
    scores = {"c": 1.0, "a": 1.0, "b": 0.5, "d": 3.0, "e": 2.0}
    sel, rej = select_top(scores, 40, 5)
    assert sel == ["b", "a"] and rej == ["c", "e", "d"]
    # ceil of k% of the filtered count, even when some filtered crystals went unranked
    assert len(select_top(scores, 20, 7)[0]) == math.ceil(0.2 * 7)
    assert len(select_top(scores, 100, 5)[0]) == 5


@pytest.mark.parametrize("bad", [{"k_percent": 0}, {"k_percent": 101}, {"n_generate": 0}, {"relaxer": "md"}, {"mix_original": 2}])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        PipelineConfig(**bad)


def test_config_from_dict_rejects_unknown():
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"n_gen": 3})


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory, bench):
    d = tmp_path_factory.mktemp("tiny")
    training = bench.training
    write_jsonl_records(d / "training.jsonl", [crystal_to_record(c) for c in training])
    jm, js, _ = jepa.train_jepa(bench.jepa_corpus[:32], jepa.JepaConfig(layers=1, hidden_dim=16, heads=2, embed_dim=8, steps=3, batch_size=8))
    jepa.save_model(d / "jepa.ckpt", jm, js)
    dcfg = diffusion.DiffusionConfig(layers=1, hidden_dim=112, heads=4, T=8, steps=3, batch_size=4)
    dm, ds, _ = diffusion.train_diffusion(training, dcfg)
    diffusion.save_model(d / "gen.ckpt", dm, ds)
    cfg = PipelineConfig(generator=str(d / "gen.ckpt"), jepa=str(d / "jepa.ckpt"), training=str(d / "training.jsonl"), n_generate=12, seed=3)
    return cfg, d


def test_pipeline_artifacts_and_subsets(tiny_run):
    cfg, d = tiny_run
    res = run_pipeline(cfg, d / "run")
    for name in ARTIFACTS:
        assert (d / "run" / name).exists(), name
    gen = {r["id"] for r in read_jsonl_records(d / "run" / "generated.jsonl")}
    filt = {r["id"] for r in read_csv(d / "run" / "filtered.csv") if r["kept"] == "true"}
    sel = {r["id"] for r in read_jsonl_records(d / "run" / "selected.jsonl")}
    assert len(gen) == 12 == res.generated
    assert sel <= filt <= gen
    assert res.filtered == len(filt)
    assert res.selected == min(res.ranked, math.ceil(0.2 * res.filtered - 1e-9))
    report = json.loads((d / "run" / "report.json").read_text())
    assert report["counts"]["selected"] == res.selected


def test_pipeline_resume_and_mismatch(tiny_run):
    cfg, d = tiny_run
    first = run_pipeline(cfg, d / "again")
    before = {p.name: p.read_bytes() for p in (d / "again").iterdir()}
    second = run_pipeline(cfg, d / "again")
    assert second.report == first.report
    assert before == {p.name: p.read_bytes() for p in (d / "again").iterdir()}
    with pytest.raises(ConfigError):
        run_pipeline(PipelineConfig(**{**cfg.to_dict(), "n_generate": 5}), d / "again")


def test_pipeline_is_deterministic(tiny_run):
    cfg, d = tiny_run
    run_pipeline(cfg, d / "x")
    run_pipeline(cfg, d / "y")
    for name in ARTIFACTS:
        assert (d / "x" / name).read_bytes() == (d / "y" / name).read_bytes(), name
