"""Command-line entry point.

Exit codes: 0 success, 1 module error, 2 usage error. Failures print one JSON
object on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path


from . import __version__
from .config import load_config, section
from .crystal_core import crystal_to_record, read_jsonl
from .errors import CrystalScreenError

log = logging.getLogger("crystalscreen")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _meta(cfg, kind):
    from .runio import metadata

    return metadata(cfg, kind)


def _energy_fn(source, oracle_seed):
    """Energy per atom from stored records, or from the analytic oracle."""
    from .oracle import MorseOracle

    if source == "oracle":
        return MorseOracle(oracle_seed).energy_per_atom

    def stored(c):
        if c.energy_per_atom is None:
            raise CrystalScreenError(f"{c.id}: no energy_per_atom in the corpus; use --energy oracle")
        return c.energy_per_atom

    return stored


def _with_energies(crystals, fn):
    return [c.replace(energy_per_atom=float(fn(c))) for c in crystals]


# ---------------------------------------------------------------------------
# subcommands


def cmd_hull(args, cfg):
    from .phase_diagram import HullEntry, PhaseDiagram, energy_above_hull
    from .runio import write_csv

    eps = cfg["metrics"]["epsilon"] if args.epsilon is None else args.epsilon
    fn = _energy_fn(args.energy, cfg["metrics"]["oracle_seed"])
    ref = _with_energies(read_jsonl(args.ref), fn)
    query = _with_energies(read_jsonl(args.query), fn)
    pd = PhaseDiagram.from_crystals(ref)
    rows = []
    for c in query:
        res = energy_above_hull(HullEntry.from_crystal(c), pd)
        rows.append([c.id, res.delta_e, res.delta_e < eps, ";".join(f"{i}:{w:.6g}" for i, w in res.support)])
    write_csv(args.out, ["id", "delta_e", "stable", "support"], rows, meta=_meta(cfg, "hull"))
    return 0


def cmd_train_jepa(args, cfg):
    from . import jepa
    from .runio import write_csv

    jc = section(cfg, "jepa")
    corpus = read_jsonl(args.corpus)
    model, state, curve = jepa.train_jepa(corpus, jc)
    jepa.save_model(args.out, model, state)
    if args.curve:
        write_csv(args.curve, ["step", "loss"], list(enumerate(curve)), meta=_meta(cfg, "jepa_curve"))
    print(json.dumps({"checkpoint": str(args.out), "steps": len(curve), "final_loss": curve[-1] if curve else None}))
    return 0


def cmd_embed(args, cfg):
    from . import jepa
    from .runio import write_csv

    model, _ = jepa.load_model(args.ckpt)
    corpus = read_jsonl(args.corpus)
    emb = jepa.embed_corpus(model, corpus)
    header = ["id", "e_form_per_atom"] + [f"h{i}" for i in range(emb.shape[1])]
    rows = [[c.id, c.e_form_per_atom] + [float(v) for v in h] for c, h in zip(corpus, emb)]
    write_csv(args.out, header, rows, meta=_meta(cfg, "embedding"))
    return 0


def cmd_train_diffusion(args, cfg):
    from . import diffusion
    from .runio import write_csv

    dc = section(cfg, "diffusion")
    corpus = read_jsonl(args.corpus)
    model, state, curve = diffusion.train_diffusion(corpus, dc)
    diffusion.save_model(args.out, model, state)
    if args.curve:
        write_csv(args.curve, ["step", "loss"], list(enumerate(curve)), meta=_meta(cfg, "diffusion_curve"))
    print(json.dumps({"checkpoint": str(args.out), "steps": len(curve), "final_loss": curve[-1] if curve else None}))
    return 0


def cmd_generate(args, cfg):
    from . import diffusion
    from .runio import write_jsonl_records

    model, _ = diffusion.load_model(args.ckpt)
    seed = cfg["seed"] if args.seed is None else args.seed
    out = diffusion.sample(model, args.count, seed=seed, n_atoms=args.n_atoms)
    write_jsonl_records(args.out, [crystal_to_record(c) for c in out], meta=_meta({**cfg, "generate_seed": seed}, "generated"))
    bad = sum(not c.meta.get("decode_ok", True) for c in out)
    print(json.dumps({"generated": len(out), "decode_failures": bad}))
    return 0


def cmd_metrics(args, cfg):
    from .metrics import composite, evaluate
    from .phase_diagram import PhaseDiagram
    from .runio import write_csv, write_json

    m = cfg["metrics"]
    fn = _energy_fn(args.energy, m["oracle_seed"])
    gen = read_jsonl(args.gen)
    ref = _with_energies(read_jsonl(args.ref), fn)
    rows = evaluate(gen, ref, PhaseDiagram.from_crystals(ref), fn, m["epsilon"], m["en_threshold"])
    write_csv(
        args.out,
        ["id", "v", "s", "u", "n", "delta_e", "reasons"],
        [[r.id, r.v, r.s, r.u, r.n, r.delta_e, ";".join(r.reasons)] for r in rows],
        meta=_meta(cfg, "verdicts"),
    )
    summary = composite(rows)
    if args.summary:
        write_json(args.summary, {"_meta": _meta(cfg, "metrics_summary"), **summary})
    print(json.dumps(summary))
    return 0


@dataclasses.dataclass
class _Verdict:
    s: bool
    u: bool
    n: bool


def cmd_analyze(args, cfg):
    from .descriptors import distance_to_set, read_fingerprint_csv, tradeoff_curves
    from .runio import read_csv, write_csv

    gen = read_fingerprint_csv(args.gen_fingerprints, args.str_width) if args.gen_fingerprints else read_jsonl(args.gen)
    gt = read_fingerprint_csv(args.gt_fingerprints, args.str_width) if args.gt_fingerprints else read_jsonl(args.gt)
    report = distance_to_set(gen, gt)
    verdicts = {r["id"]: _Verdict(*(r[k] == "true" for k in ("s", "u", "n"))) for r in read_csv(args.verdicts)}
    missing = [i for i in report.ids if i not in verdicts]
    if missing:
        raise CrystalScreenError(f"verdicts missing for {len(missing)} crystals, e.g. {missing[:3]}")
    curves = tradeoff_curves([verdicts[i] for i in report.ids], report.d, bins=args.bins)
    write_csv(
        args.out,
        ["percentile", "cum_S", "cum_N", "cum_SUN"],
        [[r["percentile"], r["cum_S"], r["cum_N"], r["cum_SUN"]] for r in curves],
        meta={**_meta(cfg, "tradeoff"), "alpha": report.alpha, "beta": report.beta},
    )
    return 0


def cmd_pipeline(args, cfg):
    from .pipeline import PipelineConfig, run_pipeline

    if args.action != "run":
        raise UsageError(f"unknown pipeline action {args.action!r}")
    pc = PipelineConfig(**cfg["pipeline"])
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    from .runio import write_json

    result = run_pipeline(pc, run_dir)
    write_json(run_dir / "resolved_config.json", {"_meta": _meta(cfg, "resolved_config"), **cfg})
    print(json.dumps({"run_dir": str(run_dir), "generated": result.generated, "filtered": result.filtered, "selected": result.selected}))
    return 0


def cmd_selfcheck(args, cfg):
    from .selfcheck import run_all

    results = run_all()
    for r in results:
        print(json.dumps(r))
    return 0 if all(r["passed"] for r in results) else 1


def cmd_make_benchmark(args, cfg):
    from .runio import write_jsonl_records
    from .synthetic import make_benchmark

    b = make_benchmark(cfg["seed"] if args.seed is None else args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = _meta(cfg, "benchmark")
    for name, corpus in (("training", b.training), ("held_out", b.held_out), ("jepa_corpus", b.jepa_corpus)):
        write_jsonl_records(out / f"{name}.jsonl", [crystal_to_record(c) for c in corpus], meta=meta)
    print(json.dumps({"training": len(b.training), "held_out": len(b.held_out), "jepa_corpus": len(b.jepa_corpus)}))
    return 0


# ---------------------------------------------------------------------------


def _global_options(suppress):
    # subcommands repeat the global flags; suppressed defaults keep them from clobbering earlier values
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", default=d(None), help="TOML config file")
    g.add_argument("--set", action="append", default=d([]), metavar="SECTION.KEY=VALUE", help="override one config value")
    g.add_argument("--jobs", type=int, default=d(None), help="cap on intra-op threads")
    g.add_argument("--log-level", default=d("WARNING"))
    return g


def build_parser():
    common = _global_options(suppress=True)
    p = _Parser(prog="crystalscreen", description="Stability screening for generated crystals.", parents=[_global_options(suppress=False)])
    p.add_argument("--version", action="version", version=f"crystalscreen {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    s = sub.add_parser("hull", parents=[common], help="energy above hull for a query corpus")
    s.add_argument("--ref", required=True)
    s.add_argument("--query", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--energy", choices=("records", "oracle"), default="records")
    s.add_argument("--epsilon", type=float, default=None)
    s.set_defaults(fn=cmd_hull)

    s = sub.add_parser("train-jepa", parents=[common], help="train the embedding model")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--curve")
    s.set_defaults(fn=cmd_train_jepa)

    s = sub.add_parser("embed", parents=[common], help="embed a corpus with a trained model")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_embed)

    s = sub.add_parser("train-diffusion", parents=[common], help="train the diffusion generator")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--curve")
    s.set_defaults(fn=cmd_train_diffusion)

    s = sub.add_parser("generate", parents=[common], help="sample crystals from a generator checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--n-atoms", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("metrics", parents=[common], help="V/S/U/N verdicts and composite rates")
    s.add_argument("--gen", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--energy", choices=("records", "oracle"), default="oracle")
    s.add_argument("--out", required=True)
    s.add_argument("--summary")
    s.set_defaults(fn=cmd_metrics)

    s = sub.add_parser("analyze", parents=[common], help="cumulative metric curves along the fingerprint distance")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--gen")
    g.add_argument("--gen-fingerprints")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--gt")
    g.add_argument("--gt-fingerprints")
    s.add_argument("--verdicts", required=True)
    s.add_argument("--bins", type=int, default=20)
    s.add_argument("--str-width", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_analyze)

    s = sub.add_parser("pipeline", parents=[common], help="screening-and-refinement run")
    s.add_argument("action", choices=("run",))
    s.add_argument("--run-dir", required=True)
    s.set_defaults(fn=cmd_pipeline)

    s = sub.add_parser("selfcheck", parents=[common], help="run the embedded invariant suites")
    s.set_defaults(fn=cmd_selfcheck)

    s = sub.add_parser("make-benchmark", parents=[common], help="write the synthetic benchmark corpora")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(fn=cmd_make_benchmark)
    return p


def _error(kind, message, code):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _error("usage", str(exc), 2)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    if args.jobs is not None:
        import torch

        torch.set_num_threads(max(1, args.jobs))
    if getattr(args, "str_width", "absent") is None:
        from .descriptors import STR_WIDTH

        args.str_width = STR_WIDTH
    try:
        cfg = load_config(args.config, sets=args.set)
        return args.fn(args, cfg)
    except UsageError as exc:
        return _error("usage", str(exc), 2)
    except CrystalScreenError as exc:
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        return _error(type(exc).__name__, str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
