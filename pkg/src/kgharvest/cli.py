"""Command-line interface.

Four subcommands cover the pipeline:

* ``prompts``  — expand a relation's initial prompt via a paraphraser and
  weight the survivors (writes a prompt-set file);
* ``harvest``  — propose candidate tuples and select the best into a KG file;
* ``eval``     — rank positives against synthesized negatives and emit a
  PR-curve CSV, summary JSON, and rendered PNG;
* ``stats``    — tuple/diversity/novelty report for a KG file.

Exit codes: 0 success, 2 validation or input error, 3 scorer or paraphrase
service unavailable, 4 wire-protocol violation. ``KGH_LM_ENDPOINT`` supplies
the default ``--scorer``; ``--config FILE`` (JSON) supplies defaults for any
long flag, with explicit flags winning.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional

from .backends import make_scorer
from .errors import (
    KGHarvestError,
    ParseError,
    ProtocolError,
    ServiceError,
    StageError,
    ValidationError,
)
from .evaluation import (
    METHODS,
    attach_external_scores,
    curve_summary,
    generate_negatives,
    load_external_scores,
    load_positives_tsv,
    pr_curve,
    score_samples,
    write_curve_csv,
)
from .paraphrase import make_paraphraser
from .prompts import (
    DEFAULT_MAX_ROUNDS,
    DEFAULT_MIN_COUNT,
    DEFAULT_MIN_DISTANCE,
    DEFAULT_N_PER_CALL,
    collect_prompts,
    load_prompt_set,
    prompt_set_hash,
    save_prompt_set,
    weight_prompts,
)
from .relations import kg_stats, load_entity_set, load_relation, read_kg, write_kg
from .search import (
    SearchAborted,
    SearchConfig,
    load_checkpoint,
    parse_threshold,
    propose_candidates,
    proposal_hash,
    rescore_and_select,
    save_checkpoint,
)

DEFAULT_ALPHA = 2.0 / 3.0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kgharvest",
        description="Harvest and evaluate knowledge graphs from masked language models.",
    )
    parser.add_argument(
        "--config", metavar="FILE", help="JSON file supplying defaults for long flags"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prompts", help="expand and weight prompts for a relation")
    sp.add_argument("--relation", required=True, metavar="FILE")
    sp.add_argument(
        "--paraphraser",
        required=True,
        metavar="SPEC",
        help="paraphrase service URL or transcript file path",
    )
    sp.add_argument("--scorer", metavar="SPEC", help="mock:<table> or http(s) URL")
    sp.add_argument("--min-count", type=int, dest="min_count")
    sp.add_argument("--max-rounds", type=int, dest="max_rounds")
    sp.add_argument("--min-distance", type=int, dest="min_distance")
    sp.add_argument("--n-per-call", type=int, dest="n_per_call")
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--tau", type=float)
    sp.add_argument("--joint-order", dest="joint_order", choices=["surface", "symmetric-mean"])
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True, metavar="FILE")

    sh = sub.add_parser("harvest", help="search candidate tuples and build a KG")
    sh.add_argument("--relation", required=True, metavar="FILE")
    sh.add_argument("--prompts", required=True, metavar="FILE")
    sh.add_argument("--scorer", metavar="SPEC")
    sh.add_argument("--max-candidates", type=int, dest="max_candidates")
    sh.add_argument("--lmax", type=int)
    sh.add_argument("--entity-cap", type=int, dest="entity_cap")
    sh.add_argument("--alpha", type=float)
    sh.add_argument(
        "--top",
        metavar="SPEC",
        help="threshold policy: none | top-half | top-k:<k> | base-k:<k>[:<factor>]",
    )
    sh.add_argument("--pruning", action=argparse.BooleanOptionalAction, default=None)
    sh.add_argument("--joint-order", dest="joint_order", choices=["surface", "symmetric-mean"])
    sh.add_argument("--candidate-pool", type=int, dest="candidate_pool")
    sh.add_argument("--checkpoint", metavar="FILE", help="write proposal checkpoint here")
    sh.add_argument("--resume", metavar="FILE", help="rerun selection from a checkpoint")
    sh.add_argument("--workers", type=int)
    sh.add_argument("--verbose", "-v", action="store_true")
    sh.add_argument("--out", required=True, metavar="FILE")

    se = sub.add_parser("eval", help="precision-recall evaluation against negatives")
    se.add_argument("--positives", required=True, metavar="FILE")
    se.add_argument(
        "--relation",
        action="append",
        required=True,
        metavar="FILE",
        help="relation file; repeat together with --prompts for multiple relations",
    )
    se.add_argument("--prompts", action="append", required=True, metavar="FILE")
    se.add_argument("--scorer", metavar="SPEC")
    se.add_argument("--method", choices=list(METHODS), required=True)
    se.add_argument("--seed", type=int)
    se.add_argument("--alpha", type=float)
    se.add_argument("--joint-order", dest="joint_order", choices=["surface", "symmetric-mean"])
    se.add_argument(
        "--external",
        action="append",
        metavar="NAME=FILE",
        help="overlay an externally scored curve (tuple_id<TAB>score file)",
    )
    se.add_argument("--plot", metavar="FILE", help="PNG path (default: out with .png)")
    se.add_argument("--out", required=True, metavar="FILE")

    st = sub.add_parser("stats", help="report tuple count, diversity and novelty")
    st.add_argument("--kg", required=True, metavar="FILE")
    st.add_argument("--reference", metavar="FILE", help="entity list for novelty")
    st.add_argument("--out", metavar="FILE")

    return parser


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read config file {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ValidationError(f"config file {path}: top level must be an object")
    return doc


_CONFIG_KEYS = {
    "min_count", "max_rounds", "min_distance", "n_per_call", "alpha", "tau",
    "joint_order", "seed", "max_candidates", "lmax", "entity_cap", "top",
    "pruning", "candidate_pool", "workers", "scorer", "method",
}


class _Options:
    """Flag resolution: explicit CLI value, then config file, then default."""

    def __init__(self, args: argparse.Namespace, config: dict):
        unknown = set(config) - _CONFIG_KEYS
        if unknown:
            raise ValidationError(
                f"config file has unknown keys: {', '.join(sorted(unknown))}"
            )
        self._args = args
        self._config = config

    def get(self, key: str, default=None):
        value = getattr(self._args, key, None)
        if value is not None:
            return value
        if key in self._config:
            return self._config[key]
        return default


def _resolve_scorer(opt: _Options):
    spec = opt.get("scorer") or os.environ.get("KGH_LM_ENDPOINT")
    if not spec:
        raise ValidationError(
            "no scorer given: pass --scorer mock:<table>|http(s)://... "
            "or set KGH_LM_ENDPOINT"
        )
    return make_scorer(spec)


def _search_config(opt: _Options) -> SearchConfig:
    top = opt.get("top", "none")
    return SearchConfig(
        max_candidates=int(opt.get("max_candidates", 50_000)),
        lmax=int(opt.get("lmax", 3)),
        entity_cap=int(opt.get("entity_cap", 10)),
        alpha=float(opt.get("alpha", DEFAULT_ALPHA)),
        threshold=parse_threshold(top) if isinstance(top, str) else top,
        pruning=bool(opt.get("pruning", True)),
        joint_order=opt.get("joint_order", "surface"),
        candidate_pool=int(opt.get("candidate_pool", 256)),
    )


def _cmd_prompts(args: argparse.Namespace, config: dict) -> int:
    opt = _Options(args, config)
    relation = load_relation(args.relation)
    paraphraser = make_paraphraser(args.paraphraser)
    scorer = _resolve_scorer(opt)
    seed = opt.get("seed")
    collected = collect_prompts(
        relation,
        paraphraser,
        min_count=int(opt.get("min_count", DEFAULT_MIN_COUNT)),
        max_rounds=int(opt.get("max_rounds", DEFAULT_MAX_ROUNDS)),
        min_distance=int(opt.get("min_distance", DEFAULT_MIN_DISTANCE)),
        n_per_call=int(opt.get("n_per_call", DEFAULT_N_PER_CALL)),
        rng_seed=None if seed is None else int(seed),
    )
    for warning in collected.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    wps = weight_prompts(
        collected.prompts,
        relation,
        scorer,
        alpha=float(opt.get("alpha", DEFAULT_ALPHA)),
        tau=float(opt.get("tau", 1.0)),
        rng_seed=None if seed is None else int(seed),
        joint_order=opt.get("joint_order", "surface"),
    )
    save_prompt_set(wps, args.out)
    print(f"wrote {len(wps.prompts)} prompts to {args.out}")
    return 0


def _cmd_harvest(args: argparse.Namespace, config: dict) -> int:
    opt = _Options(args, config)
    relation = load_relation(args.relation)
    wps = load_prompt_set(args.prompts, relation)
    scorer = _resolve_scorer(opt)
    cfg = _search_config(opt)
    progress = None
    if args.verbose:
        def progress(event: dict) -> None:
            print(json.dumps(event, sort_keys=True), file=sys.stderr)

    if args.resume:
        header, candidates = load_checkpoint(args.resume)
        if not header.get("complete", False):
            raise ValidationError(
                f"checkpoint {args.resume} is a partial dump and cannot seed selection"
            )
        if header.get("relation") != relation.name:
            raise ValidationError(
                f"checkpoint {args.resume} is for relation {header.get('relation')!r}"
            )
        if header.get("prompt_hash") != prompt_set_hash(wps):
            raise ValidationError(
                f"checkpoint {args.resume} was built from a different prompt set"
            )
        if header.get("config_hash") != proposal_hash(cfg):
            raise ValidationError(
                f"checkpoint {args.resume} was built with different search settings"
            )
    else:
        try:
            result = propose_candidates(
                wps,
                scorer,
                cfg,
                progress=progress,
                workers=int(opt.get("workers", os.cpu_count() or 1)),
            )
        except SearchAborted as exc:
            if args.checkpoint:
                save_checkpoint(
                    args.checkpoint,
                    relation.name,
                    prompt_set_hash(wps),
                    proposal_hash(cfg),
                    exc.partial,
                    complete=False,
                )
                print(
                    f"search aborted; partial checkpoint at {args.checkpoint}",
                    file=sys.stderr,
                )
            raise exc.cause from exc
        candidates = result.candidates
        if args.checkpoint:
            save_checkpoint(
                args.checkpoint,
                relation.name,
                prompt_set_hash(wps),
                proposal_hash(cfg),
                candidates,
            )
    kg = rescore_and_select(candidates, wps, scorer, cfg, progress=progress)
    write_kg(kg, args.out)
    print(f"wrote {len(kg.tuples)} tuples to {args.out}")
    return 0


def _cmd_eval(args: argparse.Namespace, config: dict) -> int:
    opt = _Options(args, config)
    if len(args.relation) != len(args.prompts):
        raise ValidationError(
            f"{len(args.relation)} --relation flags but {len(args.prompts)} "
            "--prompts flags; they pair up one to one"
        )
    scorer = _resolve_scorer(opt)
    prompt_sets = {}
    for rel_path, ps_path in zip(args.relation, args.prompts):
        relation = load_relation(rel_path)
        if relation.name in prompt_sets:
            raise ValidationError(f"relation {relation.name!r} given twice")
        prompt_sets[relation.name] = load_prompt_set(ps_path, relation)

    positives = load_positives_tsv(args.positives)
    seed = opt.get("seed", 0)
    seed = None if seed is None else int(seed)
    negatives = generate_negatives(positives, seed)
    samples = positives + negatives
    method = opt.get("method")
    scored = score_samples(
        samples,
        method,
        prompt_sets,
        scorer,
        alpha=float(opt.get("alpha", DEFAULT_ALPHA)),
        joint_order=opt.get("joint_order", "surface"),
    )
    curve = pr_curve(scored)
    write_curve_csv(scored, curve, args.out)
    summary = curve_summary(curve, method, seed)
    summary_path = str(args.out) + ".summary.json"
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    curves = [(method, curve)]
    for spec in args.external or []:
        name, sep, path = spec.partition("=")
        if not sep or not name or not path:
            raise ValidationError(f"bad --external spec {spec!r}; expected NAME=FILE")
        ext = attach_external_scores(samples, load_external_scores(path))
        curves.append((name, pr_curve(ext)))
    plot_path = args.plot or str(Path(args.out).with_suffix(".png"))
    from .plotting import render_pr_png  # deferred: pulls in matplotlib

    render_pr_png(curves, plot_path)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _cmd_stats(args: argparse.Namespace, config: dict) -> int:
    kg = read_kg(args.kg)
    reference = load_entity_set(args.reference) if args.reference else None
    report = kg_stats(kg, reference)
    blob = json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(blob)
    sys.stdout.write(blob)
    return 0


_HANDLERS = {
    "prompts": _cmd_prompts,
    "harvest": _cmd_harvest,
    "eval": _cmd_eval,
    "stats": _cmd_stats,
}


def main(argv: Optional[list[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args.config)
        return _HANDLERS[args.command](args, config)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        cause = exc.cause
        if isinstance(cause, ProtocolError):
            return 4
        if isinstance(cause, ServiceError):
            return 3
        return 2
    except ProtocolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ServiceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValidationError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KGHarvestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
