"""Command-line entry point: simulate corpora, fit the model, and write
post-hoc summaries.  One command per process; outputs are deterministic
given identical inputs and seeds (only the manifest carries a timestamp)."""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import corpus, postprocess, state_io, synth
from .errors import ConfigError, StbsError
from .hpf import fit_hpf
from .inference import FitConfig, Hyperparams, fit

IDEOLOGY_LEVELS = (-1.0, 0.0, 1.0)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                    inputs: list, seed: int) -> None:
    manifest = {
        "command": command,
        "flags": {k: (str(v) if isinstance(v, Path) else v)
                  for k, v in vars(args).items() if k != "func"},
        "input_hashes": {str(p): _sha256(p) for p in inputs if p and Path(p).exists()},
        "seed": seed,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    with open(out_dir / "manifest", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _read_anchors(path, num_authors: int) -> np.ndarray:
    anchors = np.full(num_authors, np.nan)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["author_id", "anchor"]:
            raise ConfigError(f"{path}: expected header 'author_id,anchor'")
        for row in reader:
            if not row:
                continue
            anchors[int(row[0])] = float(row[1])
    missing = np.flatnonzero(np.isnan(anchors))
    if len(missing):
        raise ConfigError(f"{path}: missing anchor for author {int(missing[0])}")
    return anchors


def _resolve_threads(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("STBS_THREADS")
    return int(env) if env else 1


# ---------------------------------------------------------------------------
# fit


def cmd_fit(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _resolve_threads(args)  # accepted for interface compatibility

    baselines = {}
    for spec in args.baseline or []:
        if "=" not in spec:
            raise ConfigError(f"--baseline expects NAME=LEVEL, got {spec!r}")
        name, level = spec.split("=", 1)
        baselines[name] = level

    m = corpus.load_corpus(args.counts, args.authors, args.vocab)
    if args.filter:
        m = corpus.apply_corpus_filters(m, args.min_doc_frac, args.max_doc_frac,
                                        args.min_authors_per_term, args.min_docs_per_author)
    table = corpus.load_covariates(args.covariates, baselines)
    if table.num_authors < m.num_authors:
        raise ConfigError("covariates file covers fewer authors than the corpus")
    design = corpus.build_design_matrix(table, args.formula)
    design = corpus.DesignMatrix(design.matrix[:m.num_authors], design.column_names,
                                 design.term_groups) if table.num_authors != m.num_authors else design

    if args.config:
        hyper, cfg = state_io.load_run_config(args.config)
    else:
        hyper = Hyperparams()
        cfg = FitConfig()
    overrides = {
        "num_topics": args.k, "epochs": args.epochs, "batch_size": args.batch,
        "mc_samples": args.mc_samples, "step_kappa": args.kappa, "step_tau": args.tau,
        "adam_lr": args.lr, "seed": args.seed, "expectation_mode": args.expectation,
        "position_mode": args.positions, "hpf_iters": args.hpf_iters,
        "checkpoint_every": args.checkpoint_every,
    }
    cfg_kw = {k: v for k, v in vars(cfg).items()}
    cfg_kw.update({k: v for k, v in overrides.items() if v is not None})
    cfg = FitConfig(**cfg_kw)

    anchors = (_read_anchors(args.anchors, m.num_authors) if args.anchors
               else np.zeros(m.num_authors))

    resume_state = None
    rng_state = None
    init = None
    if args.resume:
        bundle = state_io.load_state(args.resume)
        resume_state = bundle.state
        rng_state = bundle.rng_state
    elif args.init_state:
        bundle = state_io.load_state(args.init_state)
        init = bundle.state

    state_path = out_dir / "state"

    def checkpoint(state, rng, t):
        state_io.save_state(state_path, state, hyper, cfg, design=design,
                            covariates=table, doc_author=m.doc_author,
                            vocab=m.vocab, rng_state=rng)

    def log_line(epoch, elbo):
        print(f"epoch {epoch} elbo {elbo:.6f}")

    result = fit(m, design, anchors, hyper, cfg, init=init, resume=resume_state,
                 rng_state=rng_state, checkpoint_cb=checkpoint, log_cb=log_line)

    state_io.save_state(state_path, result.state, hyper, cfg, design=design,
                        covariates=table, doc_author=m.doc_author,
                        vocab=m.vocab, rng_state=result.rng_state)
    with open(out_dir / "trace.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "epoch", "elbo"])
        for t, epoch, elbo in result.elbo_trace:
            writer.writerow([t, epoch, repr(float(elbo))])
    _write_manifest(out_dir, "fit", args,
                    [args.counts, args.authors, args.covariates, args.vocab,
                     args.anchors, args.config], cfg.seed)
    return 0


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    labels = tuple("g1" if a % 2 else "g0" for a in range(args.a))
    table = corpus.CovariateTable(args.a, (corpus.Covariate("group", labels, "g0"),))
    design = corpus.build_design_matrix(table, "~ group")

    overrides = {}
    if args.pin_positions:
        anchors = _read_anchors(args.pin_positions, args.a)
        overrides["ideal"] = np.repeat(anchors[:, None], args.k, axis=1)

    hyper = Hyperparams()
    m, truth = synth.generate(hyper, args.d, args.v, args.k, args.a, design,
                              args.seed, overrides=overrides)

    corpus.write_counts(m, out_dir / "counts.csv")
    corpus.write_authors(m, out_dir / "authors.csv")
    corpus.write_covariates(table, out_dir / "covariates.csv")
    state_io.save_truth(out_dir / "truth", truth)
    _write_manifest(out_dir, "simulate", args, [args.pin_positions], args.seed)
    return 0


# ---------------------------------------------------------------------------
# summarize


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def cmd_summarize(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    bundle = state_io.load_state(args.model)
    state = bundle.state
    what = set(args.what) if args.what else {"all"}
    if "all" in what or "report" in what:
        what = {"polarity", "positions", "terms", "regression", "influence"}
    report: dict = {}

    def term_name(v: int) -> str:
        return bundle.vocab[v] if bundle.vocab else str(v)

    if "polarity" in what:
        pol = postprocess.topic_polarity(state)
        _write_csv(out_dir / "polarity.csv", ["topic", "polarity"],
                   [[k, repr(float(p))] for k, p in enumerate(pol)])
        report["polarity"] = {"topic": list(range(len(pol))),
                              "value": [float(p) for p in pol]}

    if "positions" in what:
        rows = [[a, k, repr(float(state.ideal_loc[a, k]))]
                for a in range(state.num_authors)
                for k in range(state.num_position_cols)]
        _write_csv(out_dir / "positions.csv", ["author", "topic", "position"], rows)
        report["positions"] = {
            "loc": [[float(x) for x in row] for row in state.ideal_loc]}
        if bundle.doc_author is not None:
            m = _reload_counts(args, bundle)
            if m is not None:
                w = postprocess.author_topic_weights(state, m)
                avg = postprocess.weighted_average_positions(state, w)
                _write_csv(out_dir / "weighted_positions.csv",
                           ["author", "position"],
                           [[a, repr(float(x))] for a, x in enumerate(avg)])
                report["weighted_positions"] = [float(x) for x in avg]

    if "terms" in what:
        ideologies = [args.ideology] if args.ideology is not None else list(IDEOLOGY_LEVELS)
        rows = []
        terms_section = []
        for k in range(state.num_topics):
            for ideo in ideologies:
                ranked = postprocess.top_terms(state, k, ideo, args.top_n)
                vals = postprocess.shifted_log_intensities(state, k, ideo)
                for rank, v in enumerate(ranked):
                    rows.append([k, ideo, rank, int(v), term_name(int(v)),
                                 repr(float(vals[v]))])
                terms_section.append({"topic": k, "ideology": ideo,
                                      "terms": [term_name(int(v)) for v in ranked]})
        _write_csv(out_dir / "top_terms.csv",
                   ["topic", "ideology", "rank", "term_id", "term", "intensity"], rows)
        report["top_terms"] = terms_section

    if "regression" in what:
        if bundle.design is None:
            raise ConfigError("state file carries no design matrix; cannot summarize regression")
        summary = postprocess.regression_summary(state, bundle.design,
                                                 table=bundle.covariates,
                                                 main_covariate=args.main,
                                                 bins=args.bins)
        _write_csv(out_dir / "regression.csv",
                   ["topic", "index", "name", "estimate", "se", "ccp", "label", "zero_column"],
                   [[r["topic"], r["index"], r["name"], repr(r["estimate"]),
                     repr(r["se"]), repr(r["ccp"]), r["label"], int(r["zero_column"])]
                    for r in summary.coefficients])
        _write_csv(out_dir / "regression_groups.csv",
                   ["topic", "group", "ccp", "df", "degenerate", "label"],
                   [[g["topic"], g["group"], repr(g["ccp"]), g["df"],
                     int(g["degenerate"]), g["label"]] for g in summary.groups])
        hist_rows = []
        for h in summary.histograms:
            for i, c in enumerate(h["counts"]):
                hist_rows.append([h["topic"], "(all)", i, repr(h["edges"][i]),
                                  repr(h["edges"][i + 1]), c])
            for g in h.get("groups", []):
                for i, c in enumerate(g["counts"]):
                    hist_rows.append([h["topic"], g["category"], i, repr(h["edges"][i]),
                                      repr(h["edges"][i + 1]), c])
        _write_csv(out_dir / "histograms.csv",
                   ["topic", "category", "bin", "lo", "hi", "count"], hist_rows)
        report["regression"] = {"coefficients": summary.coefficients,
                                "groups": summary.groups,
                                "histograms": summary.histograms,
                                "category_counts": summary.category_counts}

    if "influence" in what:
        m = _reload_counts(args, bundle)
        if m is None:
            if args.counts:
                raise ConfigError("counts file required for influence rankings")
            print("skipping influence rankings (no --counts given)", file=sys.stderr)
        else:
            rows = []
            infl_section = []
            for k in range(state.num_topics):
                ranked = postprocess.influential_docs(state, m, k, args.pool,
                                                      args.top_docs)
                for rank, r in enumerate(ranked):
                    rows.append([k, rank, r.doc, repr(r.chi), int(r.clamped)])
                infl_section.append({"topic": k,
                                     "docs": [[r.doc, r.chi] for r in ranked]})
            _write_csv(out_dir / "influence.csv",
                       ["topic", "rank", "doc", "chi", "clamped"], rows)
            report["influence"] = infl_section

    state_io.save_report(out_dir / "report", report)
    _write_manifest(out_dir, "summarize", args, [args.model, args.counts], 0)
    return 0


def _reload_counts(args, bundle):
    if not getattr(args, "counts", None):
        return None
    if bundle.doc_author is None:
        raise ConfigError("state file carries no author map")
    return corpus.load_counts(args.counts, doc_author=bundle.doc_author,
                              num_authors=bundle.state.num_authors)


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stbs",
                                     description="Covariate-structured ideal-point topic scaling")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit the model and write state/trace/manifest")
    p_fit.add_argument("--counts", required=True)
    p_fit.add_argument("--authors", required=True)
    p_fit.add_argument("--covariates", required=True)
    p_fit.add_argument("--vocab")
    p_fit.add_argument("--formula", required=True)
    p_fit.add_argument("--baseline", action="append", metavar="NAME=LEVEL")
    p_fit.add_argument("--anchors")
    p_fit.add_argument("--config", help="JSON run config with hyperparameter/fit fields")
    p_fit.add_argument("--k", type=int)
    p_fit.add_argument("--epochs", type=int)
    p_fit.add_argument("--batch", type=int)
    p_fit.add_argument("--mc-samples", type=int, dest="mc_samples")
    p_fit.add_argument("--kappa", type=float)
    p_fit.add_argument("--tau", type=float)
    p_fit.add_argument("--lr", type=float)
    p_fit.add_argument("--seed", type=int)
    p_fit.add_argument("--expectation", choices=["exact", "geometric"])
    p_fit.add_argument("--positions", choices=["topic_specific", "fixed_across_topics"])
    p_fit.add_argument("--hpf-iters", type=int, dest="hpf_iters")
    p_fit.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p_fit.add_argument("--filter", action=argparse.BooleanOptionalAction, default=False,
                       help="apply the corpus filters before fitting")
    p_fit.add_argument("--min-doc-frac", type=float, default=0.001)
    p_fit.add_argument("--max-doc-frac", type=float, default=0.30)
    p_fit.add_argument("--min-authors-per-term", type=int, default=10)
    p_fit.add_argument("--min-docs-per-author", type=int, default=24)
    p_fit.add_argument("--resume", help="state file to continue from")
    p_fit.add_argument("--init-state", dest="init_state",
                       help="state file supplying the warm-start blocks")
    p_fit.add_argument("--threads", type=int)
    p_fit.add_argument("--out", required=True)
    p_fit.set_defaults(func=cmd_fit)

    p_sim = sub.add_parser("simulate", help="sample a synthetic corpus with ground truth")
    p_sim.add_argument("--d", type=int, required=True)
    p_sim.add_argument("--v", type=int, required=True)
    p_sim.add_argument("--k", type=int, required=True)
    p_sim.add_argument("--a", type=int, required=True)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--pin-positions", dest="pin_positions",
                       help="CSV author_id,anchor pinning the true positions")
    p_sim.add_argument("--out", required=True)
    p_sim.set_defaults(func=cmd_simulate)

    p_sum = sub.add_parser("summarize", help="write report and plot-data files")
    p_sum.add_argument("--model", required=True)
    p_sum.add_argument("--what", action="append",
                       choices=["polarity", "positions", "terms", "regression",
                                "influence", "report", "all"])
    p_sum.add_argument("--counts", help="counts file (needed for influence rankings)")
    p_sum.add_argument("--top-n", type=int, default=10, dest="top_n")
    p_sum.add_argument("--ideology", type=float, choices=IDEOLOGY_LEVELS)
    p_sum.add_argument("--pool", type=int, default=64)
    p_sum.add_argument("--top-docs", type=int, default=10, dest="top_docs")
    p_sum.add_argument("--main", help="covariate grouping the position histograms")
    p_sum.add_argument("--bins", type=int, default=20)
    p_sum.add_argument("--threads", type=int)
    p_sum.add_argument("--out", required=True)
    p_sum.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StbsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
