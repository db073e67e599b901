"""Command-line entry point.

Commands are composable filesystem stages: synth -> fit/grid -> score/eval
-> ensemble -> report. Every output embeds its effective configuration and
seed; outputs are staged in a temp directory and promoted atomically, and
any validation failure exits nonzero before touching the target.
"""

import argparse
import dataclasses
import json
import os
import shutil
import sys

import numpy as np

from . import alien, baselines, ensemble as ens, metrics, report as rep
from .bundle import (
    EmbeddingBundle,
    SynthConfig,
    TokenSequenceBundle,
    generate_synthetic,
    read_bundle,
    write_bundle,
)
from .errors import MissingArtifactError, UncertaintyToolkitError, ValidationError

METHODS = ("sr", "entropy", "alien", "md", "mdr", "mdm", "rde", "linear_probe", "attn_probe")
FITTED_METHODS = ("alien", "linear_probe", "attn_probe")
UNBOUNDED_METHODS = {"md", "mdr", "mdm", "rde"}


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _staged_output(out: str, overwrite: bool):
    """Context manager: yields a staging dir, promotes it to ``out`` on
    success, discards it on failure."""

    class _Stage:
        def __enter__(self):
            self.out = os.path.abspath(out)
            if os.path.exists(self.out) and os.listdir(self.out) and not overwrite:
                raise ValidationError(
                    f"output directory {self.out} exists and is not empty (pass --overwrite)"
                )
            parent = os.path.dirname(self.out) or "."
            os.makedirs(parent, exist_ok=True)
            self.tmp = f"{self.out}.staging-{os.getpid()}"
            if os.path.exists(self.tmp):
                shutil.rmtree(self.tmp)
            os.makedirs(self.tmp)
            return self.tmp

        def __exit__(self, exc_type, exc, tb):
            if exc_type is not None:
                shutil.rmtree(self.tmp, ignore_errors=True)
                return False
            if os.path.isdir(self.out):
                shutil.rmtree(self.out)
            os.replace(self.tmp, self.out)
            return False

    return _Stage()


def _load_bundle(path, flag: str):
    if path is None:
        raise ValidationError(f"this command requires {flag}")
    return read_bundle(path)


def _parse_methods(raw: str):
    methods = [m.strip() for m in raw.split(",") if m.strip()]
    if not methods:
        raise ValidationError("--methods list is empty")
    for m in methods:
        if m not in METHODS:
            raise ValidationError(f"unknown method {m!r}; choose from {METHODS}")
    return methods


def _plain_features(test_bundle):
    if isinstance(test_bundle, TokenSequenceBundle):
        return test_bundle.terminal_features().astype(np.float64)
    return test_bundle.features.astype(np.float64)


def _load_fitted(method: str, fits_dir):
    if fits_dir is None:
        raise MissingArtifactError(f"method '{method}' needs a fitted artifact; pass --fits")
    path = os.path.join(fits_dir, method)
    if not os.path.isdir(path):
        raise MissingArtifactError(f"method '{method}' has no fitted artifact at {path}")
    if os.path.isfile(os.path.join(path, "alien_manifest.json")):
        return alien.load_alien_head(path)
    if os.path.isfile(os.path.join(path, "probe_manifest.json")):
        return baselines.load_probe(path)
    raise MissingArtifactError(f"method '{method}': no recognizable manifest under {path}")


def compute_scores(method: str, test_bundle, train_bundle=None, fits_dir=None) -> np.ndarray:
    """Per-example uncertainty scores for one method on the test bundle."""
    if method == "sr":
        return test_bundle.base_sr() if isinstance(test_bundle, EmbeddingBundle) else _seq_sr(test_bundle)
    if method == "entropy":
        return (
            test_bundle.base_entropy()
            if isinstance(test_bundle, EmbeddingBundle)
            else _seq_entropy(test_bundle)
        )
    if method in ("md", "mdr", "mdm", "rde"):
        if train_bundle is None:
            raise MissingArtifactError(f"method '{method}' needs --train to fit its statistics")
        feats = _plain_features(test_bundle)
        if method == "rde":
            return baselines.rde_fit(train_bundle).scores(feats)
        stats = baselines.fit_gaussian_stats(train_bundle)
        fn = {"md": baselines.md_scores, "mdr": baselines.mdr_scores, "mdm": baselines.mdm_scores}
        return fn[method](stats, feats)
    if method in FITTED_METHODS:
        fitted = _load_fitted(method, fits_dir)
        if method == "attn_probe":
            if not isinstance(test_bundle, TokenSequenceBundle):
                raise ValidationError("attn_probe needs a sequence-mode test bundle")
            return baselines.attention_probe_scores(fitted, test_bundle)
        if isinstance(fitted, alien.AlienHead):
            return alien.score_alien(fitted, _plain_features(test_bundle))
        return baselines.probe_scores(fitted, _plain_features(test_bundle))
    raise ValidationError(f"unknown method {method!r}")


def _seq_entropy(seq_bundle):
    from . import core

    if seq_bundle.logits is None:
        raise ValidationError("sequence bundle carries no logits; entropy unavailable")
    return core.entropy_of_logits(seq_bundle.logits.astype(np.float64))


def _seq_sr(seq_bundle):
    from . import core

    if seq_bundle.logits is None:
        raise ValidationError("sequence bundle carries no logits; SR unavailable")
    return 1.0 - core.softmax_batch(seq_bundle.logits.astype(np.float64)).max(axis=1)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        n_train=args.n_train,
        n_val=args.n_val,
        n_test=args.n_test,
        d=args.d,
        c=args.c,
        class_separation=args.class_sep,
        noise_scale=args.noise,
        epistemic_fraction=args.rho,
        seed=args.seed,
    )
    cfg.validate()  # reject bad configs before any write
    result = generate_synthetic(cfg)
    with _staged_output(args.out, args.overwrite) as tmp:
        for role, bundle in result.bundles().items():
            write_bundle(bundle, os.path.join(tmp, role))
        rep.write_json(os.path.join(tmp, "generation_log.json"), result.info)
    print(f"wrote train/val/test bundles under {args.out}")
    for role, acc in result.info["base_accuracy"].items():
        print(f"  base accuracy [{role}]: {acc:.4f}")
    return 0


def _train_cfg(args, default_lr: float) -> alien.TrainConfig:
    lr = args.lr if args.lr is not None else default_lr
    return alien.TrainConfig(
        learning_rate=lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed
    ).validate()


def _run_fit(args, method: str, tmp: str) -> dict:
    train = _load_bundle(args.train, "--train")
    config = {
        "method": method,
        "train": args.train,
        "seed": args.seed,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
    }
    if method == "alien":
        if args.grid:
            val = _load_bundle(args.val, "--val (grid search)")
            cfg = _train_cfg(args, alien.LR_GRID[0])
            result = alien.grid_search(train, val, cfg)
            alien.save_alien_head(
                result.head,
                tmp,
                meta={
                    "learning_rate": result.learning_rate,
                    "epochs": args.epochs,
                    "seed": args.seed,
                    "alpha": result.alpha,
                    "beta": result.beta,
                    "variant": "full_alien",
                },
            )
            rep.write_json(
                os.path.join(tmp, "grid_table.json"),
                {
                    "selected": {
                        "alpha": result.alpha,
                        "beta": result.beta,
                        "learning_rate": result.learning_rate,
                        "val_roc_auc": result.val_roc_auc,
                    },
                    "points": result.table,
                },
            )
            config.update(
                {"grid": True, "val": args.val, "alpha": result.alpha, "beta": result.beta,
                 "learning_rate": result.learning_rate}
            )
        else:
            cfg = _train_cfg(args, 4e-4)
            fitted = alien.fit_alien(train, args.variant, cfg, alpha=args.alpha, beta=args.beta)
            meta = {
                "variant": args.variant,
                "alpha": args.alpha,
                "beta": args.beta,
                "learning_rate": cfg.learning_rate,
                "epochs": args.epochs,
                "seed": args.seed,
            }
            if isinstance(fitted, alien.AlienHead):
                alien.save_alien_head(fitted, tmp, meta=meta)
            else:
                baselines.save_probe(fitted, tmp, meta=meta)
            config.update(meta)
    elif method == "linear_probe":
        cfg = _train_cfg(args, 1e-3)
        feats = _plain_features(train)
        probe = baselines.fit_linear_probe(feats, train.error_labels(), cfg, depth_tag=args.depth)
        baselines.save_probe(
            probe, tmp, meta={"learning_rate": cfg.learning_rate, "epochs": args.epochs,
                              "seed": args.seed}
        )
        config.update({"learning_rate": cfg.learning_rate, "depth_tag": args.depth})
    elif method == "attn_probe":
        if not isinstance(train, TokenSequenceBundle):
            raise ValidationError("attn_probe needs a sequence-mode training bundle")
        cfg = _train_cfg(args, 1e-3)
        probe = baselines.fit_attention_probe(train, train.error_labels(), cfg, depth_tag=args.depth)
        baselines.save_probe(
            probe, tmp, meta={"learning_rate": cfg.learning_rate, "epochs": args.epochs,
                              "seed": args.seed}
        )
        config.update({"learning_rate": cfg.learning_rate, "depth_tag": args.depth})
    else:
        raise ValidationError(f"fit supports {FITTED_METHODS}, not {method!r}")
    return config


def cmd_fit(args) -> int:
    methods = _parse_methods(args.methods)
    if len(methods) != 1:
        raise ValidationError("fit trains exactly one method per output directory")
    with _staged_output(args.out, args.overwrite) as tmp:
        config = _run_fit(args, methods[0], tmp)
        rep.write_json(os.path.join(tmp, "fit_log.json"), {"config": config})
    print(f"fitted {methods[0]} -> {args.out}")
    return 0


def cmd_grid(args) -> int:
    args.grid = True
    args.variant = "full_alien"
    args.alpha = None
    args.beta = None
    with _staged_output(args.out, args.overwrite) as tmp:
        config = _run_fit(args, "alien", tmp)
        rep.write_json(os.path.join(tmp, "fit_log.json"), {"config": config})
    print(f"grid-searched alien head -> {args.out}")
    return 0


def _scores_for_methods(args, methods):
    test = _load_bundle(args.test, "--test")
    train = read_bundle(args.train) if args.train else None
    out = {}
    for method in methods:
        out[method] = (compute_scores(method, test, train, args.fits), test)
    return out, test


def cmd_score(args) -> int:
    methods = _parse_methods(args.methods)
    scored, test = _scores_for_methods(args, methods)
    with _staged_output(args.out, args.overwrite) as tmp:
        for method, (scores, _) in scored.items():
            rep.write_json(
                os.path.join(tmp, f"scores_{method}.json"),
                {
                    "schema_version": rep.SCHEMA_VERSION,
                    "method": method,
                    "split_role": test.split_role,
                    "n": int(scores.size),
                    "scores": [float(v) for v in scores],
                    "config": {"test": args.test, "train": args.train, "fits": args.fits,
                               "seed": args.seed},
                },
            )
    print(f"wrote scores for {', '.join(methods)} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    methods = _parse_methods(args.methods)
    scored, test = _scores_for_methods(args, methods)
    dataset = args.dataset or os.path.basename(os.path.normpath(args.test))
    errors = test.error_labels()
    reports = {}
    for method, (scores, _) in scored.items():
        rescaled = method in UNBOUNDED_METHODS
        unit_scores = metrics.rescale_unit(scores) if rescaled else scores
        ev = metrics.bootstrap_eval(unit_scores, errors, n_boot=args.n_boot, seed=args.seed,
                                    ece_bins=args.ece_bins)
        config = {
            "test": args.test,
            "train": args.train,
            "fits": args.fits,
            "seed": args.seed,
            "n_boot": args.n_boot,
            "ece_bins": args.ece_bins,
            "rescaled_to_unit": rescaled,
            "split_role": test.split_role,
        }
        reports[method] = rep.make_report(method, dataset, ev, config)
    with _staged_output(args.out, args.overwrite) as tmp:
        for method, r in reports.items():
            rep.write_json(os.path.join(tmp, f"report_{method}.json"), r)
        table = rep.eval_table_markdown(reports)
        with open(os.path.join(tmp, "table.md"), "w") as fh:
            fh.write(f"# {dataset}\n\n{table}")
        rep.write_json(
            os.path.join(tmp, "summary.json"),
            {"schema_version": rep.SCHEMA_VERSION, "dataset": dataset,
             "methods": list(reports.keys())},
        )
    print(f"evaluated {', '.join(methods)} on {dataset} -> {args.out}")
    sys.stdout.write(rep.eval_table_markdown(reports))
    return 0


def cmd_ensemble(args) -> int:
    test = _load_bundle(args.test, "--test")
    feats_test = _plain_features(test)
    if args.members:
        probs = ens.read_members(args.members)
        if probs.shape[1] != test.n:
            raise ValidationError("member files do not match the test bundle size")
        members = None
    else:
        train = _load_bundle(args.train, "--train (or pass --members)")
        x = train.features.astype(np.float64)
        y = np.asarray(train.gold_labels, dtype=np.int64)
        if args.synth_log:
            with open(args.synth_log) as fh:
                log = json.load(fh)
            pocket = set(log["pocket_indices"][train.split_role])
            keep = np.array([i not in pocket for i in range(train.n)])
            x, y = x[keep], y[keep]
        members = ens.train_ensemble_members(x, y, train.c, t=args.t, seed=args.seed)
        probs = ens.member_probs(members, feats_test)
    decomp = ens.decompose(probs)

    method_scores = {}
    for method in _parse_methods(args.methods):
        method_scores[method] = compute_scores(
            method, test, read_bundle(args.train) if args.train else None, args.fits
        )
    correlations = ens.correlate_components(decomp, method_scores)

    with _staged_output(args.out, args.overwrite) as tmp:
        if members is not None:
            ens.write_members(os.path.join(tmp, "members"), probs)
        rep.write_json(
            os.path.join(tmp, "decomposition.json"),
            {
                "schema_version": rep.SCHEMA_VERSION,
                "split_role": test.split_role,
                "t": int(probs.shape[0]),
                "h_total": [float(v) for v in decomp.h_total],
                "h_alea": [float(v) for v in decomp.h_alea],
                "h_epi": [float(v) for v in decomp.h_epi],
                "config": {"test": args.test, "train": args.train, "seed": args.seed,
                           "t": args.t, "synth_log": args.synth_log},
            },
        )
        rep.write_json(
            os.path.join(tmp, "correlations.json"),
            {"schema_version": rep.SCHEMA_VERSION, "split_role": test.split_role,
             "spearman": correlations},
        )
        lines = ["| component | " + " | ".join(method_scores) + " |",
                 "|---" * (len(method_scores) + 1) + "|"]
        for comp in ens.COMPONENTS:
            row = " | ".join(f"{correlations[comp][m]:.4f}" for m in method_scores)
            lines.append(f"| {comp} | {row} |")
        with open(os.path.join(tmp, "correlations.md"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
    print(f"ensemble decomposition (T={probs.shape[0]}) -> {args.out}")
    return 0


def cmd_report(args) -> int:
    collected = {}  # (method, dataset) -> report
    for indir in args.inputs:
        names = sorted(os.listdir(indir))
        found = [n for n in names if n.startswith("report_") and n.endswith(".json")]
        if not found:
            raise ValidationError(f"no report_*.json files in {indir}")
        for name in found:
            path = os.path.join(indir, name)
            with open(path) as fh:
                r = rep.check_schema(json.load(fh), path)
            key = (r["method"], r["dataset"])
            if key in collected:
                raise ValidationError(f"duplicate report for method/dataset {key}")
            collected[key] = r

    methods = sorted({m for m, _ in collected})
    datasets = sorted({d for _, d in collected})
    tables = {}
    ranks = {}
    for metric, lower in rep.RANKED_METRICS.items():
        table = {}
        for m in methods:
            table[m] = {}
            for ds in datasets:
                if (m, ds) not in collected:
                    raise MissingArtifactError(f"method {m!r} has no report for dataset {ds!r}")
                table[m][ds] = collected[(m, ds)]["metrics"][metric]["mean"]
        ranks[metric] = metrics.average_rank(table, lower_is_better=lower)
        tables[metric] = table

    with _staged_output(args.out, args.overwrite) as tmp:
        rep.write_json(
            os.path.join(tmp, "ranks.json"),
            {"schema_version": rep.SCHEMA_VERSION, "datasets": datasets,
             "methods": methods, "average_rank": ranks},
        )
        for metric in rep.RANKED_METRICS:
            values = {
                (m, ds): (
                    collected[(m, ds)]["metrics"][metric]["mean"],
                    collected[(m, ds)]["metrics"][metric]["std"],
                )
                for m in methods
                for ds in datasets
            }
            md = rep.metric_table_markdown(metric, datasets, methods, values, ranks[metric])
            with open(os.path.join(tmp, f"table_{metric}.md"), "w") as fh:
                fh.write(md)
    print(f"aggregated {len(collected)} reports over {len(datasets)} dataset(s) -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(p, out_required=True):
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--overwrite", action="store_true", help="replace an existing output dir")


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="alien-ue", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic train/val/test bundles")
    _add_common(p)
    p.add_argument("--n-train", type=int, default=4000)
    p.add_argument("--n-val", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=2000)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--c", type=int, default=4)
    p.add_argument("--class-sep", type=float, default=4.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--rho", type=float, default=0.1)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("fit", help="train one uncertainty method")
    _add_common(p)
    p.add_argument("--train", required=True, help="training bundle directory")
    p.add_argument("--val", help="validation bundle (required with --grid)")
    p.add_argument("--methods", required=True, help="one of alien,linear_probe,attn_probe")
    p.add_argument("--variant", default="full_alien", choices=alien.VARIANTS)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--grid", action="store_true", help="grid-search alpha/beta/lr")
    p.add_argument("--depth", default="last", choices=baselines.DEPTH_TAGS)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("grid", help="grid-search the entropy head")
    _add_common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_grid)

    p = sub.add_parser("score", help="write per-example scores")
    _add_common(p)
    p.add_argument("--methods", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--train", help="training bundle (distance methods)")
    p.add_argument("--fits", help="directory of fitted artifacts, one subdir per method")
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("eval", help="bootstrap evaluation reports")
    _add_common(p)
    p.add_argument("--methods", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--train")
    p.add_argument("--fits")
    p.add_argument("--dataset", help="dataset name recorded in reports")
    p.add_argument("--n-boot", type=int, default=20)
    p.add_argument("--ece-bins", type=int, default=10)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ensemble", help="uncertainty decomposition + correlations")
    _add_common(p)
    p.add_argument("--test", required=True)
    p.add_argument("--train")
    p.add_argument("--members", help="existing member-probability directory")
    p.add_argument("--t", type=int, default=5, help="ensemble size when training members")
    p.add_argument("--methods", default="sr,entropy")
    p.add_argument("--fits")
    p.add_argument("--synth-log", help="generation log; excludes pocket rows from member training")
    p.set_defaults(fn=cmd_ensemble)

    p = sub.add_parser("report", help="aggregate eval outputs across datasets")
    _add_common(p)
    p.add_argument("inputs", nargs="+", help="eval output directories")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UncertaintyToolkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
