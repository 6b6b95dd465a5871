"""``jointaccess`` command line: synth -> train -> audit, plus ad-hoc recommend.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .audit import (
    DEFAULT_BINS, DEFAULT_SUBSET, REPORT_VERSION, AuditError, PairCensus,
    bin_means, empirical_pair_census, exact_inaccessible_sets,
    minority_exposure, oracle_pair_census, pair_accessibility, pair_similarities,
    select_subset, similarity_binned_counts, subset_pairs, topic_pair_matrix,
    user_diversity_table,
)
from .embeddings import EmbeddingError, EmbeddingSet, load_embeddings, save_embeddings
from .factorization import (
    DEFAULT_ITERATIONS, DivergenceError, FactorModel, RatingsError, grid_search_reg,
    read_ratings, rmse, train_als,
)
from .numerics import NumericsError, SolverError
from .recommend import score_multi
from .synth import GroundTruth, SynthError, gen_sphere_world, gen_topic_world, load_world, save_world

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
METRICS = ("census", "binned-counts", "heuristic", "topic-matrix", "exposure", "diversity")
USER_EMBEDDINGS = "user_embeddings.csv"
ITEM_EMBEDDINGS = "item_embeddings.csv"
TRAIN_LOG = "train_log.json"

_logger = logging.getLogger("jointaccess")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- synth --------------------------------------------------------------------

def cmd_synth(args) -> int:
    common = dict(rating_fraction=args.rating_fraction, seed=args.seed)
    try:
        if args.world == "sphere":
            truth, ratings = gen_sphere_world(args.items, args.users, args.dim,
                                              noise_sd=args.noise_sd, **common)
        else:
            truth, ratings = gen_topic_world(
                args.items, args.users, args.dim, n_topics=args.topics,
                minority_user_fraction=args.minority_fraction,
                topic_noise_sd=args.topic_noise_sd, rating_noise_sd=args.noise_sd, **common)
    except SynthError as exc:
        # every generator failure here is a bad flag combination
        raise UsageError(str(exc)) from None
    for path in save_world(truth, ratings, args.out):
        print(path)
    return EXIT_OK


# -- train --------------------------------------------------------------------

def cmd_train(args) -> int:
    data = read_ratings(args.ratings, args.format)
    config = {"ratings": str(args.ratings), "format": args.format, "dim": args.dim,
              "reg": args.reg, "iterations": args.iterations, "seed": args.seed,
              "norm_constraint": args.norm_constraint, "reg_grid": args.reg_grid,
              "folds": args.folds, "version": __version__}
    log: dict = {"config": config, "n_users": data.n_users, "n_items": data.n_items,
                 "n_ratings": len(data)}
    reg = args.reg
    if args.reg_grid:
        reg, cv = grid_search_reg(data, args.dim, args.reg_grid, args.folds, args.seed,
                                  args.iterations, args.norm_constraint)
        log["cv_rmse"] = {format(k, ".17g"): v for k, v in cv.items()}
    log["reg_used"] = reg
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        model = train_als(data, args.dim, reg, args.iterations, args.seed, args.norm_constraint)
    log["warnings"] = [str(w.message) for w in caught]
    log["history"] = list(model.history)
    log["final_rmse"] = rmse(model, data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_embeddings(EmbeddingSet(data.user_ids, model.user_matrix), out / USER_EMBEDDINGS)
    save_embeddings(EmbeddingSet(data.item_ids, model.item_matrix,
                                 normalized=args.norm_constraint), out / ITEM_EMBEDDINGS)
    _write_json(log, out / TRAIN_LOG)
    print(f"final train RMSE {log['final_rmse']:.6f} (reg={reg})")
    return EXIT_OK


# -- audit --------------------------------------------------------------------

def _align_truth(truth: GroundTruth, item_ids, user_ids) -> GroundTruth:
    """Re-order ground truth to the model's item (and user) order by id."""
    iidx = {i: n for n, i in enumerate(truth.item_vectors.ids)}
    try:
        items = [iidx[i] for i in item_ids]
    except KeyError as exc:
        raise AuditError(f"model item {exc.args[0]!r} missing from ground truth") from None
    if user_ids is None:
        users = list(range(truth.n_users))
    else:
        uidx = {u: n for n, u in enumerate(truth.user_ids)}
        try:
            users = [uidx[u] for u in user_ids]
        except KeyError as exc:
            raise AuditError(f"model user {exc.args[0]!r} missing from ground truth") from None
    def pick(arr, idx):
        return None if arr is None else np.asarray(arr)[idx]
    return GroundTruth(truth.item_vectors.subset(items), truth.user_vectors[users],
                       tuple(truth.user_ids[u] for u in users), truth.minority_topic,
                       pick(truth.item_topics, items), pick(truth.user_minority, users),
                       pick(truth.user_topics, users), truth.topic_vectors, truth.params)


def _requested_metrics(args, have_users: bool, have_truth: bool, have_topics: bool) -> list[str]:
    needs = {"census": ["--users"], "binned-counts": ["--users"], "heuristic": [],
             "topic-matrix": ["--truth (topic world)"],
             "exposure": ["--users", "--truth (topic world)"],
             "diversity": ["--users", "--truth"]}
    available = {"--users": have_users, "--truth": have_truth, "--truth (topic world)": have_topics}
    if args.metrics == "auto":
        return [m for m in METRICS if all(available[r] for r in needs[m])]
    chosen = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for m in chosen:
        if m not in needs:
            raise UsageError(f"unknown metric {m!r}; choose from {', '.join(METRICS)}")
        missing = [r for r in needs[m] if not available[r]]
        if missing:
            raise UsageError(f"metric {m!r} requires {' and '.join(missing)}")
    return chosen


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _curve_rows(curve):
    return [[curve.edges[b], curve.edges[b + 1], curve.values[b], int(curve.counts[b])]
            for b in range(len(curve.values))]


def cmd_audit(args) -> int:
    items = load_embeddings(args.items)
    users = load_embeddings(args.users) if args.users else None
    truth = load_world(args.truth) if args.truth else None
    if users is not None and users.d != items.d:
        raise EmbeddingError(f"user d={users.d} does not match item d={items.d}")
    if truth is not None:
        truth = _align_truth(truth, items.ids, users.ids if users is not None else None)
    metrics = _requested_metrics(args, users is not None, truth is not None,
                                 truth is not None and truth.has_topics)
    if args.k < 1 or args.k >= items.n:
        raise UsageError(f"--k must lie in [1, {items.n - 1}]")

    counts = None
    subset_mode = args.subset_mode
    if subset_mode == "popular":
        if args.ratings:
            data = read_ratings(args.ratings, args.ratings_format)
            pos = {i: n for n, i in enumerate(data.item_ids)}
            raw = data.item_counts()
            counts = np.array([raw[pos[i]] if i in pos else 0 for i in items.ids])
        else:
            subset_mode = "first"
    subset = select_subset(items.n, args.subset, subset_mode, counts, args.seed)
    if len(subset) < max(2, args.k):
        raise UsageError("subset must contain at least max(2, k) items")

    model = None
    if users is not None:
        model = FactorModel(users.matrix, items.matrix)
    sim_source = args.similarity
    if sim_source == "auto":
        sim_source = "truth" if truth is not None else "model"
    if sim_source == "truth" and truth is None:
        raise UsageError("--similarity truth requires --truth")
    sim_items = truth.item_vectors if sim_source == "truth" else items

    params = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
              if k not in ("func",)}
    params.update(subset_mode_effective=subset_mode, similarity_source=sim_source,
                  metrics_run=metrics, n_items=items.n, report_version=REPORT_VERSION)
    report: dict = {"report_version": REPORT_VERSION, "version": __version__,
                    "generated_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
                    "params": params, "subset": [items.ids[i] for i in subset]}

    pairs = subset_pairs(subset)
    pair_table: dict[str, list] = {
        "items": [[items.ids[a], items.ids[b]] for a, b in pairs],
        "similarity": pair_similarities(sim_items, pairs, args.mode).tolist()}
    tables: dict[str, tuple] = {}

    model_census: PairCensus | None = None
    oracle_census: PairCensus | None = None
    if "census" in metrics or "binned-counts" in metrics:
        model_census = empirical_pair_census(model, subset, args.k)
        if truth is not None:
            oracle_census = oracle_pair_census(truth, subset, args.k)
    if "census" in metrics:
        section = {"k": args.k, "model": {"unique": model_census.unique_count,
                                          "fraction": model_census.unique_fraction,
                                          "n_users": model_census.n_users,
                                          "sets": model_census.to_json(items.ids)}}
        if oracle_census is not None:
            section["oracle"] = {"unique": oracle_census.unique_count,
                                 "fraction": oracle_census.unique_fraction,
                                 "n_users": oracle_census.n_users,
                                 "sets": oracle_census.to_json(items.ids)}
        report["census"] = section
        pair_table["model_count"] = model_census.pair_counts(pairs).astype(int).tolist()
        if oracle_census is not None:
            pair_table["oracle_count"] = oracle_census.pair_counts(pairs).astype(int).tolist()
    if "binned-counts" in metrics:
        curve = similarity_binned_counts(model_census, sim_items, args.bins, args.mode)
        section = {"model": curve.to_json()}
        tables["binned_counts_model"] = curve
        if oracle_census is not None:
            oc = similarity_binned_counts(oracle_census, sim_items, args.bins, args.mode)
            section["oracle"] = oc.to_json()
            tables["binned_counts_oracle"] = oc
        report["binned_counts"] = section

    heuristic_flags = None
    if "heuristic" in metrics or "topic-matrix" in metrics:
        heuristic_flags = pair_accessibility(items, pairs, args.ridge)
        pair_table["heuristic_accessible"] = heuristic_flags.tolist()
    if "heuristic" in metrics:
        curve = bin_means(np.asarray(pair_table["similarity"]), heuristic_flags.astype(float),
                          args.bins)
        report["heuristic_accessibility"] = {"ridge": args.ridge, "model": curve.to_json(),
                                             "spearman": curve.spearman(),
                                             "fraction": float(heuristic_flags.mean())}
        tables["heuristic_accessibility"] = curve
    if "topic-matrix" in metrics:
        matrix = topic_pair_matrix(items, truth.item_topics, args.ridge, subset,
                                   n_topics=len(truth.topic_vectors), flags=heuristic_flags)
        report["topic_matrix"] = {"minority_topic": truth.minority_topic,
                                  "matrix": [[None if np.isnan(x) else x for x in row]
                                             for row in matrix]}
    if "exposure" in metrics:
        report["minority_exposure"] = minority_exposure(model, truth, subset, args.k)
    if "diversity" in metrics:
        table = user_diversity_table(truth, model, subset, args.k, args.bins, args.mode)
        report["user_diversity"] = {"model": table["model"].to_json(),
                                    "oracle": table["oracle"].to_json(),
                                    "model_mean": table["model_mean"],
                                    "oracle_mean": table["oracle_mean"],
                                    "oracle_spearman": table["oracle"].spearman()}
        tables["diversity_model"] = table["model"]
        tables["diversity_oracle"] = table["oracle"]
    if args.exact:
        n_sets, bad = exact_inaccessible_sets(items, subset, args.k)
        report["exact"] = {"k": args.k, "n_sets": n_sets, "n_inaccessible": len(bad),
                           "inaccessible": [[items.ids[i] for i in s] for s in bad]}
        if args.k == 2:
            bad_set = set(bad)
            pair_table["exact_accessible"] = [(int(a), int(b)) not in bad_set for a, b in pairs]
    report["pairs"] = [dict(zip(pair_table, row)) for row in zip(*pair_table.values())]

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(report, out)
    if args.csv_dir:
        csv_dir = Path(args.csv_dir)
        csv_dir.mkdir(parents=True, exist_ok=True)
        _write_csv(csv_dir / "pairs.csv", list(pair_table), zip(*pair_table.values()))
        for name, curve in tables.items():
            _write_csv(csv_dir / f"{name}.csv", ["lo", "hi", "value", "n"], _curve_rows(curve))
    print(out)
    return EXIT_OK


# -- recommend ----------------------------------------------------------------

def cmd_recommend(args) -> int:
    items = load_embeddings(args.items)
    users = load_embeddings(args.users)
    if users.d != items.d:
        raise EmbeddingError(f"user d={users.d} does not match item d={items.d}")
    groups: dict[str, list[np.ndarray]] = {}
    for rid, vec in zip(users.ids, users.matrix):
        key = rid.rpartition("/")[0] if args.multi and "/" in rid else rid
        groups.setdefault(key, []).append(vec)
    wanted = args.user or list(groups)
    if not 1 <= args.k <= items.n:
        raise UsageError(f"--k must lie in [1, {items.n}]")
    unknown = [u for u in wanted if u not in groups]
    if unknown:
        raise EmbeddingError(f"unknown user {unknown[0]!r}")
    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["user_id", "rank", "item_id", "score"])
    for uid in wanted:
        scores = score_multi(np.array(groups[uid]), items)
        order = np.argsort(-scores, kind="stable")[:args.k]
        for rank, j in enumerate(order, start=1):
            out.writerow([uid, rank, items.ids[j], format(float(scores[j]), ".17g")])
    return EXIT_OK


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jointaccess", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a ground-truth world and ratings")
    s.add_argument("--world", choices=("sphere", "topic"), default="sphere")
    s.add_argument("--items", type=int, default=300)
    s.add_argument("--users", type=int, default=3000)
    s.add_argument("--dim", type=int, default=16)
    s.add_argument("--rating-fraction", type=float, default=0.1)
    s.add_argument("--noise-sd", type=float, default=0.01)
    s.add_argument("--topics", type=int, default=5)
    s.add_argument("--minority-fraction", type=float, default=0.2)
    s.add_argument("--topic-noise-sd", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, default=Path("."))
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="fit single-vector ALS factors")
    t.add_argument("--ratings", type=Path, required=True)
    t.add_argument("--format", choices=("auto", "csv", "movielens"), default="auto")
    t.add_argument("--dim", type=int, default=16)
    t.add_argument("--reg", type=float, default=0.1)
    t.add_argument("--reg-grid", type=_float_list, default=None,
                   help="comma-separated values; selects reg by cross validation")
    t.add_argument("--folds", type=int, default=10)
    t.add_argument("--iterations", type=int, default=DEFAULT_ITERATIONS)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--norm-constraint", action="store_true")
    t.add_argument("--out", type=Path, default=Path("."))
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("audit", help="joint-accessibility audit report")
    a.add_argument("--items", type=Path, required=True, help="model item embeddings CSV")
    a.add_argument("--users", type=Path, help="model user embeddings CSV")
    a.add_argument("--truth", type=Path, help="directory written by `synth`")
    a.add_argument("--ratings", type=Path, help="ratings file for item popularity")
    a.add_argument("--ratings-format", choices=("auto", "csv", "movielens"), default="auto")
    a.add_argument("--subset", type=int, default=DEFAULT_SUBSET)
    a.add_argument("--subset-mode", choices=("popular", "random", "first"), default="popular")
    a.add_argument("--k", type=int, default=2)
    a.add_argument("--bins", type=int, default=DEFAULT_BINS)
    a.add_argument("--ridge", type=float, default=0.0)
    a.add_argument("--mode", choices=("dot", "cosine"), default="dot")
    a.add_argument("--similarity", choices=("auto", "truth", "model"), default="auto")
    a.add_argument("--metrics", default="auto",
                   help=f"'auto' or comma-separated subset of {','.join(METRICS)}")
    a.add_argument("--exact", action="store_true", help="exact LP audit of every size-k set")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", type=Path, default=Path("report.json"))
    a.add_argument("--csv-dir", type=Path)
    a.set_defaults(func=cmd_audit)

    r = sub.add_parser("recommend", help="print top-k items per user")
    r.add_argument("--items", type=Path, required=True)
    r.add_argument("--users", type=Path, required=True)
    r.add_argument("--user", action="append", help="user id (repeatable; default all)")
    r.add_argument("--k", type=int, default=2)
    r.add_argument("--multi", action="store_true",
                   help="group rows '<user>/<n>' into one multi-vector user")
    r.set_defaults(func=cmd_recommend)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"jointaccess: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, DivergenceError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"jointaccess: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, EmbeddingError, RatingsError, SynthError, AuditError, NumericsError,
            ValueError) as exc:
        print(f"jointaccess: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
