"""Command-line surface: train and score tabular CSV data, probe the
entmax transform, and run the associative-memory experiment suites.

Exit codes: 0 success, 2 input error (bad files, flags, or model
version), 3 numerical failure during training. All commands are
deterministic given their arguments and seed; SPARSEHOP_SEED serves as
a fallback seed when no --seed flag or config value is given.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .bishop_network import Model, NetworkConfig, build_network
from .entmax import entmax
from .hopfield_memory import ExperimentSpec, experiments
from .modelfile import ModelFileError, load_model, save_model
from .tabular_embedding import fit as fit_embedding
from .training import (Dataset, TrainConfig, evaluate, predict_scores,
                       softmax_scores, split, train_loop,
                       write_history_csv, write_summary_json)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

# One flat default table: network shape, then optimization. Flags override
# config-file values, which override these.
CONFIG_DEFAULTS = {
    "g": 32, "g_shared": 8, "l": 8, "c": 10, "h": 3, "r": 4, "s": 24,
    "d_model": 512, "d_ff": 256, "heads": 4, "dropout": 0.2,
    "alpha_mode": "learnable", "alpha": 1.5, "beta": None,
    "lr": 5e-5, "batch_size": 64, "max_epochs": 200, "patience": 20,
    "micro_chunk": 8,
}


class InputError(Exception):
    """Anything the user can fix: bad file, bad flag, bad schema."""


# ---------------------------------------------------------------------------
# shared plumbing


def _fallback_seed(value):
    if value is not None:
        return int(value)
    env = os.environ.get("SPARSEHOP_SEED")
    return int(env) if env else 0


def read_schema(path):
    """Ordered (name, kind) pairs from a JSON list of {name, kind}."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read schema file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, list) or not raw:
        raise InputError(f"{path}: schema must be a non-empty JSON list")
    draft = []
    for i, entry in enumerate(raw):
        if (not isinstance(entry, dict)
                or set(entry) != {"name", "kind"}):
            raise InputError(f"{path}: entry {i} must be an object with "
                             f"exactly the keys 'name' and 'kind'")
        if entry["kind"] not in ("numerical", "categorical"):
            raise InputError(f"{path}: entry {i} ({entry['name']!r}) has "
                             f"unknown kind {entry['kind']!r}")
        draft.append((str(entry["name"]), entry["kind"]))
    names = [n for n, _ in draft]
    if len(set(names)) != len(names):
        raise InputError(f"{path}: duplicate column names in schema")
    return draft


def read_csv_rows(path):
    """Header plus one dict per data row; ragged rows fail with their
    1-based line number."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"cannot read data file: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file, expected a header row")
        rows = []
        for rec in reader:
            if len(rec) != len(header):
                raise InputError(
                    f"{path}: line {reader.line_num}: expected "
                    f"{len(header)} fields, got {len(rec)}")
            rows.append((reader.line_num, dict(zip(header, rec))))
    return header, rows


def _check_columns(header, draft, path, label=None):
    if label is not None and label not in header:
        raise InputError(f"{path}: label column {label!r} not found in "
                         f"header {header}")
    for name, _ in draft:
        if name not in header:
            raise InputError(f"{path}: schema column {name!r} not found "
                             f"in header {header}")


def _parse_numeric_cells(rows, draft, path):
    """Convert numerical cells in place; errors carry file line numbers."""
    numeric = [n for n, k in draft if k == "numerical"]
    for line, row in rows:
        for name in numeric:
            try:
                value = float(row[name])
            except ValueError:
                raise InputError(
                    f"{path}: line {line}: column {name!r} value "
                    f"{row[name]!r} is not a number") from None
            if not np.isfinite(value):
                raise InputError(f"{path}: line {line}: column {name!r} "
                                 f"is not finite")
            row[name] = value


def load_run_config(args):
    """Defaults, then the JSON config file, then explicit flags."""
    merged = dict(CONFIG_DEFAULTS)
    if args.config:
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except OSError as exc:
            raise InputError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InputError(f"{args.config}: invalid JSON: {exc}") from exc
        unknown = set(file_cfg) - set(merged) - {"seed"}
        if unknown:
            raise InputError(f"{args.config}: unknown config keys "
                             f"{sorted(unknown)}")
        merged.update(file_cfg)
    for key in CONFIG_DEFAULTS:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    return merged


def _figure_path(out_dir, name):
    return os.path.join(out_dir, name)


# ---------------------------------------------------------------------------
# fit


def _read_labels(rows, label, task, path):
    raw = [row[label] for _, row in rows]
    if task == "regression":
        y = np.empty(len(raw))
        for i, ((line, _), cell) in enumerate(zip(rows, raw)):
            try:
                y[i] = float(cell)
            except ValueError:
                raise InputError(f"{path}: line {line}: label value "
                                 f"{cell!r} is not a number") from None
        if not np.all(np.isfinite(y)):
            raise InputError(f"{path}: non-finite label value")
        return y, None
    classes = sorted(set(raw))
    if len(classes) < 2:
        raise InputError(f"{path}: need at least 2 classes in column "
                         f"{label!r}, found {classes}")
    index = {cls: i for i, cls in enumerate(classes)}
    return np.array([index[v] for v in raw], dtype=np.intp), classes


def _loss_figure(path, history):
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [h["epoch"] for h in history]
    ax.plot(epochs, [h["train_loss"] for h in history], label="train")
    ax.plot(epochs, [h["val_loss"] for h in history], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_fit(args):
    cfg = load_run_config(args)
    seed = _fallback_seed(args.seed)
    draft = read_schema(args.schema)
    header, rows = read_csv_rows(args.data)
    _check_columns(header, draft, args.data, label=args.label)
    if any(name == args.label for name, _ in draft):
        raise InputError(f"label column {args.label!r} also appears in "
                         f"the feature schema")
    _parse_numeric_cells(rows, draft, args.data)
    y, classes = _read_labels(rows, args.label, args.task, args.data)
    if len(rows) < 10:
        raise InputError(f"{args.data}: need at least 10 rows to split "
                         f"70/10/20, got {len(rows)}")

    strat = y if args.task == "classification" else None
    idx_tr, idx_va, idx_te = split(len(rows), (0.7, 0.1, 0.2), seed=seed,
                                   labels=strat)
    feature_rows = [row for _, row in rows]
    train_rows = [feature_rows[i] for i in idx_tr]

    # Embedding artifacts (vocabularies, quantile bins, tables) come from
    # the training split only.
    schema, bins, tables = fit_embedding(
        train_rows, draft, g=cfg["g"], g_shared=cfg["g_shared"],
        l=cfg["l"], d_model=cfg["d_model"], seed=seed)
    out_dim = len(classes) if classes is not None else 1
    net_cfg = NetworkConfig(
        g=cfg["g"], g_shared=cfg["g_shared"], l=cfg["l"], c=cfg["c"],
        h=cfg["h"], r=cfg["r"], s=cfg["s"], d_model=cfg["d_model"],
        d_ff=cfg["d_ff"], heads=cfg["heads"], dropout=cfg["dropout"],
        alpha_mode=cfg["alpha_mode"], alpha=cfg["alpha"], beta=cfg["beta"],
        task=args.task, out_dim=out_dim)
    net = build_network(np.random.default_rng(seed), net_cfg, schema.n)
    model = Model(net_cfg, schema, bins, tables, net, classes=classes)

    encode = lambda ix: Dataset.encode([feature_rows[i] for i in ix],
                                       y[ix], model)
    train_ds, val_ds, test_ds = encode(idx_tr), encode(idx_va), encode(idx_te)

    loss_kind = ("cross-entropy" if args.task == "classification"
                 else "squared-error")
    train_cfg = TrainConfig(lr=cfg["lr"], batch_size=cfg["batch_size"],
                            max_epochs=cfg["max_epochs"],
                            patience=cfg["patience"], seed=seed,
                            loss=loss_kind, micro_chunk=cfg["micro_chunk"])
    try:
        result = train_loop(model, train_ds, val_ds, train_cfg)
    except FloatingPointError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC

    os.makedirs(args.out, exist_ok=True)
    model_path = os.path.join(args.out, "model.bishop")
    save_model(model_path, model)
    test_metrics = evaluate(model, test_ds)
    val_metrics = evaluate(model, val_ds)

    metrics = {"task": args.task, "seed": seed,
               "epochs": len(result.history),
               "best_epoch": result.best_epoch,
               "stopped": result.stopped_reason,
               "test": test_metrics.to_dict(),
               "validation": val_metrics.to_dict()}
    if args.task == "classification":
        metrics["auc"] = test_metrics.auc
        metrics["accuracy"] = test_metrics.accuracy
    else:
        metrics["r2"] = test_metrics.r2
    write_summary_json(os.path.join(args.out, "metrics.json"), metrics)
    write_history_csv(os.path.join(args.out, "history.csv"), result.history)
    _loss_figure(_figure_path(args.out, "training-curve.png"),
                 result.history)

    headline = (f"auc={test_metrics.auc}" if args.task == "classification"
                else f"r2={test_metrics.r2}")
    print(f"fit: {len(rows)} rows, {len(result.history)} epochs, "
          f"test {headline}; wrote {model_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict


def cmd_predict(args):
    try:
        model = load_model(args.model)
    except ModelFileError as exc:
        raise InputError(str(exc)) from exc
    header, rows = read_csv_rows(args.data)
    draft = list(model.schema.columns)
    _check_columns(header, draft, args.data)
    _parse_numeric_cells(rows, draft, args.data)
    feature_rows = [row for _, row in rows]

    dummy = np.zeros(len(feature_rows))
    data = Dataset.encode(feature_rows, dummy, model)
    if model.config.task == "classification":
        out_header = ["row"] + [f"prob_{c}" for c in model.classes] \
            + ["prediction"]
    else:
        out_header = ["row", "prediction"]

    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(out_header)
        if feature_rows:
            scores = predict_scores(model, data)
            if model.config.task == "classification":
                probs = softmax_scores(scores)
                picks = probs.argmax(axis=1)
                for i in range(len(feature_rows)):
                    writer.writerow([i]
                                    + [f"{p:.12g}" for p in probs[i]]
                                    + [model.classes[picks[i]]])
            else:
                for i, value in enumerate(scores.reshape(-1)):
                    writer.writerow([i, f"{value:.12g}"])
    print(f"predict: {len(feature_rows)} rows -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entmax probe


def cmd_entmax(args):
    try:
        logits = [float(tok) for tok in args.logits.split(",") if tok != ""]
    except ValueError:
        raise InputError(f"cannot parse logits {args.logits!r} as "
                         f"comma-separated floats") from None
    if not logits:
        raise InputError("logits list is empty")
    try:
        result = entmax(np.array(logits), args.alpha)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    payload = {"alpha": result.alpha,
               "p": [float(v) for v in result.p],
               "tau": result.tau,
               "support": [int(i) + 1 for i in result.support]}
    print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# experiments

EXPERIMENT_KINDS = {"retrieval-error": "retrieval_error",
                    "noise": "noise_robustness",
                    "convergence": "convergence_speed"}

TRIAL_COLUMNS = {
    "retrieval_error": ["trial", "alpha", "error", "query_distance"],
    "noise_robustness": ["trial", "sigma", "alpha", "error",
                         "support_size"],
    "convergence_speed": ["trial", "alpha", "iterations", "converged",
                          "final_error"],
}


def _experiment_figure(path, kind, spec, rows):
    fig, ax = plt.subplots(figsize=(6, 4))
    if kind == "noise_robustness":
        for alpha in spec.alphas:
            xs = list(spec.sigmas)
            ys = [np.mean([r["error"] for r in rows
                           if r["alpha"] == alpha and r["sigma"] == s])
                  for s in xs]
            ax.plot(xs, ys, marker="o", label=f"alpha={alpha}")
        ax.set_xlabel("noise scale sigma")
        ax.set_ylabel("mean retrieval error")
    elif kind == "convergence_speed":
        xs = np.arange(len(spec.alphas))
        ys = [np.mean([r["iterations"] for r in rows
                       if r["alpha"] == a]) for a in spec.alphas]
        ax.bar(xs, ys)
        ax.set_xticks(xs, [f"alpha={a}" for a in spec.alphas])
        ax.set_ylabel("mean iterations to converge")
    else:
        for alpha in spec.alphas:
            pts = [(r["query_distance"], r["error"]) for r in rows
                   if r["alpha"] == alpha]
            pts.sort()
            ax.scatter([p[0] for p in pts], [p[1] for p in pts], s=8,
                       label=f"alpha={alpha}")
        ax.set_xlabel("query distance from stored pattern")
        ax.set_ylabel("one-step retrieval error")
    if kind != "convergence_speed":
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_experiment(args):
    kind = EXPERIMENT_KINDS[args.kind]
    try:
        alphas = tuple(float(tok) for tok in args.alphas.split(","))
        spec = ExperimentSpec(d=args.d, M=args.M, beta=args.beta,
                              alphas=alphas, trials=args.trials,
                              seed=_fallback_seed(args.seed),
                              max_iters=args.max_iters)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    result = experiments(kind, spec)

    os.makedirs(args.out, exist_ok=True)
    cols = TRIAL_COLUMNS[kind]
    with open(os.path.join(args.out, "trials.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in result.rows:
            writer.writerow([row.get(c, "") for c in cols])
    write_summary_json(os.path.join(args.out, "summary.json"),
                       result.summary)
    if result.rows:
        _experiment_figure(_figure_path(args.out, f"{args.kind}.png"),
                           kind, spec, result.rows)
    print(f"experiment {args.kind}: {spec.trials} trials -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring


def _add_config_flags(sub):
    sub.add_argument("--config", help="JSON config file; flags override")
    for key, default in CONFIG_DEFAULTS.items():
        if key in ("alpha_mode",):
            sub.add_argument("--alpha-mode", dest="alpha_mode",
                             choices=["learnable", "fixed"], default=None)
        elif isinstance(default, float) or key in ("beta", "alpha", "lr",
                                                   "dropout"):
            sub.add_argument(f"--{key.replace('_', '-')}", dest=key,
                             type=float, default=None)
        else:
            sub.add_argument(f"--{key.replace('_', '-')}", dest=key,
                             type=int, default=None)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sparsehop",
        description="Sparse Hopfield tabular learning and associative-"
                    "memory experiments.")
    commands = parser.add_subparsers(dest="command", required=True)

    p_fit = commands.add_parser("fit", help="train on a CSV dataset")
    p_fit.add_argument("--data", required=True)
    p_fit.add_argument("--schema", required=True)
    p_fit.add_argument("--label", required=True)
    p_fit.add_argument("--task", choices=["classification", "regression"],
                       default="classification")
    p_fit.add_argument("--out", required=True)
    p_fit.add_argument("--seed", type=int, default=None)
    _add_config_flags(p_fit)
    p_fit.set_defaults(func=cmd_fit)

    p_pred = commands.add_parser("predict", help="score a CSV dataset")
    p_pred.add_argument("--model", required=True)
    p_pred.add_argument("--data", required=True)
    p_pred.add_argument("--out", required=True)
    p_pred.set_defaults(func=cmd_predict)

    p_ent = commands.add_parser("entmax",
                                help="evaluate the transform on one vector")
    p_ent.add_argument("--alpha", type=float, required=True)
    p_ent.add_argument("--logits", required=True,
                       help="comma-separated scores")
    p_ent.set_defaults(func=cmd_entmax)

    p_exp = commands.add_parser("experiment",
                                help="associative-memory experiment suites")
    p_exp.add_argument("kind", choices=sorted(EXPERIMENT_KINDS))
    p_exp.add_argument("--d", type=int, default=8)
    p_exp.add_argument("--M", type=int, default=16)
    p_exp.add_argument("--beta", type=float, default=4.0)
    p_exp.add_argument("--alphas", default="2.0,1.0")
    p_exp.add_argument("--trials", type=int, default=100)
    p_exp.add_argument("--seed", type=int, default=None)
    p_exp.add_argument("--max-iters", type=int, default=100)
    p_exp.add_argument("--out", required=True)
    p_exp.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
