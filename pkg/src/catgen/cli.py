"""Command-line entry point: synth, granger, mask, train, generate, eval, ablate.

Exit codes: 0 success, 1 usage error, 2 data or numeric error. All randomness
flows from --seed (default: CATGEN_SEED environment variable, then 42), and
every subcommand is reproducible byte-for-byte given identical arguments,
seed and inputs.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys

from .errors import CatgenError

log = logging.getLogger("catgen")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _set_thread_env(argv) -> None:
    # must happen before numpy is imported anywhere in the process
    threads = None
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif arg.startswith("--threads="):
            threads = arg.split("=", 1)[1]
    if threads is not None and threads.isdigit():
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = threads


def _default_seed() -> int:
    raw = os.environ.get("CATGEN_SEED", "42")
    try:
        return int(raw)
    except ValueError:
        return 42


def build_parser() -> _Parser:
    parser = _Parser(prog="catgen", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", "-v", action="count", default=0)
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS threads")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE")
        p.add_argument("--config", default=None)

    p = sub.add_parser("synth", help="generate paired synthetic ST/SC matrices")
    common(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("granger", help="pairwise Granger causality screen")
    p.add_argument("--matrix", required=True)
    p.add_argument("--lag", type=int, default=1)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_granger)

    p = sub.add_parser("mask", help="emit a causal attention mask")
    p.add_argument("--s", type=int, required=True)
    p.add_argument("--c", type=int, required=True)
    p.add_argument("--sz", required=True, help="comma-separated split sizes")
    p.add_argument("--out", default=None, help="CSV output path (stdout if omitted)")
    p.add_argument("--pbm", default=None, help="also write a PBM bitmap here")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("train", help="train the causality-aware transformer")
    common(p)
    p.add_argument("--st", required=True)
    p.add_argument("--sc", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (.catg)")
    p.add_argument("--history", default=None, help="metrics history CSV path")
    p.add_argument("--save-prepared", default=None, metavar="DIR",
                   help="write preprocessed matrices and gene splits here")
    p.add_argument("--gene-order", choices=("random", "granger"), default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate ST profiles from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sc", required=True)
    p.add_argument("--genes", required=True, help="file with one target gene id per line")
    p.add_argument("--out", required=True)
    p.add_argument("--ar-groups", type=int, default=1)
    p.add_argument("--sampling", default="full")
    p.add_argument("--embeddings", default=None, help="write generated latents as CSV")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gene-distances", default=None,
                   help="write pairwise gene distance matrix of the predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one configuration axis")
    common(p)
    p.add_argument("--axis", required=True,
                   choices=("decay", "blocks", "sampling", "decoder", "encoder_variation"))
    p.add_argument("--st", required=True)
    p.add_argument("--sc", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=1, help="number of seeds per setting")
    p.set_defaults(func=cmd_ablate)
    return parser


def _resolve_seed(args) -> int:
    return args.seed if getattr(args, "seed", None) is not None else _default_seed()


def _load_values(args) -> dict:
    from .config import apply_overrides, load_config

    values = load_config(getattr(args, "config", None))
    return apply_overrides(values, getattr(args, "overrides", None))


# -- subcommands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    from .config import synth_config
    from .data import save_matrix
    from .synth import generate

    cfg = synth_config(_load_values(args), _resolve_seed(args))
    st, sc, edges = generate(cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    save_matrix(st, os.path.join(args.out_dir, "st.csv"))
    save_matrix(sc, os.path.join(args.out_dir, "sc.csv"))
    with open(os.path.join(args.out_dir, "edges.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["driver", "target", "coeff", "lag"])
        for driver, target, coeff, lag in edges:
            writer.writerow([driver, target, repr(coeff), lag])
    log.info("wrote st.csv, sc.csv, edges.csv to %s", args.out_dir)
    return 0


def cmd_granger(args) -> int:
    from .data import load_matrix
    from .granger import screen

    matrix = load_matrix(args.matrix)
    results = screen(matrix, lag=args.lag, top_k=args.top_k)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["driver", "target", "lag", "f_stat", "p_value"])
        for r in results:
            writer.writerow([r.driver, r.target, r.lag, repr(r.f_stat), repr(r.p_value)])
    return 0


def cmd_mask(args) -> int:
    from .arplan import ARStepPlan
    from .mask import build_mask

    plan = ARStepPlan.from_text(args.sz)
    mask = build_mask(args.s, args.c, plan)
    if args.out:
        mask.to_csv(args.out)
    else:
        for row in mask.matrix:
            sys.stdout.write(",".join(str(int(x)) for x in row) + "\n")
    if args.pbm:
        mask.to_pbm(args.pbm)
    return 0


def _prepare_from_files(st_path, sc_path, values):
    from .config import data_options
    from .data import SC, load_matrix, prepare_pair

    opts = data_options(values)
    st_raw = load_matrix(st_path, modality="ST")
    sc_raw = load_matrix(sc_path, modality=SC)
    return prepare_pair(st_raw, sc_raw, **opts), opts


def cmd_train(args) -> int:
    from .config import model_config, train_config
    from .data import save_matrix, split_genes
    from .model import save_checkpoint
    from .train import fit

    seed = _resolve_seed(args)
    values = _load_values(args)
    cfg = train_config(values, seed)
    if args.gene_order:
        cfg.gene_order = args.gene_order
    pair, opts = _prepare_from_files(args.st, args.sc, values)
    split = split_genes(range(len(pair.genes)), seed)
    mcfg = model_config(values, p=pair.st.n_obs, q=pair.sc.n_obs, variational=cfg.variational_encoder)

    result = fit(pair.st, pair.sc, split, mcfg, cfg)
    meta = {
        "T": cfg.T,
        "beta_start": cfg.beta_start,
        "beta_end": cfg.beta_end,
        "seed": seed,
        "data_normalize": int(opts["apply_normalize"]),
        "qc_min_genes_sc": opts["min_genes_sc"],
        "qc_min_genes_st": opts["min_genes_st"],
    }
    save_checkpoint(result.params, args.out, meta)
    history_path = args.history or os.path.join(os.path.dirname(os.path.abspath(args.out)), "history.csv")
    with open(history_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_pcc"])
        for row in result.history:
            writer.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_pcc"])])
    if args.save_prepared:
        os.makedirs(args.save_prepared, exist_ok=True)
        save_matrix(pair.st, os.path.join(args.save_prepared, "st_prepared.csv"))
        save_matrix(pair.sc, os.path.join(args.save_prepared, "sc_prepared.csv"))
        for name, indices in (
            ("train", split.train_genes), ("val", split.val_genes), ("test", split.test_genes)
        ):
            with open(os.path.join(args.save_prepared, f"genes_{name}.txt"), "w") as fh:
                fh.write("\n".join(pair.genes[i] for i in indices) + "\n")
    log.info("best validation PCC %.4f at epoch %d", result.best_val_pcc, result.best_epoch)
    return 0


def cmd_generate(args) -> int:
    from .data import SC, load_matrix, normalize, qc_filter, save_matrix
    from .diffusion import linear_schedule, parse_strategy
    from .generate import generate_genes
    from .model import load_checkpoint

    params, meta = load_checkpoint(args.ckpt)
    schedule = linear_schedule(int(meta["T"]), meta["beta_start"], meta["beta_end"])
    sc = load_matrix(args.sc, modality=SC)
    sc = qc_filter(sc, min_genes_sc=int(meta.get("qc_min_genes_sc", 500)))
    if int(meta.get("data_normalize", 1)):
        sc = normalize(sc)
    with open(args.genes, "r", encoding="utf-8") as fh:
        genes = [line.strip() for line in fh if line.strip() and not line.startswith("#")]
    predicted = generate_genes(
        sc,
        genes,
        params,
        schedule,
        groups=args.ar_groups,
        strategy=parse_strategy(args.sampling),
        seed=_resolve_seed(args),
        trained_T=int(meta["T"]),
    )
    save_matrix(predicted, args.out)
    if args.embeddings:
        from .model import encode

        latents = encode(sc.values[[sc.gene_index()[g] for g in genes]], "sc", params.detached())
        with open(args.embeddings, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["gene_id"] + [f"z{i}" for i in range(params.cfg.d)])
            for gene, row in zip(genes, latents.z.data):
                writer.writerow([gene] + [repr(float(x)) for x in row])
    return 0


def cmd_eval(args) -> int:
    import numpy as np

    from .data import load_matrix
    from .errors import DegenerateInputError, UnknownGeneError
    from .metrics import aggregate, js_divergence, pcc, rmse_z, ssim

    pred = load_matrix(args.pred)
    truth = load_matrix(args.truth)
    truth_index = truth.gene_index()
    missing = [g for g in pred.gene_ids if g not in truth_index]
    if missing:
        raise UnknownGeneError(f"predicted genes missing from truth: {', '.join(missing)}")

    columns = {"pcc": pcc, "ssim": ssim, "rmse": rmse_z, "js": js_divergence}
    per_gene: dict[str, list[float]] = {name: [] for name in columns}
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["gene_id", *columns])
        for row, gene in enumerate(pred.gene_ids):
            scores = []
            for name, fn in columns.items():
                try:
                    value = fn(pred.values[row], truth.values[truth_index[gene]])
                    per_gene[name].append(value)
                except DegenerateInputError:
                    value = float("nan")
                scores.append(value)
            writer.writerow([gene] + [repr(float(s)) for s in scores])
        means, variances = {}, {}
        for name, valid in per_gene.items():
            means[name], variances[name] = aggregate(valid) if valid else (math.nan, math.nan)
        writer.writerow(["__mean__"] + [repr(float(means[n])) for n in columns])
        writer.writerow(["__variance__"] + [repr(float(variances[n])) for n in columns])

    if args.gene_distances:
        values = pred.values
        diff = values[:, None, :] - values[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=2))
        with open(args.gene_distances, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["gene_id", *pred.gene_ids])
            for gene, row in zip(pred.gene_ids, dist):
                writer.writerow([gene] + [repr(float(x)) for x in row])
    return 0


_ABLATION_AXES = {
    "decay": ("ar.decay", [0.7, 0.8, 0.9, 1.0]),
    "blocks": ("model.blocks", [1, 2, 3, 4, 5]),
    "sampling": ("diffusion.sampling", ["full", "frac:2", "frac:3", "frac:4", "frac:20"]),
    "decoder": ("train.train_decoder", [False, True]),
    "encoder_variation": ("train.variational_encoder", [False, True]),
}


def cmd_ablate(args) -> int:
    from .config import model_config, train_config
    from .data import split_genes
    from .train import fit

    base_seed = _resolve_seed(args)
    values = _load_values(args)
    pair, _ = _prepare_from_files(args.st, args.sc, values)
    key, settings = _ABLATION_AXES[args.axis]

    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["axis", "setting", "seed", "best_val_pcc", "best_epoch"])
        for setting in settings:
            for offset in range(args.seeds):
                seed = base_seed + offset
                trial = dict(values)
                trial[key] = setting
                cfg = train_config(trial, seed)
                mcfg = model_config(
                    trial, p=pair.st.n_obs, q=pair.sc.n_obs,
                    variational=cfg.variational_encoder,
                )
                split = split_genes(range(len(pair.genes)), seed)
                result = fit(pair.st, pair.sc, split, mcfg, cfg)
                writer.writerow(
                    [args.axis, setting, seed, repr(result.best_val_pcc), result.best_epoch]
                )
                log.info("ablate %s=%s seed=%d -> %.4f", args.axis, setting, seed,
                         result.best_val_pcc)
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _set_thread_env(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CatgenError as exc:
        print(f"catgen: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
