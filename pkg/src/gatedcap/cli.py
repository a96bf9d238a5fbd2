"""Command-line entry point: data generation, training, pruning, export, evaluation."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path


from . import baselines as bl
from . import data as dt
from . import evaluation as ev
from . import training as tr
from .decoder import LAYER_NAMES
from .sparse import SPM_MAGIC, SparseModel, report, write_layer_csv

log = logging.getLogger("gatedcap")

SCHEME_ALIASES = {"blind": "class_blind", "uniform": "class_uniform", "distribution": "class_distribution"}


class CliError(Exception):
    pass


# -- config handling ----------------------------------------------------------------


def _coerce(key: str, raw: str):
    default = tr.TrainConfig.__dataclass_fields__[key].default
    if key == "lambda_s":
        return None if raw.lower() in ("auto", "none", "") else float(raw)
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def read_config_file(path: str | Path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    known = {f.name for f in fields(tr.TrainConfig)}
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            out[key] = _coerce(key, raw)
        except ValueError as e:
            raise CliError(f"{path}:{lineno}: bad value for {key}: {e}") from None
    return out


def resolve_config(args, overrides: dict) -> tr.TrainConfig:
    settings = read_config_file(args.config) if args.config else {}
    settings.update({k: v for k, v in overrides.items() if v is not None})
    if getattr(args, "lambda_s", None) == "auto":
        settings["lambda_s"] = None
    try:
        return tr.TrainConfig.from_dict(settings)
    except (TypeError, ValueError) as e:
        raise CliError(str(e)) from None


def _parse_lambda(raw: str):
    if raw == "auto":
        return raw
    value = float(raw)
    if value < 0:
        raise argparse.ArgumentTypeError("lambda-s must be >= 0 or 'auto'")
    return value


# -- helpers ---------------------------------------------------------------------------


def _load_data(path: str | None, seed: int) -> dt.Prepared:
    if path is None:
        return dt.preprocess(dt.generate(seed))
    if not Path(path).exists():
        raise CliError(f"data file not found: {path}")
    return dt.preprocess(dt.Dataset.read(path))


def _require(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"file not found: {path}")
    return p


def _write_metrics(path: Path, cfg: tr.TrainConfig, records: list[dict], extra: dict | None = None) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"config": cfg.to_dict(), "seed": cfg.seed, **(extra or {})}, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _finish_training(state: tr.TrainState, out: Path, prep: dt.Prepared, start: int = 0) -> None:
    state.model.meta["vocab"] = prep.vocab.tokens
    tr.save_checkpoint(state, out)
    tr.load_checkpoint(out)  # validate before reporting success
    _write_metrics(out.with_suffix(out.suffix + ".metrics.jsonl"), state.config, state.history[start:],
                   {"stage": state.stage, "sparsity": tr.current_sparsity(state.model),
                    "lambda_s_resolved": state.config.resolved_lambda if state.model.gates is not None else None})
    log.info("wrote %s (sparsity %.4f)", out, tr.current_sparsity(state.model))


def _load_any(path: str):
    p = _require(path)
    with open(p, "rb") as fh:
        magic = fh.read(4)
    try:
        if magic == SPM_MAGIC:
            return SparseModel.load(p)
        state = tr.load_checkpoint(p)
        state.model.meta.setdefault("config", state.config.to_dict())
        return state.model
    except (ValueError, KeyError) as e:
        raise CliError(f"{path}: {e}") from None


def _check_vocab(model, prep: dt.Prepared) -> None:
    tokens = model.meta.get("vocab")
    if tokens is not None and list(tokens) != prep.vocab.tokens:
        raise CliError("dataset vocabulary does not match the model's vocabulary")


def _stepper(model):
    return model if isinstance(model, SparseModel) else ev.DenseStepper(model)


def _decode_one(job):
    model, features, beam, max_len = job
    return ev.beam_search(_stepper(model), features, beam, max_len)


# -- subcommands ------------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    ds = dt.generate(args.seed, args.n_scenes)
    ds.write(args.out)
    log.info("wrote %d scenes to %s", len(ds.scenes), args.out)


def cmd_train(args) -> None:
    cfg = resolve_config(args, {
        "method": args.method, "cell": args.cell, "s_target": args.starget, "gate_init": args.gate_init,
        "seed": args.seed, "epochs_stage1": args.epochs,
        "lambda_s": args.lambda_s if args.lambda_s != "auto" else None,
    })
    if cfg.method == "gated" and cfg.s_target == 0.0 and args.starget is None:
        raise CliError("--method gated needs --starget")
    if cfg.method == "dense" and cfg.s_target > 0:
        raise CliError("--starget conflicts with --method dense")
    if cfg.method == "masked":
        raise CliError("use prune-hard for fixed-mask training")
    prep = _load_data(args.data, args.data_seed)
    log.info("train %s, lambda_s=%s", cfg.method, cfg.resolved_lambda if cfg.method == "gated" else "-")
    state = tr.train_stage1(prep, cfg)
    _finish_training(state, Path(args.out), prep)


def cmd_finetune(args) -> None:
    try:
        state = tr.load_checkpoint(_require(args.ckpt))
    except ValueError as e:
        raise CliError(f"{args.ckpt}: {e}") from None
    prep = _load_data(args.data, args.data_seed)
    _check_vocab(state.model, prep)
    if args.epochs is not None:
        state.config.epochs_stage2 = args.epochs
    start = len(state.history)
    try:
        tr.train_stage2(state, prep)
    except ValueError as e:
        raise CliError(str(e)) from None
    _finish_training(state, Path(args.out), prep, start)


def cmd_prune_hard(args) -> None:
    if not 0.0 <= args.starget < 1.0:
        raise CliError(f"--starget must be in [0, 1), got {args.starget}")
    state = tr.load_checkpoint(_require(args.ckpt))
    if state.model.gates is not None:
        raise CliError("prune-hard expects a dense checkpoint")
    prep = _load_data(args.data, args.data_seed)
    _check_vocab(state.model, prep)
    mask = bl.hard_prune({n: state.model.weights[n].data for n in LAYER_NAMES}, args.starget,
                         SCHEME_ALIASES[args.scheme])
    state.config.method, state.config.s_target = "masked", args.starget
    start = len(state.history)
    tr.retrain(state, prep, mask, args.retrain_epochs)
    state.model.meta["scheme"] = SCHEME_ALIASES[args.scheme]
    _finish_training(state, Path(args.out), prep, start)


def cmd_export(args) -> None:
    state = tr.load_checkpoint(_require(args.ckpt))
    sm = SparseModel.from_model(state.model)
    sm.meta["config"] = state.config.to_dict()
    sm.save(args.out)
    SparseModel.load(args.out)
    rep = report(sm)
    log.info("exported %s: sparsity %.4f, CR %.2fx", args.out, rep.sparsity, rep.compression_ratio)


def cmd_eval(args) -> None:
    model = _load_any(args.model)
    prep = _load_data(args.data, args.data_seed)
    _check_vocab(model, prep)
    feats = prep.features[args.split]
    n = len(feats) if args.limit is None else min(args.limit, len(feats))
    jobs = [(model, feats[i], args.beam, args.max_len) for i in range(n)]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            ids = list(pool.map(_decode_one, jobs, chunksize=max(1, n // (4 * args.workers))))
    else:
        ids = [_decode_one(j) for j in jobs]
    caps = [prep.vocab.decode(c) for c in ids]
    refs = prep.references[args.split][:n]
    train_caps = [r for scene in prep.references["train"] for r in scene]
    res = ev.EvalResult(ev.bleu(caps, refs), ev.uniqueness(caps, train_caps), ev.avg_length(caps), caps)
    rep = report(model)
    row = ev.eval_row(args.model_id or Path(args.model).stem, rep.sparsity, rep.compression_ratio, res)
    ev.write_eval_csv(args.out, [row])
    side = {"model": str(args.model), "split": args.split, "beam": args.beam, "n": n, **row,
            "config": model.meta.get("config")}
    Path(args.out).with_suffix(".json").write_text(json.dumps(side, indent=1, sort_keys=True))
    if args.captions:
        Path(args.captions).write_text("".join(" ".join(c) + "\n" for c in caps))
    log.info("B-4 %.4f, uniqueness %.1f%%, avg length %.2f", res.bleu["bleu4"], res.uniqueness_pct, res.avg_len)


def cmd_report(args) -> None:
    model = _load_any(args.model)
    rep = report(model)
    config = model.meta.get("config")
    out = {**rep.to_dict(), "config": config, "seed": config.get("seed") if config else None}
    Path(args.out).write_text(json.dumps(out, indent=1, sort_keys=True))
    write_layer_csv(args.layers_csv or Path(args.out).with_suffix(".layers.csv"), rep)
    log.info("sparsity %.4f, CR %.2fx", rep.sparsity, rep.compression_ratio)


# -- parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    defaults = tr.TrainConfig()
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="gatedcap", description=__doc__, formatter_class=fmt)
    p.add_argument("--config", help="flat key=value file of training settings (flags override it)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp):
        sp.add_argument("--data", help="dataset JSONL from gen-data (default: generate from --data-seed)")
        sp.add_argument("--data-seed", type=int, default=0, help="seed used when --data is absent")

    sp = sub.add_parser("gen-data", help="write the synthetic dataset", formatter_class=fmt)
    sp.add_argument("--seed", type=int, default=0, help="dataset seed")
    sp.add_argument("--n-scenes", type=int, default=2400, help="scenes, split 10:1:1")
    sp.add_argument("--out", required=True, help="output path")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="stage-1 training", formatter_class=fmt)
    sp.add_argument("--method", choices=("dense", "gated", "gradual"), default=defaults.method, help="training method")
    sp.add_argument("--cell", choices=("lstm", "gru"), default=defaults.cell, help="recurrent cell")
    sp.add_argument("--starget", type=float, default=None, help="target sparsity in [0, 1)")
    sp.add_argument("--lambda-s", type=_parse_lambda, default="auto",
                    help="sparsity-loss weight, or 'auto' for max(5, 0.5/(1-starget))")
    sp.add_argument("--gate-init", type=float, default=defaults.gate_init, help="initial gate logit")
    sp.add_argument("--epochs", type=int, default=None,
                    help=f"stage-1 epochs (config default {defaults.epochs_stage1})")
    sp.add_argument("--seed", type=int, default=defaults.seed, help="run seed")
    sp.add_argument("--out", required=True, help="checkpoint path")
    data_args(sp)
    sp.set_defaults(func=cmd_train)
    sp.epilog = (f"optimiser defaults: batch {defaults.batch_size}, Adam lr {defaults.lr_init_stage1} -> "
                 f"{defaults.lr_final} (cosine), gate lr {defaults.gate_lr}, weight decay {defaults.weight_decay}, "
                 f"dropout dense {defaults.dropout_dense_rnn}/{defaults.dropout_dense_attn}, "
                 f"sparse {defaults.dropout_sparse_rnn}/{defaults.dropout_sparse_attn}")

    sp = sub.add_parser("finetune", help="stage-2 fine-tuning with frozen gates", formatter_class=fmt)
    sp.add_argument("--ckpt", required=True, help="input checkpoint")
    sp.add_argument("--epochs", type=int, default=None,
                    help=f"stage-2 epochs (checkpoint config, default {defaults.epochs_stage2}); "
                         f"lr {defaults.lr_init_stage2} -> {defaults.lr_final}")
    sp.add_argument("--out", required=True, help="output path")
    data_args(sp)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("prune-hard", help="one-shot magnitude pruning plus retraining", formatter_class=fmt)
    sp.add_argument("--ckpt", required=True, help="trained dense checkpoint")
    sp.add_argument("--scheme", choices=tuple(SCHEME_ALIASES), default="blind", help="magnitude-pruning variant")
    sp.add_argument("--starget", type=float, required=True, help="target sparsity in [0, 1)")
    sp.add_argument("--retrain-epochs", type=int, default=10, help="retraining epochs")
    sp.add_argument("--out", required=True, help="output path")
    data_args(sp)
    sp.set_defaults(func=cmd_prune_hard)

    sp = sub.add_parser("export", help="fold gates or masks into a sparse model file", formatter_class=fmt)
    sp.add_argument("--ckpt", required=True, help="input checkpoint")
    sp.add_argument("--out", required=True, help="output path")
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("eval", help="beam decode a split and write metrics CSV", formatter_class=fmt)
    sp.add_argument("--model", required=True, help="sparse model file or checkpoint")
    sp.add_argument("--beam", type=int, default=3, help="beam width")
    sp.add_argument("--max-len", type=int, default=20, help="maximum caption words")
    sp.add_argument("--split", choices=("train", "val", "test"), default="test", help="dataset split")
    sp.add_argument("--limit", type=int, default=None, help="only the first N images")
    sp.add_argument("--workers", type=int, default=1, help="decoding processes")
    sp.add_argument("--model-id", default=None, help="row label (default: file stem)")
    sp.add_argument("--captions", default=None, help="also write generated captions, one per line")
    sp.add_argument("--out", required=True, help="output path")
    data_args(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="per-layer sparsity and compression report", formatter_class=fmt)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True, help="JSON report")
    sp.add_argument("--layers-csv", default=None, help="default: <out>.layers.csv")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CliError as e:
        print(f"gatedcap {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as e:
        print(f"gatedcap {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
