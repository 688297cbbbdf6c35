"""Command-line entry point: ``rxnpretrain <command> [options]``.

Exit codes: 0 success, 1 user/config/data error, 2 internal invariant violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__
from . import config as C
from .reactions import ReactionError, filter_and_truncate, load_property_dataset, make_fold_plan, read_reactions
from .smiles import SmilesError, canonicalize, randomize_smiles, tokenize

log = logging.getLogger("rxnpretrain")


class UserError(Exception):
    pass


def _manifest(cfg: C.RunConfig, command: str, extra: dict | None = None) -> dict:
    return {"command": command, "config_hash": cfg.hash, "seed": cfg.seed, "version": __version__, **(extra or {})}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_config(args) -> C.RunConfig:
    cfg = C.load(args.config, args.seed) if args.config else C.resolve({}, args.seed)
    if getattr(args, "folds", None) is not None:
        if args.folds < 3:
            raise C.ConfigError("--folds must be at least 3")
        cfg.stats["n_folds"] = args.folds
    return cfg


def _require(path, what: str) -> Path:
    if not path:
        raise UserError(f"{what} path not configured")
    p = Path(path)
    if not p.exists():
        raise UserError(f"{what} not found: {p}")
    return p


def _datasets(cfg: C.RunConfig):
    if not cfg.data["datasets"]:
        raise UserError("no property datasets configured (data.datasets)")
    out = []
    for d in cfg.data["datasets"]:
        ds = load_property_dataset(_require(d["path"], "dataset"), d["name"], d["task_type"])
        out.append((ds, d["metric"]))
    return out


def _pretrained(cfg: C.RunConfig, required: bool):
    from .training import load_model

    ckpt = cfg.data.get("checkpoint")
    if not ckpt:
        if required:
            raise UserError("comparison requires a pre-trained arm: set data.checkpoint")
        return None, cfg.model
    params, model_cfg, _ = load_model(_require(ckpt, "checkpoint"))
    return params, model_cfg


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args) -> int:
    from .training import pretrain

    cfg = _load_config(args)
    if args.dry_run:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return 0
    corpus_path = _require(cfg.data["corpus"], "reaction corpus")
    out = Path(args.out_dir)
    reactions, rejected = read_reactions(corpus_path)
    kept, dropped = filter_and_truncate(reactions, cfg.data["max_smiles_len"])
    reasons: dict[str, int] = {}
    for _, reason in rejected:
        reasons[reason] = reasons.get(reason, 0) + 1
    total = len(reactions) + len(rejected)
    stats = {
        "lines": total,
        "parsed": len(reactions),
        "rejected": reasons,
        "kept": len(kept),
        "dropped_length": len(dropped),
        "kept_fraction_of_parsed": len(kept) / len(reactions) if reactions else 0.0,
        "max_smiles_len": cfg.data["max_smiles_len"],
    }
    _write_json(out / "drop_stats.json", stats)
    if not kept:
        raise UserError("no reactions left after filtering")
    valid = None
    if cfg.data["valid_corpus"]:
        valid, _ = read_reactions(_require(cfg.data["valid_corpus"], "validation corpus"))
        valid, _ = filter_and_truncate(valid, cfg.data["max_smiles_len"])
    res = pretrain(kept, cfg.model, cfg.pretrain, valid, out_dir=out)
    from .training import save_training_state

    final = res.best_params if res.best_params is not None else res.params
    save_training_state(out / "model.rpt", final, res.optimizer, res.step, cfg.model, cfg.pretrain,
                        _manifest(cfg, "pretrain"))
    _write_json(out / "manifest.json", _manifest(cfg, "pretrain", {"steps": res.step, "drop_stats": stats}))
    print(f"pretrained {res.step} steps on {len(kept)} reactions -> {out / 'model.rpt'}")
    return 0


def cmd_finetune(args) -> int:
    from .evaluation import default_metric
    from .training import finetune, lr_search, tuning_objective

    cfg = _load_config(args)
    if args.dry_run:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return 0
    init, model_cfg = _pretrained(cfg, required=False)
    ds, metric = _datasets(cfg)[0]
    metric = metric or default_metric(ds)
    strat = 0 if ds.task_type == "classification" and len(ds.tasks) == 1 else None
    plan = make_fold_plan(ds.records, cfg.stats["n_folds"], stratify=strat, seed=cfg.stats["fold_seed"])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "folds.json").write_text(plan.to_json())
    lr = cfg.finetune.lr
    if cfg.stats["lr_search"]:
        objective = tuning_objective(ds, plan, args.rotation, model_cfg, cfg.finetune, init, metric)
        lr, trials = lr_search(objective, cfg.finetune.search_runs, (cfg.finetune.search_low, cfg.finetune.search_high),
                               seed=cfg.finetune.seed)
        _write_json(out / "lr_search.json", {"best": lr, "trials": trials})
    res = finetune(ds, plan, args.rotation, model_cfg, cfg.finetune, init, lr, out_dir=out)
    _write_json(out / "manifest.json", _manifest(cfg, "finetune", {"rotation": args.rotation, "lr": lr,
                                                                   "best_step": res.log.best_step,
                                                                   "best_value": res.log.best_value}))
    print(f"best validation {res.extra['metric']} {res.log.best_value:.4f} at step {res.log.best_step}")
    return 0


def cmd_crossval(args) -> int:
    from .evaluation import run_crossval

    cfg = _load_config(args)
    if args.dry_run:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return 0
    init, model_cfg = _pretrained(cfg, required=False)
    arm = "pretrained" if init is not None else "random"
    out = Path(args.out_dir)
    summary = []
    for ds, metric in _datasets(cfg):
        res = run_crossval(ds, model_cfg, cfg.finetune, {arm: init}, cfg.stats["n_folds"], metric,
                           cfg.stats["fold_seed"], cfg.stats["lr_search"])
        folds = [dataclasses.asdict(a) for a in res.arms[arm]]
        summary.append({"dataset": ds.name, "metric": res.metric, "arm": arm, "folds": folds})
    _write_json(out / "crossval.json", {**_manifest(cfg, "crossval"), "results": summary})
    for s in summary:
        vals = [f["test_metric"] for f in s["folds"]]
        print(f"{s['dataset']}: {s['metric']} mean {sum(vals) / len(vals):.4f} over {len(vals)} folds")
    return 0


def cmd_compare(args) -> int:
    from .evaluation import run_crossval_comparison, write_report

    cfg = _load_config(args)
    if args.dry_run:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return 0
    init, model_cfg = _pretrained(cfg, required=True)
    pairs = _datasets(cfg)
    report, results = run_crossval_comparison(
        [d for d, _ in pairs], init, model_cfg, cfg.finetune, cfg.stats["alpha"], cfg.stats["n_folds"],
        cfg.stats["alternative"], cfg.stats["fold_seed"], [m for _, m in pairs], cfg.stats["lr_search"],
    )
    report.meta.update(_manifest(cfg, "compare"))
    write_report(report, results, args.out_dir)
    _write_json(Path(args.out_dir) / "manifest.json", _manifest(cfg, "compare"))
    sys.stdout.write(report.to_text())
    return 0


def cmd_smiles(args) -> int:
    import random

    rng = random.Random(args.seed if args.seed is not None else 0)
    for line in sys.stdin:
        s = line.strip()
        try:
            if args.action == "canonicalize":
                out = canonicalize(s)
            elif args.action == "randomize":
                out = randomize_smiles(s, rng)
            else:
                out = " ".join(str(t) for t in tokenize(s))
        except SmilesError as exc:
            out = f"ERROR {exc.position} {exc.reason}"
        sys.stdout.write(out + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rxnpretrain", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def run_cmd(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="root seed (overrides the config)")
        p.add_argument("--folds", type=int, help="number of cross-validation folds")
        p.add_argument("--out-dir", default="runs/" + name)
        p.add_argument("--dry-run", action="store_true", help="print the resolved configuration and exit")
        p.set_defaults(func=fn)
        return p

    run_cmd("pretrain", cmd_pretrain, "reaction-prediction pre-training")
    run_cmd("finetune", cmd_finetune, "fine-tune on one cross-validation rotation").add_argument(
        "--rotation", type=int, default=0)
    run_cmd("crossval", cmd_crossval, "cross-validate one arm on every dataset")
    run_cmd("compare", cmd_compare, "pre-trained vs random init with paired statistics")

    sp = sub.add_parser("smiles", help="line-oriented SMILES utilities (stdin -> stdout)")
    sp.add_argument("action", choices=["canonicalize", "randomize", "tokenize"])
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_smiles)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UserError, C.ConfigError, ReactionError, ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
