"""Command-line surface: search, sweep, derive, bench, analyze, retrain.

Exit codes: 0 success, 2 validation error, 3 runtime divergence.
Every experiment directory gets the merged config, a run_meta.json with
the config hash, and machine-readable artifacts.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, ExperimentConfig, load_experiment_config, load_dataset_from
from .search import DivergenceError, load_checkpoint, run_search
from .search_space import Genotype, GenotypeError, all_skip_genotype, nb201_cell

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None, help="override run seed")
    p.add_argument("--device", type=str, default=None, choices=["cpu", "cuda"])
    p.add_argument("--overwrite", action="store_true",
                   help="allow writing into a non-empty output directory")


def _search_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mask-ratio", type=float, default=None)
    p.add_argument("--patch-size", type=int, default=None)
    p.add_argument("--no-hd", action="store_true",
                   help="use the flat (non-hierarchical) decoder")
    p.add_argument("--order", type=str, default=None, choices=["first", "second"])


def _overrides_from(args: argparse.Namespace) -> dict:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "device", None) is not None:
        overrides["device"] = args.device
    if getattr(args, "mask_ratio", None) is not None:
        overrides["search.mask_ratio"] = args.mask_ratio
    if getattr(args, "patch_size", None) is not None:
        overrides["search.patch_size"] = args.patch_size
    if getattr(args, "no_hd", False):
        overrides["decoder.use_hierarchical"] = False
    if getattr(args, "order", None) is not None:
        overrides["search.order"] = args.order
    return overrides


def _prepare_out(path: str, overwrite: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise ConfigError(
            [f"output directory {out} is not empty; pass --overwrite to reuse it"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_meta(out: Path, cfg: ExperimentConfig, extra: dict | None = None) -> None:
    cfg.save(out / "config.json")
    meta = {"config_hash": cfg.hash, "version": __version__,
            "use_hierarchical": cfg.decoder.use_hierarchical}
    meta.update(extra or {})
    (out / "run_meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def cmd_search(args: argparse.Namespace) -> int:
    cfg = load_experiment_config(args.config, _overrides_from(args))
    out = _prepare_out(args.out, args.overwrite)
    dataset = load_dataset_from(cfg).without_labels()  # the search is label-free
    _write_meta(out, cfg)
    result = run_search(cfg.search, dataset,
                        supernet_cfg=cfg.supernet, decoder_cfg=cfg.decoder,
                        out_dir=out, config_hash=cfg.hash, device=cfg.device)
    from .collapse import count_skip_connections, make_report, save_report

    report = make_report(result.genotype)
    save_report(report, out / "report")
    print(f"search done: genotype at {out / 'genotype.json'}, "
          f"skip counts {count_skip_connections(result.genotype)}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_experiment_config(args.config, _overrides_from(args))
    out = _prepare_out(args.out, args.overwrite)
    ratios = [float(x) for x in args.ratios.split(",")] if args.ratios \
        else cfg.sweep["mask_ratios"]
    patches = [int(x) for x in args.patches.split(",")] if args.patches \
        else cfg.sweep["patch_sizes"]
    do_retrain = cfg.sweep["retrain"] and not args.no_retrain
    if not ratios or not patches:
        raise ConfigError(["sweep grid is empty"])
    _write_meta(out, cfg, {"grid": {"mask_ratios": ratios, "patch_sizes": patches}})

    from .collapse import count_skip_connections
    from .retrain import build_discrete_network, train_from_scratch

    rows = []
    for ratio in ratios:
        for patch in patches:
            cell_dir = out / f"cell_r{ratio}_p{patch}"
            try:
                cell_cfg = load_experiment_config(args.config, {
                    **_overrides_from(args),
                    "search.mask_ratio": ratio,
                    "search.patch_size": patch,
                })
                dataset = load_dataset_from(cell_cfg)
                result = run_search(cell_cfg.search, dataset.without_labels(),
                                    supernet_cfg=cell_cfg.supernet,
                                    decoder_cfg=cell_cfg.decoder,
                                    out_dir=cell_dir, config_hash=cell_cfg.hash,
                                    device=cell_cfg.device)
                row = {"mask_ratio": ratio, "patch_size": patch,
                       "skip_counts": count_skip_connections(result.genotype),
                       "status": "ok"}
                if do_retrain:
                    net = build_discrete_network(
                        result.genotype, cell_cfg.retrain,
                        specs=cell_cfg.supernet.specs(),
                        num_classes=dataset.num_classes or 10)
                    trained = train_from_scratch(net, dataset, cell_cfg.retrain)
                    row["retrain_accuracy"] = trained.best_accuracy
            except Exception as exc:  # isolate per-cell failures
                row = {"mask_ratio": ratio, "patch_size": patch,
                       "status": f"failed: {exc}"}
            rows.append(row)
            print(json.dumps(row, sort_keys=True))
    (out / "sweep_table.json").write_text(json.dumps(rows, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_derive(args: argparse.Namespace) -> int:
    cfg = load_experiment_config(args.config, _overrides_from(args))
    state = load_checkpoint(args.checkpoint, image_hw=(cfg.data["image_size"],) * 2,
                            supernet_cfg=cfg.supernet, decoder_cfg=cfg.decoder)
    genotype = state.genotype()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.exists() and not args.overwrite:
        raise ConfigError([f"{out} exists; pass --overwrite to replace it"])
    genotype.save(out)
    print(f"derived genotype written to {out}")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = load_experiment_config(args.config, _overrides_from(args))
    from .analysis import build_micro_bench, save_bench
    from .retrain import RetrainConfig

    dataset = load_dataset_from(cfg)
    a = cfg.analysis
    space = nb201_cell(op_set=tuple(["none"] + list(a["op_subset"])))
    train_cfg = RetrainConfig(layers=a["bench_layers"], init_channels=a["bench_channels"],
                              epochs=a["bench_epochs"], seed=cfg.seed)
    sample_n = args.sample_n or a["sample_n"]
    entries, completed = build_micro_bench(
        space, sample_n, dataset, train_cfg=train_cfg, seed=cfg.seed,
        wall_time_limit_s=args.time_limit)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_bench(entries, out, completed=completed)
    status = "complete" if completed else "PARTIAL (budget exhausted)"
    print(f"bench {status}: {len(entries)} entries at {out}")
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    cfg = load_experiment_config(args.config, _overrides_from(args))
    from .analysis import correlation_report, load_bench, save_report
    from .masking import MaskSpec

    entries = load_bench(args.bench)
    state = load_checkpoint(args.checkpoint, image_hw=(cfg.data["image_size"],) * 2,
                            supernet_cfg=cfg.supernet, decoder_cfg=cfg.decoder)
    dataset = load_dataset_from(cfg).without_labels()
    mask_spec = MaskSpec(image_h=cfg.data["image_size"], image_w=cfg.data["image_size"],
                         patch_size=cfg.search.patch_size,
                         mask_ratio=cfg.search.mask_ratio)
    report = correlation_report(
        entries, state.supernet, state.decoder, dataset, mask_spec,
        mask_seed=cfg.analysis["mask_seed"],
        n_permutations=cfg.analysis["n_permutations"], seed=cfg.seed)
    out = _prepare_out(args.out, args.overwrite)
    save_report(report, out)
    print(f"tau={report.tau:.4f} over {report.n_models} models, p={report.p_value:.4f}")
    return EXIT_OK


def cmd_retrain(args: argparse.Namespace) -> int:
    cfg = load_experiment_config(args.config, _overrides_from(args))
    from .retrain import build_discrete_network, network_complexity, train_from_scratch

    genotype_path = Path(args.genotype)
    if args.all_skip:
        genotype = all_skip_genotype(cfg.supernet.specs())
    else:
        if not genotype_path.exists():
            raise ConfigError([f"genotype file {genotype_path} does not exist"])
        genotype = Genotype.load(genotype_path)
    dataset = load_dataset_from(cfg)
    if dataset.labels is None:
        raise ConfigError(["retraining needs a labeled dataset"])
    out = _prepare_out(args.out, args.overwrite)
    _write_meta(out, cfg)
    net = build_discrete_network(genotype, cfg.retrain,
                                 specs=cfg.supernet.specs(),
                                 num_classes=dataset.num_classes)
    result = train_from_scratch(net, dataset, cfg.retrain)
    doc = {
        "genotype_hash": hashlib.sha256(genotype.to_json_bytes()).hexdigest()[:16],
        "accuracy": result.final_accuracy,
        "best_accuracy": result.best_accuracy,
        "params": network_complexity(net, dataset.image_hw),
        "flags": {"augment": cfg.retrain.augment, "cutout": cfg.retrain.cutout,
                  "drop_path": cfg.retrain.drop_path,
                  "auxiliary": cfg.retrain.auxiliary},
        "curve": result.curve,
    }
    (out / "retrain_result.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    print(f"retrained accuracy {result.final_accuracy:.4f} "
          f"(best {result.best_accuracy:.4f}); results at {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mimnas",
        description="Label-free architecture search with masked image reconstruction")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run the bilevel search")
    _common_flags(p)
    _search_flags(p)
    p.add_argument("--out", type=str, required=True, help="experiment directory")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("sweep", help="grid of searches over mask ratio x patch size")
    _common_flags(p)
    _search_flags(p)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--ratios", type=str, default=None, help="comma-separated mask ratios")
    p.add_argument("--patches", type=str, default=None, help="comma-separated patch sizes")
    p.add_argument("--no-retrain", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("derive", help="derive a genotype from a checkpoint")
    _common_flags(p)
    p.add_argument("--checkpoint", type=str, required=True,
                   help="checkpoint path prefix (without .pt/.json)")
    p.add_argument("--out", type=str, required=True, help="genotype JSON path")
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("bench", help="build the locally-trained micro-benchmark")
    _common_flags(p)
    p.add_argument("--out", type=str, required=True, help="bench JSONL path")
    p.add_argument("--sample-n", type=int, default=None)
    p.add_argument("--time-limit", type=float, default=None,
                   help="wall-time budget in seconds; partial results are flagged")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("analyze", help="rank correlation of reconstruction vs accuracy")
    _common_flags(p)
    p.add_argument("--bench", type=str, required=True, help="bench JSONL from `bench`")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("retrain", help="train a derived genotype from scratch")
    _common_flags(p)
    p.add_argument("--genotype", type=str, default="",
                   help="genotype JSON (from search or derive)")
    p.add_argument("--all-skip", action="store_true",
                   help="use the all-skip baseline genotype instead of a file")
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=cmd_retrain)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except GenotypeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DivergenceError as exc:
        print(f"error: search diverged: {exc} {exc.diagnostics}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except Exception as exc:
        from .retrain import RetrainError

        if isinstance(exc, RetrainError):
            print(f"error: training diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGENCE
        raise


if __name__ == "__main__":
    sys.exit(main())
