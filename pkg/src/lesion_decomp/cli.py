"""Command-line entry point: ``lesion-decomp {gen-data,train,eval,ablate,baseline}``.

stdout carries only the path of the command's result; diagnostics go to
stderr.  Exit codes: 0 success, 1 unexpected error, 2 invalid config,
3 missing input, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import yaml

from .config import RunConfig, load_config
from .errors import ConfigError, DivergedError, LesionDecompError
from .evaluation import save_report
from .phantom import generate_phantom_corpus
from . import pipeline

log = logging.getLogger("lesion_decomp")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED = 0, 1, 2, 3, 4


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(raw)
    return out


def _resolve(args) -> RunConfig:
    overrides = _parse_set(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    return load_config(args.config, overrides)


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _finish(out_dir: Path, cfg: RunConfig, command: str, outputs: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(out_dir / "resolved_config.yaml")
    result = {"command": command, **{k: str(v) for k, v in outputs.items()}}
    path = out_dir / "result.json"
    path.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return path


def cmd_gen_data(cfg: RunConfig, out_dir: Path) -> Path:
    manifest = generate_phantom_corpus(cfg.phantom, cfg.seed, out_dir)
    _finish(out_dir, cfg, "gen-data", {"manifest": manifest.root / "manifest.csv"})
    return manifest.root / "manifest.csv"


def cmd_train(cfg: RunConfig, corpus_dir: Path, out_dir: Path) -> Path:
    sets = pipeline.load_corpus_sets(_require_dir(corpus_dir, "corpus"), cfg.eval.target_size)
    pipeline.train_model(sets, cfg.arch, cfg.train_config(), out_dir)
    ckpt = out_dir / "checkpoint.zip"
    _finish(out_dir, cfg, "train", {"checkpoint": ckpt, "metrics": out_dir / "metrics.jsonl"})
    return ckpt


def cmd_eval(cfg: RunConfig, checkpoint: Path, corpus_dir: Path, out_dir: Path) -> Path:
    if not Path(checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    state = pipeline.load_trained(checkpoint)
    size = state.bundle.config.image_size
    sets = pipeline.load_corpus_sets(_require_dir(corpus_dir, "corpus"), size,
                                     stats=pipeline.stats_for_checkpoint(checkpoint))
    meta = {"checkpoint": Path(checkpoint).name, "checkpoint_step": state.step,
            "corpus_seed": sets.manifest.generator_seed, "ablation": "full"}
    report, maps = pipeline.evaluate_state(state, sets, cfg, metadata=meta)
    path = save_report(report, out_dir, heatmaps=maps if cfg.eval.save_heatmaps else None,
                       ids=sets.test_lesioned.ids)
    _finish(out_dir, cfg, "eval", {"report": path})
    return path


def cmd_ablate(cfg: RunConfig, corpus_dir: Path, out_dir: Path) -> Path:
    sets = pipeline.load_corpus_sets(_require_dir(corpus_dir, "corpus"), cfg.eval.target_size)
    pipeline.run_ablation(sets, cfg, cfg.eval.ablations, out_dir)
    path = out_dir / "ablation_summary.json"
    _finish(out_dir, cfg, "ablate", {"summary": path, "pr_plot": out_dir / "ablation_pr.png"})
    return path


def cmd_baseline(method: str, cfg: RunConfig, corpus_dir: Path, out_dir: Path) -> Path:
    sets = pipeline.load_corpus_sets(_require_dir(corpus_dir, "corpus"), cfg.eval.target_size)
    report, maps, _ = pipeline.run_baseline(sets, cfg, method)
    path = save_report(report, out_dir, heatmaps=maps if cfg.eval.save_heatmaps else None,
                       ids=sets.test_lesioned.ids)
    _finish(out_dir, cfg, "baseline", {"report": path})
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lesion-decomp", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON run config")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help="output directory (overrides out_dir)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted-key override, e.g. train.total_steps=100")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="render a phantom corpus")
    p = sub.add_parser("train", parents=[common], help="train the decomposition model")
    p.add_argument("--corpus", required=True)
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p = sub.add_parser("ablate", parents=[common], help="train and evaluate the ablation grid")
    p.add_argument("--corpus", required=True)
    p = sub.add_parser("baseline", parents=[common], help="CAM / Grad-CAM baseline")
    p.add_argument("--method", required=True, choices=("cam", "gradcam"))
    p.add_argument("--corpus", required=True)
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        out = Path(cfg.out_dir)
        if args.command == "gen-data":
            result = cmd_gen_data(cfg, out)
        elif args.command == "train":
            result = cmd_train(cfg, Path(args.corpus), out)
        elif args.command == "eval":
            result = cmd_eval(cfg, Path(args.checkpoint), Path(args.corpus), out)
        elif args.command == "ablate":
            result = cmd_ablate(cfg, Path(args.corpus), out)
        else:
            result = cmd_baseline(args.method, cfg, Path(args.corpus), out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (LesionDecompError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
