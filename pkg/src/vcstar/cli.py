"""``vcstar`` command line: extract | train | convert | eval | selftest.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Results go to stdout one record per line; logs (including the resolved
configuration) go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import convert as conv
from . import dsp, pipeline, selftest, toy
from . import io as vio

logger = logging.getLogger("vcstar")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags, config or dataset layout (exit code 2)."""


def _load_config(args) -> pipeline.TrainConfig:
    try:
        cfg = pipeline.TrainConfig.load(args.config) if getattr(args, "config", None) else pipeline.TrainConfig()
        return pipeline.with_overrides(cfg, seed=getattr(args, "seed", None),
                                       iterations=getattr(args, "iterations", None))
    except FileNotFoundError as e:
        raise UsageError(f"config not found: {e.filename}") from None
    except (ValueError, TypeError) as e:
        raise UsageError(f"invalid config: {e}") from None


def _log_config(name: str, payload: dict) -> None:
    logger.info("%s config: %s", name, json.dumps(payload, sort_keys=True, default=str))


def _scan(root, cfg: pipeline.TrainConfig | None = None) -> pipeline.DatasetManifest:
    try:
        return pipeline.scan_dataset(root, seed=cfg.seed if cfg else 0)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from None
    except pipeline.DatasetError as e:
        raise UsageError(str(e)) from None


def _store(args, cfg: pipeline.TrainConfig) -> tuple[pipeline.FeatureStore, int]:
    manifest = _scan(args.dataset, cfg)
    return pipeline.extract_and_cache(manifest, cfg.dsp, args.cache)


def cmd_extract(args) -> int:
    cfg = _load_config(args)
    _log_config("extract", {"dataset": args.dataset, "cache": args.cache, "dsp": cfg.dsp.to_dict()})
    store, n = _store(args, cfg)
    print(f"speakers {len(store.speakers)}")
    print(f"utterances {len(store.items)}")
    print(f"extracted {n}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    _log_config("train", cfg.to_dict())
    store, _ = _store(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vio.atomic_write(out / "config.json", (json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n").encode())
    try:
        paths = pipeline.train(cfg, store, out, resume_from=args.checkpoint)
    except ValueError as e:
        raise UsageError(str(e)) from None
    for p in paths:
        print(f"checkpoint {p}")
    return EXIT_OK


def _read_input(path: Path):
    if path.name.endswith(".mcc.fea1"):
        mcc, kind = vio.read_fea1(path)
        if kind != vio.KIND_MCC:
            raise UsageError(f"{path}: not an MCC feature file")
        f0_path = path.with_name(path.name.replace(".mcc.fea1", ".f0.fea1"))
        f0 = vio.read_fea1(f0_path)[0].reshape(-1) if f0_path.exists() else None
        return {"features": mcc, "f0": f0}
    wave, rate = vio.read_wav(path)
    return {"wave": wave, "sample_rate": rate}


def cmd_convert(args) -> int:
    bundle = pipeline.load_bundle(args.checkpoint)
    mode = args.mode.replace("-", "_")
    _log_config("convert", {"checkpoint": args.checkpoint, "input": args.input, "target": args.target,
                            "source": args.source, "mode": mode})
    for name in filter(None, (args.target, args.source)):
        if name not in bundle.speakers:
            raise UsageError(f"unknown attribute {name!r}; known: {', '.join(bundle.speakers)}")
    path = Path(args.input)
    try:
        req = conv.ConversionRequest(target=args.target, source=args.source, mode=mode, **_read_input(path))
    except ValueError as e:
        raise UsageError(str(e)) from None
    result = conv.convert_utterance(req, bundle)
    stem = path.name.split(".")[0]
    prefix = Path(args.out) if args.out else path.with_name(f"{stem}_to_{args.target}")
    for p in conv.write_outputs(result, prefix, bundle.dsp_config.sample_rate):
        print(f"wrote {p}")
    return EXIT_OK


def cmd_eval(args) -> int:
    bundle = pipeline.load_bundle(args.checkpoint)
    _log_config("eval", {"checkpoint": args.checkpoint, "eval_dir": args.eval_dir, "cache": args.cache})
    manifest = _scan(args.eval_dir)
    unknown = [s for s in manifest.speaker_ids if s not in bundle.speakers]
    if unknown:
        raise UsageError(f"speakers not in checkpoint: {', '.join(unknown)}")
    store, _ = pipeline.extract_and_cache(manifest, bundle.dsp_config, args.cache)
    report = conv.eval_conversion(bundle, store.items)
    if args.out:
        conv.write_report(report, args.out)
    base = report["real_baseline"]
    print(f"real classifier_accuracy={_fmt(base['classifier_accuracy'])} "
          f"mean_d_score={_fmt(base['mean_d_score'])} n={base['n_utterances']}")
    for p in report["pairs"]:
        print(f"pair {p['source']}->{p['target']} n={p['n_utterances']} "
              f"classifier_accuracy={_fmt(p['classifier_accuracy'])} mean_d_score={_fmt(p['mean_d_score'])} "
              f"cycle_mcd={_fmt(p['cycle_mcd'])} identity_mcd={_fmt(p['identity_mcd'])}")
    return EXIT_OK


def _fmt(v) -> str:
    return "nan" if v is None else f"{v:.4f}"


def cmd_selftest(args) -> int:
    if args.make_toy:
        root = Path(args.make_toy)
        if root.exists() and any(root.iterdir()):
            raise UsageError(f"{root} is not empty")
        if args.audio:
            speakers = toy.make_toy_audio(root, seed=args.seed or 0)
        else:
            speakers = toy.make_toy_features(root, seed=args.seed or 0)
        print(f"toy dataset {root} speakers {len(speakers)}")
        return EXIT_OK
    failed = 0
    for suite, results in selftest.run_all().items():
        for r in results:
            if args.verbose or not r.passed:
                print(r.line())
        passed = sum(r.passed for r in results)
        failed += len(results) - passed
        print(f"suite {suite} passed {passed}/{len(results)}")
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vcstar", description="Non-parallel many-to-many voice conversion.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="analyze a dataset into the feature cache")
    p.add_argument("dataset")
    p.add_argument("--cache", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train generator, discriminator and classifier")
    p.add_argument("dataset")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--cache")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="convert one WAV or .mcc.fea1 file")
    p.add_argument("input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--source")
    p.add_argument("--mode", choices=["direct", "gain-reference"], default="direct")
    p.add_argument("--out", help="output prefix")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("eval", help="objective report over all source/target pairs")
    p.add_argument("eval_dir")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache")
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftest", help="gradient and loss-identity suites, or write a toy dataset")
    p.add_argument("--make-toy", metavar="DIR")
    p.add_argument("--audio", action="store_true", help="with --make-toy: write WAVs instead of features")
    p.add_argument("--seed", type=int)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_selftest)
    return parser


def _thread_limit() -> int | None:
    raw = os.environ.get("VCSTAR_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"VCSTAR_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("VCSTAR_THREADS must be >= 1")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        limit = _thread_limit()
        with threadpool_limits(limits=limit):
            return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (KeyError, vio.FormatError, pipeline.DatasetError, pipeline.TrainingError,
            dsp.ConfigurationError, ArithmeticError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
