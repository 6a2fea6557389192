"""Command-line front end.

Subcommands: gen-corpus, pretrain, finetune, scan, entropy-scan,
gen-adversarial, eval. Every run logs seed, effective-config hash, vocabulary
hash and (when a model is involved) checkpoint hash to stderr, so runs can be
reproduced from their logs alone.

Option precedence: command-line flags > --config file > built-in defaults.
The config file is flat KEY=VALUE text (dashes and underscores equivalent,
'#' comments allowed). Exit codes: 0 success, 1 operational failure, 2 usage
error. PACKSENSE_THREADS caps BLAS thread pools for the whole process.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("packsense")

_THREAD_LIMITS = None


def _apply_thread_cap() -> None:
    global _THREAD_LIMITS
    raw = os.environ.get("PACKSENSE_THREADS")
    if not raw:
        return
    try:
        n = max(1, int(raw))
    except ValueError:
        log.warning("ignoring non-integer PACKSENSE_THREADS=%r", raw)
        return
    try:
        from threadpoolctl import threadpool_limits
        _THREAD_LIMITS = threadpool_limits(limits=n)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(n))


def _read_config_file(path: str) -> dict[str, str]:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(
                    f"{path}:{lineno}: expected KEY=VALUE, got {line!r}")
            key, value = line.split("=", 1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _apply_config_defaults(parser: argparse.ArgumentParser,
                           values: dict[str, str]) -> None:
    converted = {}
    for action in parser._actions:
        if action.dest in values:
            raw = values[action.dest]
            if isinstance(action, (argparse._StoreTrueAction,
                                   argparse._StoreFalseAction)):
                converted[action.dest] = raw.lower() in ("1", "true", "yes",
                                                         "on")
            elif action.type is not None:
                converted[action.dest] = action.type(raw)
            else:
                converted[action.dest] = raw
    unknown = set(values) - set(converted)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    parser.set_defaults(**converted)


def _effective_config_hash(args: argparse.Namespace) -> str:
    eff = {k: v for k, v in vars(args).items()
           if k not in ("func", "config")}
    blob = json.dumps(eff, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def _log_run(args: argparse.Namespace, **extra) -> None:
    from .normalizer import build_vocabulary
    fields = {
        "command": getattr(args, "command", "?"),
        "seed": getattr(args, "seed", None),
        "config_sha256": _effective_config_hash(args),
        "vocab_sha256": build_vocabulary().sha256,
    }
    fields.update(extra)
    log.info("run %s", " ".join(f"{k}={v}" for k, v in fields.items()
                                if v is not None))


def _emit(obj: dict, args, table_fn=None) -> None:
    if getattr(args, "format", "json") == "table" and table_fn is not None:
        text = table_fn(obj)
    else:
        text = json.dumps(obj, indent=2, sort_keys=True)
    out = getattr(args, "out_file", None)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _file_sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# subcommand implementations


def cmd_gen_corpus(args) -> int:
    from .corpus import generate_corpus, split_check
    counts = {"pretrain": args.pretrain, "finetune": args.finetune,
              "test": args.test}
    schemes = tuple(s.strip() for s in args.schemes.split(",") if s.strip())
    fractions = {"finetune": args.packed_fraction,
                 "test": args.packed_fraction}
    _log_run(args)
    manifest = generate_corpus(
        args.out, counts, seed=args.seed, packed_schemes=schemes,
        packed_fraction=fractions,
        size_range=(args.size_min, args.size_max),
        pe_fraction=args.pe_fraction)
    violations = split_check(manifest)
    packed = sum(1 for e in manifest.entries if e.program_label == "packed")
    summary = {"report_version": 1, "out_dir": str(args.out),
               "seed": args.seed, "counts": counts, "packed": packed,
               "schemes": list(schemes), "violations": violations}
    _emit(summary, args, table_fn=lambda o: "\n".join(
        [f"corpus written to {o['out_dir']}"] +
        [f"  {r}: {n}" for r, n in o["counts"].items()] +
        [f"  packed: {o['packed']}", f"  violations: {len(o['violations'])}"]))
    return 0


def cmd_pretrain(args) -> int:
    from .corpus import read_manifest, pretrain_windows
    from .encoder import (EncoderConfig, Hyper, save_checkpoint,
                          train_pretrain)
    manifest = read_manifest(Path(args.corpus) / "manifest.jsonl")
    windows = pretrain_windows(args.corpus, manifest.role("pretrain"))
    config = EncoderConfig(n_layers=args.layers, n_heads=args.heads,
                           d_model=args.d_model, d_ffn=args.d_ffn,
                           max_seq=args.max_seq)
    hyper = Hyper(epochs=args.epochs, batch_size=args.batch, lr=args.lr,
                  warmup_frac=args.warmup, seed=args.seed)
    _log_run(args, windows=len(windows))
    result = train_pretrain(windows, config, hyper)
    sha = save_checkpoint(args.out, result.params, config,
                          head_trained=False,
                          extra={"history": result.history})
    log.info("checkpoint_sha256=%s", sha)
    _emit({"checkpoint": str(args.out), "checkpoint_sha256": sha,
           "history": result.history}, args)
    return 0


def cmd_finetune(args) -> int:
    from .corpus import read_manifest, labeled_windows
    from .encoder import Hyper, load_checkpoint, save_checkpoint, \
        train_finetune
    params, config, header = load_checkpoint(args.model)
    manifest = read_manifest(Path(args.corpus) / "manifest.jsonl")
    windows = labeled_windows(args.corpus, manifest.role("finetune"),
                              window_units=args.window_units)
    hyper = Hyper(epochs=args.epochs, batch_size=args.batch, lr=args.lr,
                  warmup_frac=args.warmup, seed=args.seed,
                  val_fraction=args.val_fraction)
    _log_run(args, windows=len(windows),
             checkpoint_sha256=_file_sha(args.model))
    result = train_finetune(windows, params, config, hyper)
    sha = save_checkpoint(args.out, result.params, config, head_trained=True,
                          extra={"history": result.history,
                                 "pretrained_from": _file_sha(args.model)})
    log.info("checkpoint_sha256=%s", sha)
    _emit({"checkpoint": str(args.out), "checkpoint_sha256": sha,
           "history": result.history}, args)
    return 0


def _table_report(report: dict) -> str:
    lines = [f"input {report['input']['format']} "
             f"sha256={report['input']['sha256'][:16]}"]
    for r in report["scan"]["regions"]:
        lines.append(f"  {r['section'] or '-':10s} "
                     f"[{r['byte_start']:#08x},{r['byte_end']:#08x}) "
                     f"{r['label']:12s} p={max(r['probs']):.2f}")
    prog = report["scan"]["program"]
    lines.append(f"program: {prog['decision']} "
                 f"(source={prog['decision_source']}, "
                 f"packed_fraction={prog['packed_window_fraction']:.2f})")
    return "\n".join(lines)


def cmd_scan(args) -> int:
    from .binimage import load_path
    from .detect import KnnModel, UntrainedModel, make_report, scan_program
    from .encoder import load_checkpoint
    params, config, header = load_checkpoint(args.model)
    if not header.get("head_trained"):
        raise UntrainedModel(
            "checkpoint head was never fine-tuned; run finetune first")
    knn = KnnModel.load(args.knn) if args.knn else None
    image = load_path(args.input)
    model_sha = _file_sha(args.model)
    _log_run(args, checkpoint_sha256=model_sha)
    verdicts, decision, features, source = scan_program(
        image, params, config, knn=knn, window_units=args.window_units)
    report = make_report(image, verdicts, decision, source, features,
                         model_sha256=model_sha, path=str(args.input),
                         window_units=args.window_units)
    _emit(report, args, table_fn=_table_report)
    return 0


def _table_entropy(report: dict) -> str:
    ent = report["entropy"]
    lines = [f"granularity={ent['granularity']} "
             f"threshold={ent['threshold']}"]
    for m in ent["measurements"]:
        mark = "*" if m["hot"] else " "
        lines.append(f" {mark} {m['label']:10s} "
                     f"[{m['start']:#08x},{m['end']:#08x}) {m['value']:.3f}")
    lines.append(f"verdict: {'packed' if ent['packed'] else 'nonpacked'}")
    return "\n".join(lines)


def cmd_entropy_scan(args) -> int:
    from .binimage import load_path
    from .lowentropy import (DEFAULT_THRESHOLDS, Granularity, entropy_detect,
                             profile_image)
    image = load_path(args.input)
    gran = Granularity(args.granularity)
    threshold = args.threshold if args.threshold is not None \
        else DEFAULT_THRESHOLDS[gran]
    _log_run(args)
    profile = profile_image(image, gran, window_size=args.window_size)
    verdict = entropy_detect(profile, threshold=threshold,
                             section_rule=not args.no_section_rule)
    hot = {(e.label, e.start, e.end) for e, _ in verdict.evidence}
    report = {
        "report_version": 1,
        "input": {"path": str(args.input), "sha256": _file_sha(args.input),
                  "format": image.format.value, "size": len(image.data)},
        "entropy": {
            "granularity": gran.value,
            "threshold": threshold,
            "section_rule": not args.no_section_rule,
            "packed": verdict.packed,
            "measurements": [
                {"label": e.label, "start": e.start, "end": e.end,
                 "value": v, "hot": (e.label, e.start, e.end) in hot}
                for e, v in zip(profile.extents, profile.values)
            ],
        },
    }
    _emit(report, args, table_fn=_table_entropy)
    return 0


def cmd_gen_adversarial(args) -> int:
    import numpy as np
    from .lowentropy import (Scheme, TransformSpec, invert_transform,
                             random_spec, shannon_entropy, transform)
    data = Path(args.input).read_bytes()
    if args.invert:
        meta = json.loads(Path(args.meta).read_text(encoding="utf-8"))
        _log_run(args)
        restored = invert_transform(data, meta["inverse"])
        Path(args.out).write_bytes(restored)
        expect = meta.get("source_sha256")
        ok = expect is None or hashlib.sha256(restored).hexdigest() == expect
        _emit({"out": str(args.out), "restored_sha256":
               hashlib.sha256(restored).hexdigest(),
               "matches_source": ok}, args)
        return 0 if ok else 1
    rng = np.random.default_rng(args.seed)
    spec = random_spec(Scheme(args.scheme), rng, block_size=args.block_size,
                       key_len=args.key_len)
    _log_run(args)
    out, inverse = transform(data, spec)
    Path(args.out).write_bytes(out)
    meta = {"scheme": spec.scheme.value, "spec": spec.to_json(),
            "inverse": inverse,
            "source_sha256": hashlib.sha256(data).hexdigest(),
            "entropy_before": shannon_entropy(data),
            "entropy_after": shannon_entropy(out)}
    meta_path = args.meta_out or (str(args.out) + ".meta.json")
    Path(meta_path).write_text(json.dumps(meta, indent=2, sort_keys=True),
                               encoding="utf-8")
    _emit({"out": str(args.out), "meta": meta_path,
           "entropy_before": meta["entropy_before"],
           "entropy_after": meta["entropy_after"]}, args)
    return 0


def cmd_eval(args) -> int:
    from .corpus import read_manifest
    from .encoder import load_checkpoint
    from .detect import UntrainedModel
    from .pipeline import eval_corpus, region_f1
    params, config, header = load_checkpoint(args.model)
    if not header.get("head_trained"):
        raise UntrainedModel(
            "checkpoint head was never fine-tuned; run finetune first")
    manifest = read_manifest(Path(args.corpus) / "manifest.jsonl")
    model_sha = _file_sha(args.model)
    _log_run(args, checkpoint_sha256=model_sha)
    metrics, knn, scans = eval_corpus(args.corpus, manifest, params, config,
                                      window_units=args.window_units,
                                      batch_size=args.batch)
    if args.knn_out:
        knn.save(args.knn_out)
        log.info("knn model saved to %s", args.knn_out)
    region = region_f1(scans, args.corpus)
    out = {"report_version": 1, "corpus": str(args.corpus),
           "model_sha256": model_sha, "program": metrics.to_json(),
           "region": region}
    _emit(out, args, table_fn=lambda o: "\n".join([
        f"programs: n={o['program']['n']} dcr={o['program']['dcr']:.3f} "
        f"precision={o['program']['precision']:.3f} "
        f"recall={o['program']['recall']:.3f} f1={o['program']['f1']:.3f}",
        f"regions: macro_f1={o['region']['macro_f1']:.3f} "
        f"accuracy={o['region']['accuracy']:.3f}"]))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> tuple[argparse.ArgumentParser,
                            dict[str, argparse.ArgumentParser]]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat KEY=VALUE config file")
    common.add_argument("--format", choices=["json", "table"],
                        default="json", help="output format")
    common.add_argument("--out-file", default=None,
                        help="write the report here instead of stdout")
    common.add_argument("--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="packsense",
        description="packing-aware executable analysis toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    registry = {}

    p = sub.add_parser("gen-corpus", parents=[common],
                       help="generate a labeled synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--pretrain", type=int, default=0)
    p.add_argument("--finetune", type=int, default=0)
    p.add_argument("--test", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--schemes", default=",".join(
        ("random", "mono_sub", "transposition", "poly_sub", "encoding",
         "byte_padding")))
    p.add_argument("--packed-fraction", type=float, default=0.5)
    p.add_argument("--pe-fraction", type=float, default=0.2)
    p.add_argument("--size-min", type=int, default=1536)
    p.add_argument("--size-max", type=int, default=3072)
    p.set_defaults(func=cmd_gen_corpus)
    registry["gen-corpus"] = p

    p = sub.add_parser("pretrain", parents=[common],
                       help="masked-token pretraining")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--warmup", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--d-ffn", type=int, default=512)
    p.add_argument("--max-seq", type=int, default=512)
    p.set_defaults(func=cmd_pretrain)
    registry["pretrain"] = p

    p = sub.add_parser("finetune", parents=[common],
                       help="supervised window-classifier fine-tuning")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True, help="pretrained checkpoint")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--warmup", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window-units", type=int, default=100)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.set_defaults(func=cmd_finetune)
    registry["finetune"] = p

    p = sub.add_parser("scan", parents=[common],
                       help="scan one binary for packed regions")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--knn", default=None,
                   help="program-level KNN model (from eval --knn-out)")
    p.add_argument("--window-units", type=int, default=100)
    p.set_defaults(func=cmd_scan)
    registry["scan"] = p

    p = sub.add_parser("entropy-scan", parents=[common],
                       help="entropy-baseline detector")
    p.add_argument("--input", required=True)
    p.add_argument("--granularity",
                   choices=["file", "section", "window"], default="section")
    p.add_argument("--threshold", type=float, default=None,
                   help="defaults: file 7.0, section 6.5, window 7.4")
    p.add_argument("--window-size", type=int, default=2048)
    p.add_argument("--no-section-rule", action="store_true",
                   help="flag on any hot section instead of the >20%% rule")
    p.set_defaults(func=cmd_entropy_scan)
    registry["entropy-scan"] = p

    p = sub.add_parser("gen-adversarial", parents=[common],
                       help="apply or invert a low-entropy transform")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scheme", choices=["byte_padding", "encoding",
                                        "mono_sub", "transposition",
                                        "poly_sub"],
                   default="mono_sub")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--block-size", type=int, default=256)
    p.add_argument("--key-len", type=int, default=16)
    p.add_argument("--meta-out", default=None)
    p.add_argument("--invert", action="store_true")
    p.add_argument("--meta", default=None,
                   help="metadata file (required with --invert)")
    p.set_defaults(func=cmd_gen_adversarial)
    registry["gen-adversarial"] = p

    p = sub.add_parser("eval", parents=[common],
                       help="program-level evaluation over a corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--knn-out", default=None)
    p.add_argument("--window-units", type=int, default=100)
    p.add_argument("--batch", type=int, default=16)
    p.set_defaults(func=cmd_eval)
    registry["eval"] = p

    return parser, registry


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_thread_cap()
    parser, registry = build_parser()

    # first pass only locates --config and the subcommand; config values
    # become that subparser's defaults so explicit flags still win
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    sub_name = next((a for a in argv if not a.startswith("-")), None)
    if known.config and sub_name in registry:
        try:
            _apply_config_defaults(registry[sub_name],
                                   _read_config_file(known.config))
        except (OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1

    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "invert", False) and not args.meta:
        parser.error("--invert requires --meta")
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except BrokenPipeError:
        return 1
    except Exception as exc:  # operational failures map to exit 1
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
