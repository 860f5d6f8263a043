"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad config, bad arguments),
2 runtime failure (divergence, I/O, malformed data files).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .adapt import ConfigError, lr_sweep, pretrain_source, run_adaptation
from .data import DataFormatError, convert_usps, save_rudx
from .evaluation import evaluate, export_embeddings, write_metrics
from .manifest import ExperimentManifest, load_domains, model_specs, parse_manifest
from .nets import DivergenceError, build_models, load_checkpoint, save_checkpoint

log = logging.getLogger("ruda")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ruda", description="Robust unsupervised domain adaptation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="experiment manifest (TOML); defaults apply when omitted")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=int, help="override config.seed")
        return sp

    with_config(sub.add_parser("synth", help="write the synthetic source/target pair as RUDX files"))
    with_config(sub.add_parser("pretrain", help="train the source encoder and classifier"))

    sp = with_config(sub.add_parser("adapt", help="run adaptation"))
    sp.add_argument("--pretrained", help="checkpoint from `pretrain`; pretrains first when omitted")
    sp.add_argument("--mode", choices=["balanced", "imbalanced", "partial"])
    sp.add_argument("--mix-ratio", type=float)
    sp.add_argument("--ablation", choices=["full", "no_dis", "adda_only", "adda_mix"])
    sp.add_argument("--max-iters", type=int)
    sp.add_argument("--gamma-dec", type=float)

    sp = with_config(sub.add_parser("eval", help="evaluate a checkpoint on the target domain"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--which", choices=["source", "target"], default="target",
                    help="encoder used for the target instances")

    sp = with_config(sub.add_parser("sweep", help="sweep the clustering learning rate"))
    sp.add_argument("--gamma-dec", type=_floats, required=True, help="comma-separated grid")
    sp.add_argument("--pretrained")
    sp.add_argument("--parallel", type=int, default=1, help="worker processes")

    sp = with_config(sub.add_parser("export-embeddings", help="write features as CSV"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--csv", help="output file (default: <out>/embeddings.csv)")

    sp = sub.add_parser("convert-usps", help="rescale USPS to 28x28 and store as IDX")
    sp.add_argument("--input", required=True, help="libsvm text (optionally .bz2) or HDF5 file")
    sp.add_argument("--images", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--split", default="train")
    return p


def _manifest(args) -> ExperimentManifest:
    m = parse_manifest(args.config) if args.config else ExperimentManifest()
    changes = {}
    for flag, key in (("seed", "seed"), ("mode", "mode"), ("mix_ratio", "mix_ratio"),
                      ("ablation", "ablation"), ("max_iters", "max_iters")):
        value = getattr(args, flag, None)
        if value is not None:
            changes[key] = value
    if isinstance(getattr(args, "gamma_dec", None), float):
        changes["gamma_dec"] = args.gamma_dec
    if changes:
        m = m.with_config(**changes)
    if args.out:
        m.output_dir = args.out
    return m


def _outdir(m: ExperimentManifest) -> Path:
    out = Path(m.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    m.write(out / "manifest.toml")
    return out


def _pretrained(m: ExperimentManifest, source, target, path=None):
    if path:
        bundle, _, _ = load_checkpoint(path)
        return bundle
    enc, cls, disc = model_specs(m.model, source.shape, source.label_domain_size)
    bundle = build_models(enc, cls, disc, m.model.seed)
    return pretrain_source(bundle, source, m.config.pretrain_epochs, m.config.pretrain_lr,
                           m.config.seed, m.config.batch_size)


def _print_json(obj):
    print(json.dumps(obj), flush=True)


def cmd_synth(args):
    m = _manifest(args)
    if m.data.kind != "synthetic":
        raise ConfigError("data.kind", "synth needs synthetic data")
    source, target = load_domains(m.data)
    out = _outdir(m)
    save_rudx(source, out / "source.rudx")
    save_rudx(target, out / "target.rudx")
    _print_json({"source": len(source), "target": len(target), "dir": str(out)})


def cmd_pretrain(args):
    m = _manifest(args)
    source, target = load_domains(m.data)
    bundle = _pretrained(m, source, target)
    out = _outdir(m)
    save_checkpoint(out / "pretrained.pt", bundle)
    src_report = evaluate(bundle, source, which="source")
    tgt_report = evaluate(bundle, target)
    write_metrics(out / "source_only.json", tgt_report, {"source_train_acc": src_report.overall_acc})
    _print_json({"source_train_acc": src_report.overall_acc, "source_only_target_acc": tgt_report.overall_acc})


def cmd_adapt(args):
    m = _manifest(args)
    source, target = load_domains(m.data)
    bundle = _pretrained(m, source, target, args.pretrained)
    out = _outdir(m)
    _, report = run_adaptation(bundle, target, source, m.config, out, on_eval=_print_json)
    if report is not None:
        _print_json({"final": report.to_dict()})


def cmd_eval(args):
    m = _manifest(args)
    _, target = load_domains(m.data)
    bundle, _, it = load_checkpoint(args.checkpoint)
    report = evaluate(bundle, target, it, which=args.which)
    if args.out:
        out = _outdir(m)
        write_metrics(out / "eval.json", report)
    _print_json(report.to_dict())


def cmd_sweep(args):
    m = _manifest(args)
    source, target = load_domains(m.data)
    bundle = _pretrained(m, source, target, args.pretrained)
    out = _outdir(m)
    rows = lr_sweep(bundle, target, source, m.config, args.gamma_dec, out / "sweep.csv",
                    output_dir=out, workers=args.parallel)
    for row in rows:
        _print_json(row)


def cmd_export(args):
    m = _manifest(args)
    source, target = load_domains(m.data)
    bundle, centroids, _ = load_checkpoint(args.checkpoint)
    path = Path(args.csv) if args.csv else _outdir(m) / "embeddings.csv"
    n = export_embeddings(bundle, [("source", source), ("target", target)], path, centroids)
    _print_json({"rows": n, "path": str(path)})


def cmd_convert_usps(args):
    n = convert_usps(args.input, args.images, args.labels, args.split)
    _print_json({"converted": n})


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "export-embeddings": cmd_export,
    "convert-usps": cmd_convert_usps,
}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (DivergenceError, DataFormatError, OSError) as exc:
        print(f"ruda {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError) as exc:
        print(f"ruda {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
