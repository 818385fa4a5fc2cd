"""Command-line entry point: ``vital <command> ...``.

Exit codes: 0 success, 2 usage/configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from vital import dataset as ds
from vital.checkpoint import load_checkpoint, save_checkpoint
from vital.config import RunConfig, load_config, set_dotted, validate_against_schema
from vital.errors import CheckpointFormatError, ConfigError, NumericalError

log = logging.getLogger("vital")


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load_run_config(args) -> RunConfig:
    d = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}", field="config")
        d = load_config(path).to_dict()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}", field="--set")
        key, value = item.split("=", 1)
        set_dotted(d, key, _parse_value(value))
    for flag, key in (("iterations", "phase1.iterations"), ("epochs", "phase2.epochs"), ("mode", "phase2.mode")):
        value = getattr(args, flag, None)
        if value is not None:
            set_dotted(d, key, value)
    return RunConfig.from_dict(d)


def _load_split(data_dir, cfg: RunConfig):
    records, report = ds.load_caption_dataset(data_dir, {"canvas": cfg.data.canvas})
    if not records:
        raise ConfigError(f"no loadable records ({len(report.skipped)} skipped)", field="data")
    for path, reason in report.skipped:
        log.warning("skipped %s: %s", path, reason)
    return ds.split(records, cfg.data.test_fraction, cfg.seeds.data)


def _load_ckpt(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}", field="checkpoint")
    return load_checkpoint(path)


# -----------------------------------------------------------------------------

def cmd_gen_data(args):
    spec_path = Path(args.spec)
    if not spec_path.is_file():
        raise ConfigError(f"spec file not found: {spec_path}", field="spec")
    try:
        raw = json.loads(spec_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", field="spec") from exc
    validate_against_schema(raw, "toy_spec")
    spec = ds.ToySpec.from_dict(raw)
    records = ds.generate_toy_dataset(spec)
    out = ds.save_toy_dataset(records, spec, args.out)
    return [out / "meta.json"], {"records": len(records)}


def cmd_train_gan(args):
    from vital.train import train_phase1

    cfg = _load_run_config(args)
    train, _ = _load_split(args.data, cfg)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path.write_text("")
    dump = out.with_suffix(".nan.json")
    try:
        res = train_phase1(train, cfg, log_path=log_path, checkpoint_dir=out.parent, dump_path=dump)
    except NumericalError as exc:
        raise NumericalError(f"{exc}; diagnostics written to {dump}") from exc
    save_checkpoint(res.checkpoint, out)
    return [out, log_path], {"iterations": cfg.phase1.iterations}


def cmd_synth(args):
    from vital.stackgman import synthesize
    from vital.train import load_gan

    try:
        ckpt = _load_ckpt(args.ckpt)
        gan, vocab, _ = load_gan(ckpt)
    except (CheckpointFormatError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint: {exc}", field="ckpt") from exc
    images = synthesize(args.caption, args.k, gan, vocab, seed=args.seed).numpy()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, img in enumerate(images):
        p = out / f"synth_{k:02d}.png"
        Image.fromarray(ds.to_uint8(img.transpose(1, 2, 0)), mode="RGB").save(p)
        paths.append(p)
    manifest = {"caption": args.caption, "K": args.k, "seed": args.seed,
                "seeds": {"generator": args.seed, "draw_order": "conditioning eps, then z_1..z_K"},
                "checkpoint_iteration": ckpt.meta.get("iteration"), "files": [p.name for p in paths]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return paths + [out / "manifest.json"], {"K": args.k}


def cmd_train_clf(args):
    from vital.train import train_phase2

    cfg = _load_run_config(args)
    train, test = _load_split(args.data, cfg)
    gan_ckpt = _load_ckpt(args.gan)
    if gan_ckpt.phase != "phase1":
        raise ConfigError("--gan must be a phase1 checkpoint", field="gan")
    res = train_phase2(train, gan_ckpt, cfg, test, mode=args.mode)
    out = Path(args.out)
    save_checkpoint(res.checkpoint, out)
    trace_path = out.with_suffix(".trace.csv")
    with open(trace_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "train_acc", "test_acc"], lineterminator="\n")
        writer.writeheader()
        for row in res.trace:
            writer.writerow({k: (repr(round(v, 10)) if isinstance(v, float) else v) for k, v in row.items()})
    final = res.trace[-1] if res.trace else {}
    return [out, trace_path], {"train_acc": final.get("train_acc"), "test_acc": final.get("test_acc")}


def cmd_eval(args):
    from vital import evaluation as ev
    from vital.train import SyntheticCache, build_classifier_data, gan_fingerprint, load_classifier, load_gan, predict, synthetic_companions

    ckpt = _load_ckpt(args.clf)
    if ckpt.phase != "phase2":
        raise ConfigError("--clf must be a phase2 checkpoint", field="clf")
    model, cfg = load_classifier(ckpt)
    train, test = _load_split(args.data, cfg)
    if args.n is not None:
        test = test[: args.n]
    fp = cfg.fingerprint()
    K = ckpt.meta["K"]

    if args.ablate is None:
        gan, vocab, _ = load_gan(ckpt)
        cache = SyntheticCache(gan, vocab, cfg.seeds.noise, gan_fingerprint(ckpt))
        data = build_classifier_data(test, synthetic_companions(test, cache, K), vocab, model.backbone.blocks[0].conv1.weight.dtype)
        preds = predict(model, data)
        rows = [{"record_id": r.record_id, "label": r.label, "prediction": int(p)} for r, p in zip(test, preds)]
        report = ev.MetricReport("accuracy", rows, {"accuracy": ev.accuracy(preds, [r.label for r in test]),
                                                    "mode": ckpt.meta["mode"], "K": K}, fp)
    elif args.ablate == "correlation":
        report = ev.correlation_report(ckpt, model.synth_backbone or model.backbone, train, test, K,
                                       cfg.seeds.noise, fingerprint=fp)
    elif args.ablate == "jcnn":
        _, vocab, _ = load_gan(ckpt)
        report = ev.jcnn_sweep(train, test, cfg, vocab, fingerprint=fp)
    elif args.ablate == "k-sweep":
        ks = [int(k) for k in args.k_values.split(",")]
        report = ev.k_sweep(train, test, ckpt, cfg, K_values=ks, seeds=tuple(range(args.seeds)), fingerprint=fp)
    else:
        report = ev.kgan_vs_gman(train, test, ckpt, cfg, fingerprint=fp)
    paths = report.write(args.report, plots=args.plots)
    return paths, {"kind": report.kind, "rows": len(report.rows)}


# -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vital", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render the toy captioned-shapes dataset")
    g.add_argument("--spec", required=True, help="toy spec JSON file")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.set_defaults(func=cmd_gen_data)

    def run_flags(sp):
        sp.add_argument("--config", help="run config JSON file (defaults if omitted)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. --set stage.K=3 (repeatable)")

    t = sub.add_parser("train-gan", help="adversarial training of the K-branch generator")
    run_flags(t)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="output checkpoint path")
    t.add_argument("--log", help="JSON-lines training log (default: <out>.log.jsonl)")
    t.add_argument("--iterations", type=int, help="override phase1.iterations")
    t.set_defaults(func=cmd_train_gan)

    s = sub.add_parser("synth", help="generate K images for one caption")
    s.add_argument("--ckpt", required=True, help="phase1 or phase2 checkpoint")
    s.add_argument("--caption", required=True)
    s.add_argument("--k", type=int, default=5, help="number of images")
    s.add_argument("--seed", type=int, default=0, help="generator seed")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    c = sub.add_parser("train-clf", help="train the classifier on a frozen generator")
    run_flags(c)
    c.add_argument("--data", required=True)
    c.add_argument("--gan", required=True, help="phase1 checkpoint")
    c.add_argument("--mode", choices=["S", "RS", "RST"])
    c.add_argument("--epochs", type=int, help="override phase2.epochs")
    c.add_argument("--out", required=True, help="output checkpoint path")
    c.set_defaults(func=cmd_train_clf)

    e = sub.add_parser("eval", help="accuracy, correlation analysis, baselines and ablations")
    e.add_argument("--clf", required=True, help="phase2 checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="report directory")
    e.add_argument("--ablate", choices=["k-sweep", "jcnn", "kgan-vs-gman", "correlation"])
    e.add_argument("--n", type=int, help="evaluate only the first N test records")
    e.add_argument("--k-values", default="1,2,3,5", help="K values for k-sweep")
    e.add_argument("--seeds", type=int, default=3, help="seeds per k-sweep cell")
    e.add_argument("--plots", action="store_true", help="also write PNG plots")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        paths, summary = args.func(args)
    except ConfigError as exc:
        print(json.dumps({"command": args.command, "exit": 2, "error": str(exc), "field": exc.field}))
        return 2
    except CheckpointFormatError as exc:
        print(json.dumps({"command": args.command, "exit": 2, "error": str(exc)}))
        return 2
    except NumericalError as exc:
        print(json.dumps({"command": args.command, "exit": 3, "error": str(exc)}))
        return 3
    print(json.dumps({"command": args.command, "exit": 0, "artifacts": [str(p) for p in paths],
                      "summary": _clean(summary)}, sort_keys=True))
    return 0


def _clean(d):
    return {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in d.items()}


if __name__ == "__main__":
    sys.exit(main())
