"""Command-line entry point: ``svquant <subcommand> ...``.

Every subcommand accepts ``--seed`` and ``--config`` (JSON, see
:mod:`svquant.config`). Outputs are written atomically; any failure exits
with status 1 and a one-line message on stderr.
"""

import argparse
import csv
import dataclasses
import io
import json
import os
import sys

import numpy as np

from . import packfile
from ._io import atomic_write, write_json, write_text
from .analysis import analyze, histograms_csv, report_json
from .config import load_config
from .corpus import Split, SyntheticCorpus, read_trials, write_trials
from .evaluation import evaluate, write_scores
from .exceptions import SVQuantError
from .models import AamHead, ModelConfig, build_model, count_params, model_size_bytes
from .probe import binomial_interval, chance_level, extract_embeddings, make_tasks, run_probe, shuffled
from .quantizer import QuantScheme
from .training import TrainConfig, finetune_quantized, load_checkpoint, quant_layers, save_checkpoint, train_fp32

SPLIT_FIELDS = ("x", "speaker", "gender", "scene", "style", "ids")


# -- corpus directory ---------------------------------------------------------


def save_corpus(corpus, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    arrays = {}
    for name in ("train", "test"):
        split = corpus.split(name)
        for f in SPLIT_FIELDS:
            value = getattr(split, f)
            arrays[f"{name}/{f}"] = np.array(value) if f == "ids" else value
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write(os.path.join(out_dir, "corpus.npz"), buf.getvalue())
    trials = corpus.trials()
    write_trials(trials, os.path.join(out_dir, "trials.txt"))
    write_json(os.path.join(out_dir, "corpus.json"), corpus.config.to_dict())
    return trials


def load_corpus(corpus_dir):
    """``(config dict, train Split, test Split)`` from a ``gen-corpus`` directory."""
    with open(os.path.join(corpus_dir, "corpus.json")) as fh:
        info = json.load(fh)
    splits = {}
    with np.load(os.path.join(corpus_dir, "corpus.npz"), allow_pickle=False) as data:
        for name in ("train", "test"):
            values = {f: data[f"{name}/{f}"] for f in SPLIT_FIELDS}
            values["ids"] = [str(i) for i in values["ids"]]
            splits[name] = Split(**values)
    return info, splits["train"], splits["test"]


# -- model loading -------------------------------------------------------------


def _is_packfile(path):
    with open(path, "rb") as fh:
        return fh.read(4) == packfile.MAGIC


def _model_config(cfg, corpus_info):
    return dataclasses.replace(
        cfg.model, input_dim=corpus_info["n_mels"], n_speakers=corpus_info["n_train_speakers"]
    )


def load_model(path, cfg, corpus_info=None):
    """``(model, model_cfg, info)`` from a checkpoint or a packfile.

    Packfiles carry no architecture, so the ``model`` config section (with
    the corpus input size) describes the network they are loaded into.
    """
    if _is_packfile(path):
        mcfg = _model_config(cfg, corpus_info) if corpus_info else cfg.model
        model = build_model(dataclasses.replace(mcfg, quant_scheme=None, quant_bits=None))
        records = packfile.unpack(path)
        packfile.load_into(model, records)
        quantized = [r for r in records if r.quantized]
        schemes = {r.config.scheme.value for r in quantized}
        bits = {r.bits for r in quantized}
        info = {
            "scheme": schemes.pop() if len(schemes) == 1 else ("mixed" if schemes else "fp32"),
            "bits": bits.pop() if len(bits) == 1 else (None if bits else 32),
            "size_bytes": os.path.getsize(path),
            "source": "packfile",
        }
        return model, mcfg, info
    model, _, meta = load_checkpoint(path)
    mcfg = dataclasses.replace(cfg.model, **meta["model"])
    quant = meta.get("quant", {})
    schemes = {q["scheme"] for q in quant.values()}
    bits = {q["bits"] for q in quant.values()}
    if quant and len(schemes) == 1 and len(bits) == 1:
        scheme, b = schemes.pop(), bits.pop()
        size = model_size_bytes(mcfg, b)
    else:
        scheme, b, size = "fp32", 32, model_size_bytes(mcfg, None)
    return model, mcfg, {"scheme": scheme, "bits": b, "size_bytes": size, "source": "checkpoint"}


def _model_id(args, path):
    return args.id or os.path.splitext(os.path.basename(path))[0]


def _logger(verbose):
    def log(record):
        if verbose:
            print(json.dumps(record), file=sys.stderr)

    return log


def _write_log(path, history):
    write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in history))


def _default_log(out):
    return os.path.splitext(out)[0] + ".log.jsonl"


# -- subcommands -----------------------------------------------------------------


def cmd_gen_corpus(args, cfg):
    trials = save_corpus(SyntheticCorpus(cfg.corpus), args.out)
    print(f"wrote corpus to {args.out} ({len(trials)} trials)")


def cmd_train(args, cfg):
    info, train, _ = load_corpus(args.corpus)
    mcfg = _model_config(cfg, info)
    tcfg = cfg.train
    if args.epochs is not None:
        tcfg = TrainConfig.fp32(**{**tcfg.to_dict(), "epochs": args.epochs, "decay_epochs": None})
    model = build_model(mcfg)
    head = AamHead(mcfg.embedding_dim, mcfg.n_speakers, tcfg.margin, tcfg.scale, tcfg.seed)
    history = train_fp32(model, head, train.x, train.speaker, tcfg, _logger(args.verbose))
    meta = {"stage": "fp32", "train": tcfg.to_dict(), "corpus": info}
    save_checkpoint(args.out, model, head, mcfg, meta)
    _write_log(args.log or _default_log(args.out), history)
    print(f"wrote {args.out}")


def cmd_finetune(args, cfg):
    info, train, _ = load_corpus(args.corpus)
    model, head, meta = load_checkpoint(args.checkpoint)
    q = cfg.quant
    scheme = args.scheme or q["scheme"]
    bits = args.bits or q["bits"]
    alpha = args.alpha if args.alpha is not None else q["alpha"]
    fcfg = cfg.finetune
    if args.epochs is not None:
        fcfg = TrainConfig.qat(**{**fcfg.to_dict(), "epochs": args.epochs, "decay_epochs": None})
    history = finetune_quantized(model, head, train.x, train.speaker, fcfg, scheme, bits, alpha, _logger(args.verbose))
    mcfg = ModelConfig(**meta["model"])
    meta = {"stage": "qat", "parent": os.path.basename(args.checkpoint), "finetune": fcfg.to_dict(), "corpus": info}
    save_checkpoint(args.out, model, head, mcfg, meta)
    _write_log(args.log or _default_log(args.out), history)
    print(f"wrote {args.out}")


def cmd_quantize(args, cfg):
    model, _, _ = load_checkpoint(args.checkpoint)
    for _, layer in quant_layers(model):
        layer.disable_quantization()
    alpha = args.alpha if args.alpha is not None else cfg.quant["alpha"]
    n = packfile.pack_model(model, args.out, QuantScheme.parse(args.scheme), args.bits, alpha)
    print(f"wrote {args.out} ({n} bytes)")


def cmd_pack(args, cfg):
    model, _, _ = load_checkpoint(args.checkpoint)
    n = packfile.pack_model(model, args.out)
    print(f"wrote {args.out} ({n} bytes)")


def cmd_describe(args, cfg):
    text = packfile.describe_json(args.packfile) + "\n"
    if args.out:
        write_text(args.out, text)
    else:
        sys.stdout.write(text)


def cmd_eval(args, cfg):
    info, train, test = load_corpus(args.corpus)
    model, mcfg, minfo = load_model(args.model, cfg, info)
    trials = read_trials(args.trials or os.path.join(args.corpus, "trials.txt"))
    ev = cfg.eval
    result, scores = evaluate(
        model, test, trials, train.x, train.speaker, ev["top_k"], ev["window"], ev["hop"]
    )
    write_scores(scores, args.scores)
    summary = {
        "model": _model_id(args, args.model),
        "arch": mcfg.arch,
        "params": count_params(mcfg),
        **minfo,
        **result,
    }
    write_json(args.summary, summary)
    print(f"EER {100 * result['eer']:.2f}% (raw {100 * result['eer_raw']:.2f}%)")


def cmd_analyze(args, cfg):
    model, mcfg, _ = load_model(args.model, cfg)
    active = any(layer.quant is not None for _, layer in quant_layers(model))
    scheme, bits, alpha = args.scheme, args.bits, args.alpha
    if not active:
        scheme = scheme or cfg.quant["scheme"]
        bits = bits or cfg.quant["bits"]
        alpha = alpha if alpha is not None else cfg.quant["alpha"]
    records, hists, rho = analyze(model, mcfg, scheme, bits, alpha)
    write_text(args.json, report_json(records, {"model": _model_id(args, args.model), "spearman_params_vs_error": rho}) + "\n")
    write_text(args.csv, histograms_csv(hists))
    print(f"wrote {args.json} and {args.csv}")


def cmd_probe(args, cfg):
    info, train, test = load_corpus(args.corpus)
    p = cfg.probe
    rows = []
    for path in args.models:
        model, _, minfo = load_model(path, cfg, info)
        tasks = make_tasks(extract_embeddings(model, train.x), train, extract_embeddings(model, test.x), test)
        for task in tasks.values():
            controls = [(task, False)] + ([(shuffled(task, cfg.seed), True)] if args.shuffled else [])
            for t, is_control in controls:
                acc = run_probe(t, p["hidden"], p["epochs"], p["lr"], cfg.seed)
                chance = chance_level(t.y_test)
                low, high = binomial_interval(chance, len(t.y_test))
                rows.append({
                    "task": t.name,
                    "model": os.path.splitext(os.path.basename(path))[0],
                    "bitwidth": minfo["bits"],
                    "scheme": minfo["scheme"],
                    "accuracy": acc,
                    "chance": chance,
                    "chance_interval": [low, high],
                    "shuffled": is_control,
                })
    write_json(args.out, {"rows": rows})
    for r in rows:
        print(f"{r['model']:<20} {r['task']:<24} {100 * r['accuracy']:6.2f}%")


REPORT_COLUMNS = ("model", "arch", "scheme", "bits", "params", "size_bytes", "size_mb", "compression", "eer", "eer_raw")


def build_report(runs):
    """Table rows from eval summaries; compression is relative to the same arch's fp32 run."""
    fp32 = {r["arch"]: r["size_bytes"] for r in runs if r.get("scheme") == "fp32"}
    rows = []
    for r in runs:
        base = fp32.get(r["arch"])
        rows.append({
            "model": r["model"],
            "arch": r["arch"],
            "scheme": r["scheme"],
            "bits": r["bits"],
            "params": r.get("params"),
            "size_bytes": r["size_bytes"],
            "size_mb": r["size_bytes"] / 2**20,
            "compression": base / r["size_bytes"] if base else None,
            "eer": r["eer"],
            "eer_raw": r.get("eer_raw"),
        })
    rows.sort(key=lambda r: (r["arch"], -(r["bits"] or 0), r["scheme"], r["model"]))
    return rows


def report_csv(rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def cmd_report(args, cfg):
    runs = []
    for path in args.runs:
        with open(path) as fh:
            run = json.load(fh)
        missing = {"model", "arch", "scheme", "bits", "size_bytes", "eer"} - set(run)
        if missing:
            raise SVQuantError(f"{path}: not an eval summary (missing {', '.join(sorted(missing))})")
        runs.append(run)
    rows = build_report(runs)
    write_json(args.out, {"rows": rows})
    if args.csv:
        write_text(args.csv, report_csv(rows))
    print(f"{'model':<20} {'scheme':<8} {'bits':>4} {'size(MB)':>9} {'ratio':>6} {'EER(%)':>7}")
    for r in rows:
        ratio = f"{r['compression']:.2f}" if r["compression"] else "-"
        print(f"{r['model']:<20} {r['scheme']:<8} {r['bits']!s:>4} {r['size_mb']:9.4f} {ratio:>6} {100 * r['eer']:7.2f}")


# -- parser ---------------------------------------------------------------------


def _bits(text):
    value = int(text)
    if not 2 <= value <= 8:
        raise argparse.ArgumentTypeError("bitwidth must be in 2..8")
    return value


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for every random consumer (overrides the config)")
    common.add_argument("--config", default=None, help="JSON run configuration")
    common.add_argument("-v", "--verbose", action="store_true", help="stream training progress to stderr")

    parser = argparse.ArgumentParser(prog="svquant", description="Quantized speaker-verification toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=func)
        return p

    def quant_flags(p, required):
        p.add_argument("--scheme", choices=[s.value for s in QuantScheme], required=required, default=None)
        p.add_argument("--bits", type=_bits, required=required, default=None)
        p.add_argument("--alpha", type=float, default=None, help="initial clipping value (default 3)")

    p = add("gen-corpus", cmd_gen_corpus, "generate the synthetic corpus and trial list")
    p.add_argument("--out", required=True, help="output directory")

    p = add("train", cmd_train, "stage 1: full-precision training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    p.add_argument("--log", help="JSON-lines training log (default: <out>.log.jsonl)")
    p.add_argument("--epochs", type=int, default=None)

    p = add("finetune", cmd_finetune, "stage 2: quantization-aware fine-tuning")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--epochs", type=int, default=None)
    quant_flags(p, required=False)

    p = add("quantize", cmd_quantize, "post-training quantization of a checkpoint into a packfile")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    quant_flags(p, required=True)

    p = add("pack", cmd_pack, "write a checkpoint as a packfile, keeping its own quantizers")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = add("describe", cmd_describe, "dump packfile header and record metadata as JSON")
    p.add_argument("packfile")
    p.add_argument("--out", help="write JSON here instead of stdout")

    p = add("eval", cmd_eval, "score a trial list and report EER")
    p.add_argument("--model", required=True, help="checkpoint or packfile")
    p.add_argument("--corpus", required=True)
    p.add_argument("--trials", help="trial list (default: <corpus>/trials.txt)")
    p.add_argument("--scores", required=True, help="score file output")
    p.add_argument("--summary", required=True, help="JSON summary output")
    p.add_argument("--id", help="model id in the summary (default: file stem)")

    p = add("analyze", cmd_analyze, "per-layer quantization report and weight histograms")
    p.add_argument("--model", required=True)
    p.add_argument("--json", required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--id")
    quant_flags(p, required=False)

    p = add("probe", cmd_probe, "attribute probes on frozen embeddings")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shuffled", action="store_true", help="add shuffled-label control rows")

    p = add("report", cmd_report, "merge eval summaries into a comparison table")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
        args.func(args, cfg)
    except (SVQuantError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"svquant {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
