"""Command-line interface.

Data directories hold ``train.tsv``, ``valid.tsv`` and ``test.tsv``. For
matching every line is ``source<TAB>target<TAB>label`` with space-separated
symbols; for transduction it is ``source<TAB>target`` with a character-level
source and a space-separated (or character-level) target.

Exit codes: 0 success, 2 configuration error, 3 data or vocabulary error,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, dp
from .data import (Vocabulary, data_file, load_cognates, load_transduction, read_examples, read_pharaoh,
                   split_items, write_examples, write_pharaoh, write_transduction)
from .errors import ConfigError, DataError, NsedError, NumericalError
from .matching import classify as classify_scores
from .matching import log_scores, tune_threshold
from .metrics import alignment_f1, binary_f1, corpus_cer, prf, wer
from .model import EditModel
from .stat import train_em
from .training import load_model, parse_config, train, validate_matching
from .transduction import BeamConfig, beam_search, decode_greedy_batch, interpret

logger = logging.getLogger("nsed")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 2, 3, 4


# ------------------------------------------------------------------ helpers


def _thread_limit(threads):
    if not threads:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def _split_path(directory, split):
    return data_file(directory, f"{split}.tsv")


def _read_split(task, directory, split):
    path = _split_path(directory, split)
    if task == "match":
        return read_examples(path)
    return load_transduction(path)


def _subsample(items, count, seed):
    if not count or count >= len(items):
        return items
    order = np.random.default_rng(seed).permutation(len(items))[:count]
    return [items[k] for k in sorted(order)]


def _read_pairs(path):
    """``source<TAB>target[<TAB>...]`` lines with space-separated symbols."""
    pairs = []
    with open(path, encoding="utf-8") as handle:
        for number, line in enumerate(handle, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 2:
                raise DataError(f"{path}:{number}: expected 'source<TAB>target'")
            pairs.append((_symbols(parts[0]), _symbols(parts[1])))
    return pairs


def _symbols(text):
    text = text.strip()
    return text.split() if " " in text else list(text)


def _out(text=""):
    sys.stdout.write(text + "\n")


# ------------------------------------------------------------------ commands


def cmd_train(args):
    config = parse_config(args.config)
    if args.task and args.task != config.task:
        raise ConfigError(f"--task {args.task} contradicts task = {config.task} in {args.config}")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.train_subsample is not None:
        overrides["train_subsample"] = args.train_subsample
    config = replace(config, **overrides)
    task = config.task
    splits = {name: _read_split(task, args.data, name) for name in ("train", "valid")}
    extra_path = Path(args.data) / "test.tsv"
    test = _read_split(task, args.data, "test") if extra_path.exists() else []
    splits["train"] = _subsample(splits["train"], config.train_subsample, config.seed)

    if task == "match":
        everything = [x for part in (splits["train"], splits["valid"], test) for e in part
                      for x in (e.source, e.target)]
        src_vocab = tgt_vocab = Vocabulary.build(everything)
        encode = lambda e: (src_vocab.encode(e.source), src_vocab.encode(e.target), e.label)
        train_data = [encode(e) for e in splits["train"]]
        valid_data = [encode(e) for e in splits["valid"]]
        longest = max(len(x) for e in train_data + valid_data for x in e[:2])
    else:
        items = splits["train"] + splits["valid"] + test
        src_vocab = Vocabulary.build(it.source for it in items)
        tgt_vocab = Vocabulary.build(ref for it in items for ref in it.references)
        train_data = [(src_vocab.encode(it.source), tgt_vocab.encode(ref))
                      for it in splits["train"] for ref in it.references]
        valid_data = [(src_vocab.encode(it.source), [tgt_vocab.encode(r) for r in it.references])
                      for it in splits["valid"]]
        longest = max([len(s) for s, _ in train_data] + [len(t) for _, t in train_data]
                      + [len(s) for s, _ in valid_data])
    if not train_data or not valid_data:
        raise DataError("training and validation data must not be empty")
    max_positions = max(args.max_len, longest) + 2
    model = EditModel(task, config.encoder_config(max_positions), len(src_vocab),
                      len(tgt_vocab) if task == "transduce" else None, seed=config.seed)
    log_path = args.log or f"{args.out}.log.csv"
    extra = {"src_vocab": src_vocab.to_json(), "tgt_vocab": tgt_vocab.to_json(), "max_len": args.max_len}
    with _thread_limit(args.threads):
        result = train(model, config, train_data, valid_data, max_steps=args.max_steps,
                       micro_batch=args.micro_batch, out=args.out, log_path=log_path, manifest_extra=extra,
                       max_len=args.max_len)
    _out(f"steps={result.steps}")
    _out(f"best_step={result.best_step}")
    _out(f"valid_metric={float(result.best_metric)!r}")
    if result.threshold is not None:
        _out(f"log_threshold={float(result.threshold)!r}")
    return 0


def _load(args, task=None):
    model, config, manifest, src_vocab, tgt_vocab = load_model(args.model)
    if task and model.task != task:
        raise ConfigError(f"this command needs a {task} model, {args.model} holds a {model.task} model")
    return model, config, manifest, src_vocab, tgt_vocab


def cmd_classify(args):
    model, _, manifest, vocab, _ = _load(args, "match")
    if "log_threshold" not in manifest:
        raise ConfigError(f"{args.model} has no tuned threshold")
    threshold = float(manifest["log_threshold"])
    pairs = _read_pairs(args.input)
    with _thread_limit(args.threads):
        scores = log_scores(model, [vocab.encode(s) for s, _ in pairs], [vocab.encode(t) for _, t in pairs])
    for score, label in zip(scores, classify_scores(scores, threshold)):
        _out(f"{float(score)!r}\t{int(label)}")
    return 0


def cmd_transduce(args):
    model, config, manifest, src_vocab, tgt_vocab = _load(args, "transduce")
    beam = args.beam if args.beam is not None else config.beam
    len_norm = args.len_norm if args.len_norm is not None else config.len_norm
    max_len = args.max_len or int(manifest.get("max_len", 50))
    beam_config = BeamConfig(beam=beam, len_norm=len_norm, max_len=max_len)
    with open(args.input, encoding="utf-8") as handle:
        sources = [list(line.rstrip("\n").split("\t")[0]) for line in handle if line.strip()]
    with _thread_limit(args.threads):
        for source in sources:
            ids = src_vocab.encode(source)
            hyp = beam_search(model, ids, beam_config)
            output = tgt_vocab.decode(hyp.symbols)
            line = " ".join(output)
            if not hyp.finished:
                logger.warning("output for %s was truncated at %d symbols", "".join(source), max_len)
            if args.emit_script:
                line += "\t" + " ".join(hyp.script.render(source, output))
            _out(line)
    return 0


def cmd_align(args):
    model, _, _, src_vocab, tgt_vocab = _load(args)
    pairs = _read_pairs(args.input)
    links = []
    with _thread_limit(args.threads):
        for source, target in pairs:
            script = interpret(model, src_vocab.encode(source), tgt_vocab.encode(target))
            links.append(script.links())
            _out("\t".join(script.render(source, target) + [repr(float(script.log_score))]))
    if args.pharaoh:
        write_pharaoh(args.pharaoh, links)
    return 0


def _dump_alpha(model, path, source, target):
    batch = model.make_batch([source], [target])
    table = dp.forward(model.grid(batch).edges())[0][:len(source) + 1, :len(target) + 1]
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        for row in np.exp(table):
            writer.writerow([repr(float(x)) for x in row])
    return float(np.exp(table[-1, -1]))


def cmd_eval(args):
    model, config, manifest, src_vocab, tgt_vocab = _load(args)
    path = Path(args.data)
    if path.is_dir():
        path = _split_path(path, args.split)
    with _thread_limit(args.threads):
        if model.task == "match":
            examples = read_examples(path)
            data = [(src_vocab.encode(e.source), src_vocab.encode(e.target), e.label) for e in examples]
            if "log_threshold" not in manifest:
                raise ConfigError(f"{args.model} has no tuned threshold")
            threshold = float(manifest["log_threshold"])
            scores = log_scores(model, [d[0] for d in data], [d[1] for d in data])
            labels = np.array([d[2] for d in data])
            predicted = scores >= threshold
            tp = int((predicted & (labels == 1)).sum())
            precision, recall, _ = prf(tp, int(predicted.sum()), int(labels.sum()))
            _out(f"f1={float(binary_f1(predicted, labels))!r}")
            _out(f"precision={float(precision)!r}")
            _out(f"recall={float(recall)!r}")
            if len(set(labels.tolist())) == 2:
                _out(f"oracle_f1={float(validate_matching(model, data)[0])!r}")
            first = data[0][:2]
        else:
            items = load_transduction(path)
            data = [(src_vocab.encode(it.source), [tgt_vocab.encode(r) for r in it.references]) for it in items]
            max_len = args.max_len or int(manifest.get("max_len", 50))
            if args.beam:
                beam_config = BeamConfig(beam=args.beam, len_norm=config.len_norm if args.len_norm is None
                                         else args.len_norm, max_len=max_len)
                hyps = [beam_search(model, s, beam_config).symbols for s, _ in data]
            else:
                hyps = [h.symbols for start in range(0, len(data), 128)
                        for h in decode_greedy_batch(model, [s for s, _ in data[start:start + 128]], max_len)]
            refs = [r for _, r in data]
            _out(f"cer={float(corpus_cer(hyps, refs))!r}")
            _out(f"wer={float(wer(hyps, refs))!r}")
            if args.reference_alignments:
                gold = read_pharaoh(args.reference_alignments)
                if len(gold) != len(items):
                    raise DataError("reference alignments and data differ in number of items")
                predicted = [interpret(model, s, r[0]).links() for s, r in data]
                _out(f"alignment_f1={float(alignment_f1(predicted, gold))!r}")
            first = (data[0][0], data[0][1][0])
    if args.dump_alpha:
        score = _dump_alpha(model, args.dump_alpha, *first)
        _out(f"alpha_score={float(score)!r}")
    return 0


def _stat_vocab(examples):
    return Vocabulary.build(x for e in examples for x in (e.source, e.target))


def cmd_em_train(args):
    train_set = read_examples(_split_path(args.data, "train"))
    valid_set = read_examples(_split_path(args.data, "valid"))
    test_path = Path(args.data) / "test.tsv"
    test_set = read_examples(test_path) if test_path.exists() else []
    vocab = _stat_vocab(train_set + valid_set + test_set)
    positives = [e for e in train_set if e.label == 1]
    if not positives:
        raise DataError("the statistical model trains on positive pairs and none were found")
    sources = [vocab.encode(e.source) for e in positives]
    targets = [vocab.encode(e.target) for e in positives]
    result = train_em(sources, targets, iterations=args.iterations, tol=args.tol, n_src=len(vocab),
                      n_tgt=len(vocab), smoothing=args.smoothing)
    table = result.table

    def scores(examples):
        return table.log_scores([vocab.encode(e.source) for e in examples], [vocab.encode(e.target) for e in examples])

    threshold = tune_threshold(scores(valid_set), [e.label for e in valid_set])
    for k, ll in enumerate(result.trace, 1):
        _out(f"iteration={k} log_likelihood={float(ll)!r}")
    _out(f"log_threshold={float(threshold)!r}")
    _out(f"valid_f1={float(binary_f1(scores(valid_set) >= threshold, [e.label for e in valid_set]))!r}")
    if test_set:
        _out(f"test_f1={float(binary_f1(scores(test_set) >= threshold, [e.label for e in test_set]))!r}")
    if args.out:
        Path(args.out).write_text(json.dumps({"symbols": vocab.symbols, "matrix": table.matrix.tolist(),
                                              "log_threshold": threshold}), encoding="utf-8")
    return 0


def cmd_prepare_cognates(args):
    train_set, valid_set, test_set = load_cognates(args.input, args.negatives, args.seed, args.valid, args.test,
                                                   args.max_positives)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", train_set), ("valid", valid_set), ("test", test_set)):
        write_examples(out / f"{name}.tsv", part)
        _out(f"{name}={len(part)}")
    return 0


def cmd_prepare_transduction(args):
    items = load_transduction(args.input, args.format)
    parts = split_items(items, args.valid, args.test, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(("train", "valid", "test"), parts):
        write_transduction(out / f"{name}.tsv", part)
        _out(f"{name}={len(part)}")
    return 0


# ------------------------------------------------------------------- parser


def _fraction_or_count(text):
    value = float(text)
    return int(value) if value >= 1 and value.is_integer() else value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nsed", description="Neural string edit distance.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=True):
        if model:
            p.add_argument("--model", required=True, help="checkpoint written by 'nsed train'")
        p.add_argument("--threads", type=int, default=None, help="cap on BLAS threads (1 is deterministic)")

    p = sub.add_parser("train", help="train a matching or transduction model")
    p.add_argument("--task", choices=("match", "transduce"))
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="directory with train.tsv and valid.tsv")
    p.add_argument("--out", required=True, help="checkpoint path (best validation model)")
    p.add_argument("--log", help="metrics CSV (default: OUT.log.csv)")
    p.add_argument("--max-steps", type=int, default=10000)
    p.add_argument("--micro-batch", type=int, default=None, help="split batches to bound memory")
    p.add_argument("--max-len", type=int, default=50, help="output length limit during validation")
    p.add_argument("--train-subsample", type=int, default=None)
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed (default 13)")
    common(p, model=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("classify", help="score string pairs with a matching model")
    p.add_argument("--input", required=True, help="source<TAB>target lines")
    common(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("transduce", help="generate target strings")
    p.add_argument("--input", required=True, help="one source string per line")
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--len-norm", type=float, default=None)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--emit-script", action="store_true", help="append the edit operations")
    common(p)
    p.set_defaults(func=cmd_transduce)

    p = sub.add_parser("align", help="most probable edit script of each pair")
    p.add_argument("--input", required=True, help="source<TAB>target lines")
    p.add_argument("--pharaoh", help="also write substitution links in Pharaoh format")
    common(p)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a data split")
    p.add_argument("--data", required=True, help="data directory or file")
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--beam", type=int, default=None, help="beam search instead of greedy decoding")
    p.add_argument("--len-norm", type=float, default=None)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--reference-alignments", help="Pharaoh file for alignment F1 (transduction)")
    p.add_argument("--dump-alpha", help="write the alpha table of the first pair as CSV")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("em-train", help="statistical edit distance baseline on matching data")
    p.add_argument("--data", required=True)
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--smoothing", type=float, default=0.0)
    p.add_argument("--out", help="write the operation table as JSON")
    p.set_defaults(func=cmd_em_train, threads=None)

    p = sub.add_parser("prepare-cognates", help="build matching splits from a cognate word list")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--negatives", type=int, default=10)
    p.add_argument("--valid", type=_fraction_or_count, default=0.1)
    p.add_argument("--test", type=_fraction_or_count, default=0.1)
    p.add_argument("--max-positives", type=int, default=None)
    p.add_argument("--seed", type=int, default=13)
    p.set_defaults(func=cmd_prepare_cognates)

    p = sub.add_parser("prepare-transduction", help="split a TSV or CMUDict file into train/valid/test")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("tsv", "cmudict"), default="tsv")
    p.add_argument("--out", required=True)
    p.add_argument("--valid", type=_fraction_or_count, default=0.05)
    p.add_argument("--test", type=_fraction_or_count, default=0.05)
    p.add_argument("--seed", type=int, default=13)
    p.set_defaults(func=cmd_prepare_transduction)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"nsed: configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as err:
        print(f"nsed: data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as err:
        print(f"nsed: numerical error: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except NsedError as err:
        print(f"nsed: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
