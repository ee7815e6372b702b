"""Command-line interface: ``groundseq <command> ...``.

Exit codes: 0 success, 1 validation failures or malformed records present,
2 configuration error (bad flags, missing seed, vocabulary mismatch, I/O).

Stochastic commands take ``--seed``; when it is absent the ``GROUNDSEQ_SEED``
environment variable is used. ``--config FILE`` loads a JSON object whose
keys are option names (``top_p`` or ``top-p``); its values override flags
given on the command line, which override the environment and defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from groundseq.builder import MarkerStyle, apply_task_prefix, build_pretrain_sample, build_task_sample
from groundseq.decoding import SamplerConfig
from groundseq.grammar import InvalidSequenceError, parse, validate
from groundseq.records import (
    RecordFile,
    VocabMismatch,
    annotation_to_record,
    read_header,
    record_to_annotation,
    write_header,
    write_record,
)
from groundseq.scenes import TASK_ORDER, GenConfig, Scene, generate_corpus, scene_to_features, toy_vocab
from groundseq.vocab import UnifiedVocab, dequantize_coord, quantize_coord

logger = logging.getLogger("groundseq")

SEED_ENV = "GROUNDSEQ_SEED"
EXIT_OK, EXIT_INVALID, EXIT_CONFIG = 0, 1, 2


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def resolve_seed(args, required: bool = True) -> Optional[int]:
    if args.seed is not None:
        return int(args.seed)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer")
    if required:
        raise ConfigError(f"this command needs a seed: pass --seed or set {SEED_ENV}")
    return None


def marker_style(args) -> MarkerStyle:
    if args.no_markers:
        return MarkerStyle.NONE
    if args.no_obj_close:
        return MarkerStyle.OPEN_ONLY
    return MarkerStyle.BOTH


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} {p} does not exist")
    return p


def _writable(path: str) -> Path:
    p = Path(path)
    if not p.parent.exists():
        raise ConfigError(f"output directory {p.parent} does not exist")
    return p


def _tasks(spec: str, allowed=TASK_ORDER) -> list[str]:
    tasks = [t for t in spec.split(",") if t]
    bad = [t for t in tasks if t not in allowed]
    if bad or not tasks:
        raise ConfigError(f"unknown task(s) {bad}; choose from {list(allowed)}")
    return tasks


def _record_ids(rec: dict, vocab: UnifiedVocab) -> list[int]:
    for key in ("ids", "target_ids"):
        if key in rec:
            ids = rec[key]
            if not isinstance(ids, list) or not all(isinstance(i, int) for i in ids):
                raise ValueError(f"{key} must be a list of ints")
            return ids
    if "rendered" in rec:
        return vocab.tokenize_rendered(rec["rendered"])
    raise ValueError("record has no ids, target_ids or rendered field")


def _check_vocab(expected: UnifiedVocab, got: Optional[UnifiedVocab], where: str) -> None:
    if got is None:
        raise ConfigError(f"{where}: no vocabulary header")
    if got != expected:
        raise ConfigError(f"{where}: vocabulary differs from {expected.n_text}+{expected.n_bins} manifest in use")


def _vocab_override(args, found: Optional[UnifiedVocab], where: str) -> UnifiedVocab:
    if getattr(args, "vocab", None):
        v = UnifiedVocab.load(_existing(args.vocab, "vocab manifest"))
        if found is not None:
            _check_vocab(v, found, where)
        return v
    if found is None:
        raise ConfigError(f"{where}: no vocabulary header and no --vocab given")
    return found


def _malformed_summary(rf: RecordFile) -> int:
    n = len(rf.stats.malformed)
    if n:
        print(f"skipped {n} malformed record(s) in {rf.path} (lines {rf.stats.malformed[:10]})", file=sys.stderr)
    return n


def load_dataset(data_dir: str, tasks: Sequence[str]):
    """Scenes, per-task annotations, and the shared vocabulary of a gen-data directory."""
    root = _existing(data_dir, "data directory")
    rf = RecordFile(_existing(str(root / "scenes.jsonl"), "scene file"))
    scenes = {}
    for lineno, rec in rf:
        try:
            s = Scene.from_dict(rec)
        except (KeyError, TypeError, ValueError) as e:
            rf.skip(lineno, str(e))
            continue
        scenes[s.scene_id] = s
    if rf.vocab is None:
        raise ConfigError(f"{rf.path}: no vocabulary header")
    vocab = rf.vocab
    header = read_header(rf.path)
    grid = int(header.get("grid", 8))
    anns = {}
    bad = _malformed_summary(rf)
    for task in tasks:
        tf = RecordFile(_existing(str(root / f"{task}.jsonl"), "annotation file"))
        items = []
        for lineno, rec in tf:
            try:
                _, ann = record_to_annotation(rec, vocab)
                if ann.image not in scenes:
                    raise ValueError(f"unknown image {ann.image!r}")
            except (KeyError, TypeError, ValueError) as e:
                tf.skip(lineno, str(e))
                continue
            items.append(ann)
        if tf.vocab is not None:
            _check_vocab(vocab, tf.vocab, str(tf.path))
        bad += _malformed_summary(tf)
        anns[task] = items
    return scenes, anns, vocab, grid, bad


def _examples(scenes, anns, grid):
    from groundseq.training import Example

    cache = {}
    out = []
    for task, items in anns.items():
        for ann in items:
            if ann.image not in cache:
                cache[ann.image] = scene_to_features(scenes[ann.image], grid)
            out.append(Example(task, ann, cache[ann.image]))
    return out


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    seed = resolve_seed(args)
    if args.n_scenes < 0:
        raise ConfigError("--n-scenes must be >= 0")
    try:
        cfg = GenConfig(args.grid, args.min_objects, args.max_objects, args.min_cells, args.max_cells)
    except ValueError as e:
        raise ConfigError(str(e))
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create {out}: {e}")
    vocab = toy_vocab(args.n_bins)
    scenes, anns = generate_corpus(args.n_scenes, seed, cfg, vocab)
    gen = {"grid": cfg.grid, "min_objects": cfg.min_objects, "max_objects": cfg.max_objects,
           "min_cells": cfg.min_cells, "max_cells": cfg.max_cells}
    with open(out / "scenes.jsonl", "w", encoding="utf-8") as f:
        write_header(f, "scenes", vocab, seed=seed, **gen)
        for s in scenes:
            write_record(f, s.to_dict())
    counts = {"scenes": len(scenes)}
    for task in TASK_ORDER:
        with open(out / f"{task}.jsonl", "w", encoding="utf-8") as f:
            write_header(f, "annotations", vocab, task=task, seed=seed)
            for a in anns:
                write_record(f, annotation_to_record(task, a[task], vocab))
        counts[task] = len(anns)
    vocab.save(out / "vocab.json")
    manifest = {"seed": seed, "n_scenes": args.n_scenes, "gen_config": gen, "n_bins": args.n_bins,
                "counts": counts, "files": ["scenes.jsonl"] + [f"{t}.jsonl" for t in TASK_ORDER]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(counts, sort_keys=True))
    return EXIT_OK


def cmd_build(args) -> int:
    src = _existing(args.input, "input")
    dst = _writable(args.out)
    style = marker_style(args)
    rng = np.random.default_rng(resolve_seed(args, required=args.pretrain))
    rf = RecordFile(src)
    vocab = None
    with open(dst, "w", encoding="utf-8") as f:
        for lineno, rec in rf:
            if vocab is None:
                vocab = _vocab_override(args, rf.vocab, str(src))
                write_header(f, "targets", vocab, marker_style=style.value, task_prefix=args.task_prefix)
            try:
                task, ann = record_to_annotation(rec, vocab)
                if args.pretrain:
                    s = build_pretrain_sample(ann, vocab, rng, args.p_empty, style)
                else:
                    s = build_task_sample(task, ann, vocab, style)
                s = apply_task_prefix(s, args.task_prefix, vocab)
            except (KeyError, TypeError, ValueError) as e:
                rf.skip(lineno, str(e))
                continue
            write_record(f, {"image": ann.image, "task": s.task, "input_ids": s.input_text,
                             "target_ids": s.target, "rendered": vocab.render(s.target)})
        if vocab is None:  # empty input: still emit a header
            vocab = _vocab_override(args, rf.vocab, str(src))
            write_header(f, "targets", vocab, marker_style=style.value, task_prefix=args.task_prefix)
    return EXIT_INVALID if _malformed_summary(rf) else EXIT_OK


def cmd_parse(args) -> int:
    src = _existing(args.input, "input")
    dst = _writable(args.out)
    style = marker_style(args)
    rf = RecordFile(src)
    vocab = None
    invalid = 0
    with open(dst, "w", encoding="utf-8") as f:
        for lineno, rec in rf:
            vocab = vocab or _vocab_override(args, rf.vocab, str(src))
            try:
                ids = _record_ids(rec, vocab)
            except ValueError as e:
                rf.skip(lineno, str(e))
                continue
            out = {"image": rec.get("image"), "task": rec.get("task")}
            try:
                p = parse(ids, vocab, style)
            except InvalidSequenceError as e:
                invalid += 1
                out.update(valid=False, report=e.report.to_dict())
            else:
                out.update(
                    valid=True,
                    words=[vocab.words[i] for i in p.text],
                    entities=[{"start": g.start, "end": g.end, "box": list(g.box.as_tuple())} for g in p.groundings],
                    loose_boxes=[list(b.as_tuple()) for b in p.loose_boxes],
                    warnings=p.report.to_dict()["warnings"],
                )
            write_record(f, out)
    bad = _malformed_summary(rf)
    if invalid:
        print(f"{invalid} sequence(s) failed to parse", file=sys.stderr)
    return EXIT_INVALID if bad or invalid else EXIT_OK


def cmd_validate(args) -> int:
    src = _existing(args.input, "input")
    style = marker_style(args)
    rf = RecordFile(src)
    vocab = None
    failures, warnings = Counter(), Counter()
    n_valid = n_invalid = 0
    for lineno, rec in rf:
        vocab = vocab or _vocab_override(args, rf.vocab, str(src))
        try:
            ids = _record_ids(rec, vocab)
        except ValueError as e:
            rf.skip(lineno, str(e))
            continue
        r = validate(ids, vocab, style)
        failures.update(f.kind for f in r.failures)
        warnings.update(w.kind for w in r.warnings)
        n_valid += r.valid
        n_invalid += not r.valid
    summary = {"records": n_valid + n_invalid, "valid": n_valid, "invalid": n_invalid,
               "failures": dict(failures), "warnings": dict(warnings), "malformed": len(rf.stats.malformed)}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_INVALID if n_invalid or rf.stats.malformed else EXIT_OK


def cmd_train(args) -> int:
    from groundseq.model import ModelConfig
    from groundseq.training import TrainConfig, load_checkpoint, save_checkpoint, train

    seed = resolve_seed(args)
    dst = _writable(args.out)
    tasks = _tasks(args.tasks)
    scenes, anns, vocab, grid, bad = load_dataset(args.data, tasks)
    try:
        cfg = TrainConfig(
            stage=args.stage, tasks=tuple(tasks), lr=args.lr, epochs=args.epochs, decay_epochs=args.decay_epochs,
            warmup_steps=args.warmup_steps, batch_size=args.batch_size, seed=seed, p_empty=args.p_empty,
            use_obj_close=not args.no_obj_close, use_obj_markers=not args.no_markers,
            type_embedding=args.type_embedding, task_prefix=args.task_prefix, n_bins=vocab.n_bins,
            max_steps=args.max_steps,
        )
        mc = ModelConfig(d_model=args.d_model, n_heads=args.n_heads, d_ff=args.d_ff, enc_layers=args.layers,
                         dec_layers=args.layers, grid_h=grid, grid_w=grid)
    except ValueError as e:
        raise ConfigError(str(e))
    init = None
    if args.init:
        init, _ = load_checkpoint(_existing(args.init, "checkpoint"))
        _check_vocab(vocab, init.vocab, args.init)
    examples = _examples(scenes, anns, grid)
    if cfg.stage == "pretrain":
        # pretraining reuses the grounded captions of the chosen tasks
        for ex in examples:
            ex.task = "pretrain"
    model, hist = train(cfg, examples, vocab, mc, init=init)
    save_checkpoint(dst, model, cfg)
    print(json.dumps({"checkpoint": str(dst), "steps": len(hist.losses), "epoch_losses": hist.epoch_losses,
                      "seconds": round(hist.seconds, 1)}))
    return EXIT_INVALID if bad else EXIT_OK


def _sampler(args) -> SamplerConfig:
    seed = resolve_seed(args, required=args.sampler == "nucleus")
    try:
        return SamplerConfig(method=args.sampler, top_p=args.top_p, constrained=args.constrained,
                             max_steps=args.max_steps, seed=seed or 0)
    except ValueError as e:
        raise ConfigError(str(e))


def cmd_infer(args) -> int:
    from groundseq.evaluation import run_decoding
    from groundseq.training import load_checkpoint

    sampler = _sampler(args)
    dst = _writable(args.out)
    model, tc = load_checkpoint(_existing(args.ckpt, "checkpoint"))
    tasks = _tasks(args.tasks)
    scenes, anns, vocab, grid, bad = load_dataset(args.data, tasks)
    _check_vocab(vocab, model.vocab, args.ckpt)
    style = tc.marker_style if tc else MarkerStyle.BOTH
    prefix = tc.task_prefix if tc else False
    outputs = run_decoding(model, _examples(scenes, anns, grid), vocab, sampler, style, prefix, args.batch_size)
    n_invalid = 0
    with open(dst, "w", encoding="utf-8") as f:
        write_header(f, "predictions", vocab, marker_style=style.value, sampler=sampler.__dict__)
        for task in tasks:
            to = outputs.get(task)
            if to is None:
                continue
            for ex, seq, p in zip(to.examples, to.sequences, to.parsed):
                n_invalid += p is None
                write_record(f, {"image": ex.annotation.image, "task": task, "ids": [int(i) for i in seq],
                                 "rendered": vocab.render(seq), "valid": p is not None})
    print(json.dumps({"predictions": str(dst), "invalid": n_invalid}))
    return EXIT_INVALID if bad else EXIT_OK


def cmd_eval(args) -> int:
    from groundseq.evaluation import TaskOutputs, format_table, score_outputs
    from groundseq.training import Example

    pred_path = _existing(args.pred, "prediction file")
    header = read_header(pred_path)
    style = MarkerStyle(header.get("marker_style", marker_style(args).value))
    rf = RecordFile(pred_path)
    preds: dict[tuple[str, str], list[int]] = {}
    for lineno, rec in rf:
        try:
            preds[(rec["task"], rec["image"])] = _record_ids(rec, rf.vocab)
        except (KeyError, ValueError) as e:
            rf.skip(lineno, str(e))
    tasks = _tasks(args.tasks) if args.tasks else sorted({t for t, _ in preds}, key=TASK_ORDER.index)
    scenes, anns, vocab, grid, bad = load_dataset(args.data, tasks)
    _check_vocab(vocab, rf.vocab, str(pred_path))
    outputs = {}
    missing = 0
    for task in tasks:
        exs, seqs, parsed = [], [], []
        for ann in anns[task]:
            key = (task, ann.image)
            if key not in preds:
                missing += 1
                continue
            exs.append(Example(task, ann, None))
            seqs.append(preds[key])
            try:
                parsed.append(parse(preds[key], vocab, style))
            except InvalidSequenceError:
                parsed.append(None)
        if exs:
            outputs[task] = TaskOutputs(task, exs, seqs, parsed)
    rep = score_outputs(outputs, vocab, style)
    print(format_table({args.name: rep}))
    if rep.failures:
        print("syntactic failures: " + json.dumps(rep.failures, sort_keys=True))
    if missing:
        print(f"{missing} annotation(s) had no prediction", file=sys.stderr)
    if args.json:
        Path(args.json).write_text(
            json.dumps({"scores": rep.scores, "failures": rep.failures, "n_sequences": rep.n_sequences}, indent=1, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    return EXIT_INVALID if bad or _malformed_summary(rf) else EXIT_OK


def cmd_quantize(args) -> int:
    try:
        print(" ".join(str(quantize_coord(x, args.n_bins)) for x in args.values))
    except ValueError as e:
        raise ConfigError(str(e))
    return EXIT_OK


def cmd_dequantize(args) -> int:
    try:
        print(" ".join(repr(dequantize_coord(b, args.n_bins)) for b in args.values))
    except ValueError as e:
        raise ConfigError(str(e))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _style_flags(p):
    p.add_argument("--no-obj-close", action="store_true", help="groups end after the fourth box (no closing marker)")
    p.add_argument("--no-markers", action="store_true", help="no object markers; box runs follow the words")


def _vocab_flag(p):
    p.add_argument("--vocab", help="vocabulary manifest; must agree with the file header if both exist")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="groundseq", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="JSON file of option values; overrides command-line flags")
        p.add_argument("--seed", type=int, default=None, help=f"random seed (default: ${SEED_ENV})")
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic scene corpus with per-task annotation files")
    p.add_argument("--n-scenes", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-bins", type=int, default=200)
    p.add_argument("--grid", type=int, default=8)
    p.add_argument("--min-objects", type=int, default=1)
    p.add_argument("--max-objects", type=int, default=3)
    p.add_argument("--min-cells", type=int, default=2)
    p.add_argument("--max-cells", type=int, default=4)

    p = add("build", cmd_build, "annotation records -> target token sequences")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--task-prefix", action="store_true", help="prepend the task prompt to the input text")
    p.add_argument("--pretrain", action="store_true", help="build pretraining samples (random empty input)")
    p.add_argument("--p-empty", type=float, default=0.5)
    _style_flags(p)
    _vocab_flag(p)

    p = add("parse", cmd_parse, "token sequences -> words, groundings and loose boxes")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    _style_flags(p)
    _vocab_flag(p)

    p = add("validate", cmd_validate, "check token sequences against the grammar; exit 1 on any failure")
    p.add_argument("--in", dest="input", required=True)
    _style_flags(p)
    _vocab_flag(p)

    p = add("train", cmd_train, "train a model on a gen-data directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--stage", default="multitask", choices=("pretrain", "multitask", "task_specific"))
    p.add_argument("--tasks", default=",".join(TASK_ORDER), help="comma-separated task list")
    p.add_argument("--init", help="checkpoint to continue from (pre-finetuning)")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--decay-epochs", type=int, default=2)
    p.add_argument("--warmup-steps", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--p-empty", type=float, default=0.5)
    p.add_argument("--d-model", type=int, default=96)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--d-ff", type=int, default=384)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--type-embedding", default="none", choices=("none", "two_type", "three_type"))
    p.add_argument("--task-prefix", action="store_true")
    _style_flags(p)

    def sampler_flags(p):
        p.add_argument("--sampler", default="argmax", choices=("argmax", "nucleus"))
        p.add_argument("--top-p", type=float, default=0.9)
        p.add_argument("--constrained", action="store_true", help="mask tokens the grammar forbids")
        p.add_argument("--max-steps", type=int, default=256)

    p = add("infer", cmd_infer, "decode a gen-data directory with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tasks", default=",".join(TASK_ORDER))
    p.add_argument("--batch-size", type=int, default=128)
    sampler_flags(p)

    p = add("eval", cmd_eval, "score predictions against a gen-data directory")
    p.add_argument("--pred", required=True, help="predictions (infer output) or targets (build output)")
    p.add_argument("--data", required=True)
    p.add_argument("--tasks", default=None)
    p.add_argument("--name", default="model", help="row label in the table")
    p.add_argument("--json", help="also write the scores to this file")
    _style_flags(p)

    p = add("quantize", cmd_quantize, "coordinates in [0, 1] -> bin indices")
    p.add_argument("values", type=float, nargs="+")
    p.add_argument("--n-bins", type=int, default=200)

    p = add("dequantize", cmd_dequantize, "bin indices -> bin-center coordinates")
    p.add_argument("values", type=int, nargs="+")
    p.add_argument("--n-bins", type=int, default=200)
    return ap


def apply_config(args, parser: argparse.ArgumentParser) -> None:
    if not getattr(args, "config", None):
        return
    path = _existing(args.config, "config file")
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except ValueError as e:
        raise ConfigError(f"{path}: {e}")
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if dest in ("command", "fn", "config") or not hasattr(args, dest):
            raise ConfigError(f"{path}: unknown option {key!r} for {args.command}")
        setattr(args, dest, value)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        apply_config(args, parser)
        return args.fn(args)
    except (ConfigError, VocabMismatch) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e.filename or ''}: {e.strerror or e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
