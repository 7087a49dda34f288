"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
failure (including a failing gradient check).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import struct
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .datakit import ClassSpec, TriModalDataset, default_classes, generate_dataset
from .errors import DataError, NumericalError, TrimodalError
from .evalkit import build_query_sets, cross_modal_query, multilabel_map, write_report, zero_shot_classify
from .gradcheck import SECTIONS, run_suite
from .model import audio_logits, embed_dataset
from .trainer import PHASE_RUNNERS, TrainingConfig, _multi_hot, load_checkpoint, model_from_checkpoint, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

TRAIN_COMMANDS = {
    "pretrain-audio": "standalone",
    "train-cooperative": "cooperative",
    "train-full": "full",
    "finetune": "finetune",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# -- logging -----------------------------------------------------------------

class RunLog:
    """JSON-lines log whose first record is the reproducibility header."""

    def __init__(self, path, command: str, seed: int, config_text: str):
        self.path = Path(path) if path else None
        self.header = {"header": {"command": command, "seed": seed,
                                  "config_hash": hashlib.sha256(config_text.encode("utf-8")).hexdigest(),
                                  "version": __version__}}
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")
        self.write(self.header)

    def write(self, record: dict):
        line = json.dumps(record, sort_keys=True)
        if self.path is None:
            print(line, file=sys.stderr)
            return
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")


# -- subcommands -------------------------------------------------------------

def _classes_arg(value: str) -> list:
    if value.isdigit():
        return default_classes(int(value))
    try:
        raw = json.loads(Path(value).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"{value}: class file not found") from exc
    return [ClassSpec.from_json(d) for d in raw]


def cmd_gen_data(args) -> int:
    classes = _classes_arg(args.classes)
    config_text = json.dumps({"classes": [c.to_json() for c in classes], "n_per_class": args.n_per_class,
                              "multi_label_prob": args.multi_label_prob, "split": args.split},
                             sort_keys=True)
    log = RunLog(args.log, "gen-data", args.seed, config_text)
    manifest = generate_dataset(classes, args.n_per_class, args.multi_label_prob, args.seed, args.out,
                                split=args.split)
    log.write({"manifest": str(manifest.path), "n_samples": len(manifest.samples)})
    return EXIT_OK


def cmd_train(args) -> int:
    phase = TRAIN_COMMANDS[args.command]
    config = TrainingConfig.from_file(args.config, phase) if args.config else TrainingConfig(phase=phase)
    ckpt_in = load_checkpoint(args.ckpt_in) if args.ckpt_in else None
    dataset = TriModalDataset(args.data)
    log = RunLog(args.log or f"{args.ckpt_out}.log.jsonl", args.command, config.seed, config.to_text())

    def on_epoch(record, ckpt):
        save_checkpoint(ckpt, args.ckpt_out)
        log.write(record)

    runner = PHASE_RUNNERS[phase]
    if phase == "standalone":
        result = runner(dataset, config, ckpt_in, on_epoch=on_epoch)
    else:
        result = runner(ckpt_in, dataset, config, on_epoch=on_epoch)
    save_checkpoint(result.checkpoint, args.ckpt_out)
    return EXIT_OK


def _modalities(value: str) -> list:
    mods = [m.strip() for m in value.replace(">", ",").split(",") if m.strip()]
    bad = [m for m in mods if m not in ("text", "image", "audio")]
    if bad:
        raise UsageError(f"unknown modality {bad[0]!r}")
    return mods


def _retrieval(model, dataset, query_mod, gallery_mod):
    gallery = embed_dataset(model, dataset, gallery_mod)
    if query_mod == "text":
        queries = build_query_sets([s.labels for s in dataset.samples], "text", model.text)
    else:
        queries = build_query_sets(None, query_mod, embeddings=embed_dataset(model, dataset, query_mod))
    return cross_modal_query(queries, gallery)


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    dataset = TriModalDataset(args.data)
    name = args.dataset_name or Path(args.data).name
    mods = _modalities(args.modalities)
    log = RunLog(args.log, "eval", ckpt.snapshot["training"]["seed"], ckpt.config_snapshot)
    if args.task == "zeroshot":
        target = mods[-1] if mods else "audio"
        classes = ckpt.snapshot["classes"] or dataset.class_names
        res = zero_shot_classify(embed_dataset(model, dataset, target), classes, model.text)
        report = {"phase": ckpt.phase, "dataset": name, "task": "zeroshot", "modality": target,
                  "accuracy": res.accuracy, "n_evaluated": res.n_evaluated, "n_skipped": res.n_skipped}
    elif args.task == "multilabel":
        classes = ckpt.snapshot["classes"]
        scores = audio_logits(model, dataset)
        truth = _multi_hot([s.labels for s in dataset.samples], classes)
        report = {"phase": ckpt.phase, "dataset": name, "task": "multilabel", "map": multilabel_map(scores, truth)}
    else:
        if len(mods) != 2:
            raise UsageError("retrieval needs two modalities, e.g. --modalities text,audio")
        res = _retrieval(model, dataset, mods[0], mods[1])
        report = res.report(ckpt.phase, name, f"{mods[0]}>{mods[1]}")
    log.write({"report": report})
    if args.out:
        write_report(args.out, report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_query(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    dataset = TriModalDataset(args.data)
    mods = _modalities(args.direction)
    if len(mods) != 2:
        raise UsageError("--direction must look like text>audio")
    log = RunLog(args.log, "query", ckpt.snapshot["training"]["seed"], ckpt.config_snapshot)
    res = _retrieval(model, dataset, mods[0], mods[1])
    report = res.report(ckpt.phase, args.dataset_name or Path(args.data).name, f"{mods[0]}>{mods[1]}")
    queries = []
    for qid, ranking, scores, rel in zip(res.query_ids, res.rankings, res.scores, res.relevance):
        k = args.top_k
        queries.append({"query": qid, "results": ranking[:k], "scores": [float(v) for v in scores[:k]],
                        "relevant": [bool(v) for v in rel[:k]]})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"metrics": report, "queries": queries}, indent=1, sort_keys=True) + "\n",
                   encoding="utf-8")
    log.write({"report": report})
    return EXIT_OK


def write_matrix(path, matrix: np.ndarray):
    """u32 rows, u32 cols, then float64 little-endian values row-major."""
    m = np.ascontiguousarray(matrix, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *m.shape))
        fh.write(m.tobytes())


def read_matrix(path) -> np.ndarray:
    data = Path(path).read_bytes()
    rows, cols = struct.unpack("<II", data[:8])
    return np.frombuffer(data[8:], dtype="<f8").reshape(rows, cols).astype(np.float64)


def cmd_embed(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    dataset = TriModalDataset(args.data)
    log = RunLog(args.log, "embed", ckpt.snapshot["training"]["seed"], ckpt.config_snapshot)
    emb = embed_dataset(model, dataset, args.modality)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_matrix(args.out, emb.embeddings)
    log.write({"rows": len(emb), "dim": emb.embeddings.shape[1], "ids": emb.sample_ids})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    sections = args.sections.split(",") if args.sections else None
    if sections and set(sections) - set(SECTIONS):
        raise UsageError(f"unknown sections; choose from {','.join(SECTIONS)}")
    results = run_suite(sections)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_NUMERIC if failed else EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trimodal", description="Tri-modal contrastive embeddings at desk scale.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="write a synthetic tri-modal corpus")
    g.add_argument("--classes", default="8", help="class count or a classes.json file")
    g.add_argument("--n-per-class", type=int, default=64)
    g.add_argument("--multi-label-prob", type=float, default=0.2)
    g.add_argument("--split", default="train")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--log")
    g.set_defaults(func=cmd_gen_data)

    for name, phase in TRAIN_COMMANDS.items():
        t = sub.add_parser(name, help=f"run the {phase} training phase")
        t.add_argument("--config", help="key=value training config")
        t.add_argument("--data", required=True, help="dataset directory or manifest")
        t.add_argument("--ckpt-in", required=phase != "standalone",
                       help="predecessor checkpoint, or a same-phase checkpoint to resume")
        t.add_argument("--ckpt-out", required=True)
        t.add_argument("--log", help="epoch log (default: <ckpt-out>.log.jsonl)")
        t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="zero-shot, multi-label or retrieval metrics")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--task", required=True, choices=("zeroshot", "multilabel", "retrieval"))
    e.add_argument("--modalities", default="audio", help="zeroshot: target modality; retrieval: query,gallery")
    e.add_argument("--dataset-name")
    e.add_argument("--out", help="metrics JSON path")
    e.add_argument("--log")
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("query", help="rank a gallery for every query")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--direction", required=True, help="e.g. text>audio or audio>image")
    q.add_argument("--top-k", type=int, default=10)
    q.add_argument("--dataset-name")
    q.add_argument("--out", required=True)
    q.add_argument("--log")
    q.set_defaults(func=cmd_query)

    m = sub.add_parser("embed", help="dump one modality's embeddings as a raw matrix")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--modality", required=True, choices=("text", "image", "audio"))
    m.add_argument("--out", required=True)
    m.add_argument("--log")
    m.set_defaults(func=cmd_embed)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--sections", help=f"comma list of {','.join(SECTIONS)}")
    c.set_defaults(func=cmd_gradcheck)
    return p


def run(argv=None) -> int:
    """Parse ``argv`` and execute; returns the exit code instead of exiting."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"trimodal: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TrimodalError, OSError) as exc:
        print(f"trimodal: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
