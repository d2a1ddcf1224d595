"""Command-line entry point: data preparation, training stages, evaluation,
path-count sweeps, plotting, and an interactive chat loop."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from convrec import converse as cv
from convrec import corpus as cp
from convrec import metrics as mx
from convrec import reasoner as rs
from convrec import trainer as tr
from convrec.kg import EmbeddingTable, link_entities, load_kg_tsv, train_embeddings
from convrec.util import ConfigError, ParseError, seed_everything

DATA_DIR_ENV = "DICR_DATA_DIR"


def default_root() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


def _config_from_args(args) -> tr.TrainConfig:
    config = tr.TrainConfig()
    if getattr(args, "config", None):
        config = tr.TrainConfig.load(args.config)
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key] = value
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "stage", None):
        overrides["stage"] = args.stage
    if getattr(args, "np_single", None) is not None:
        overrides["n_paths"] = args.np_single
    return config.with_overrides(overrides)


def _load_world(args, config):
    kg_path = Path(args.kg) if args.kg else default_root() / "kg.tsv"
    corpus_path = Path(args.corpus) if args.corpus else default_root() / "corpus.jsonl"
    for p in (kg_path, corpus_path):
        if not p.exists():
            raise FileNotFoundError(f"required input {p} does not exist")
    kg = load_kg_tsv(kg_path)
    dialogs = cp.load_corpus(corpus_path, kg)
    return kg, dialogs


def _checkpoint_models(checkpoint_dir, prefer: str = "auto"):
    out = Path(checkpoint_dir)
    if not out.exists():
        raise FileNotFoundError(f"checkpoint directory {out} does not exist")
    joint = out / "joint_gen.pt"
    gen = out / "gen.pt"
    if prefer == "joint" or (prefer == "auto" and joint.exists()):
        conv_path, rec_path = joint, out / "joint_rec.pt"
    elif prefer in ("gen", "auto"):
        conv_path, rec_path = gen, out / "rec.pt"
    else:
        raise ConfigError(f"unknown checkpoint preference {prefer!r}")
    if not conv_path.exists():
        raise FileNotFoundError(f"missing converse checkpoint {conv_path}")
    if not rec_path.exists():
        rec_path = out / "rec.pt"
    if not rec_path.exists():
        raise FileNotFoundError(f"missing reasoner checkpoint {rec_path}")
    emb_path = out / "emb.bin"
    if not emb_path.exists():
        raise FileNotFoundError(f"missing embedding checkpoint {emb_path}")
    nets = rs.load_policy(rec_path)
    model, vocab = cv.load_converse(conv_path)
    emb = EmbeddingTable.load(emb_path)
    return nets, model, vocab, emb


def _world_for_eval(args, config):
    kg, dialogs = _load_world(args, config)
    train_d, valid_d, test_d = cp.split_corpus(dialogs, config.ratio, config.seed)
    chosen = {"train": train_d, "valid": valid_d, "test": test_d}[args.split]
    nets, model, vocab, emb = _checkpoint_models(args.checkpoint, args.use_stage)
    world = tr.World(
        kg=kg,
        emb=emb,
        train=[],
        valid=[],
        test=cp.build_examples(chosen, kg, config.max_path_len),
    )
    return world, nets, model, vocab


# ---------------------------------------------------------------------------
# Commands


def cmd_prepare(args) -> int:
    config = _config_from_args(args)
    kg, dialogs = _load_world(args, config)
    out = Path(args.out or default_root())
    out.mkdir(parents=True, exist_ok=True)
    kg.save_tsv(out / "kg.tsv")
    cp.save_corpus(dialogs, kg, out / "corpus.jsonl")
    train_d, valid_d, test_d = cp.split_corpus(dialogs, config.ratio, config.seed)
    splits = {
        "train": [d.dialog_id for d in train_d],
        "valid": [d.dialog_id for d in valid_d],
        "test": [d.dialog_id for d in test_d],
    }
    (out / "splits.json").write_text(json.dumps(splits, indent=1))
    template_path = out / "templates.tsv"
    if not template_path.exists():
        with open(template_path, "w", encoding="utf-8") as f:
            for rel, template in cp.DEFAULT_TEMPLATES.items():
                f.write(f"{rel}\t{template}\n")
    examples = cp.build_examples(train_d, kg, config.max_path_len)
    vocab = cp.build_vocabulary(examples, config.min_freq)
    vocab.save(out / "vocab.txt")
    with_paths = sum(1 for e in examples if e.gold_path is not None)
    print(
        f"prepared {len(dialogs)} dialogs ({len(train_d)}/{len(valid_d)}/{len(test_d)} "
        f"split), {kg.n_entities} entities, {kg.n_relations} relations; "
        f"{with_paths}/{len(examples)} train examples carry a gold path"
    )
    return 0


def cmd_toygen(args) -> int:
    kg, dialogs = cp.generate_toy_world(
        args.seed, args.entities, args.relations, args.dialogs
    )
    out = Path(args.out or default_root())
    out.mkdir(parents=True, exist_ok=True)
    kg.save_tsv(out / "kg.tsv")
    cp.save_corpus(dialogs, kg, out / "corpus.jsonl")
    print(
        f"toy world: {kg.n_entities} entities, {kg.n_relations} relations, "
        f"{len(kg.triplets)} triplets, {len(dialogs)} dialogs -> {out}"
    )
    return 0


def cmd_train_embeddings(args) -> int:
    config = _config_from_args(args)
    kg_path = Path(args.kg) if args.kg else default_root() / "kg.tsv"
    if not kg_path.exists():
        raise FileNotFoundError(f"required input {kg_path} does not exist")
    kg = load_kg_tsv(kg_path)
    seed_everything(config.seed)
    emb = train_embeddings(
        kg, config.kg_dim, config.emb_epochs, config.margin, config.seed, config.emb_lr
    )
    out = Path(args.out or default_root())
    out.mkdir(parents=True, exist_ok=True)
    emb.save(out / "emb.bin")
    print(f"embeddings d={config.kg_dim} for {kg.n_entities} entities -> {out / 'emb.bin'}")
    return 0


def cmd_train(args) -> int:
    config = _config_from_args(args)
    kg, dialogs = _load_world(args, config)
    out = Path(args.out or default_root())
    results = tr.run_stage(config.stage, kg, dialogs, config, out)
    for stage, artifacts in results.items():
        print(f"stage {stage}: checkpoint {artifacts['checkpoint']}")
    return 0


def cmd_eval(args) -> int:
    config = _config_from_args(args)
    world, nets, model, vocab = _world_for_eval(args, config)
    records = mx.build_eval_records(nets, model, vocab, world, config,
                                    examples=world.test)
    report = mx.compute_report(records, world.kg)
    report_path = Path(args.report or (Path(args.checkpoint) / "report.txt"))
    report_path.parent.mkdir(parents=True, exist_ok=True)
    mx.emit_report(report, report_path)
    print(f"evaluated {report.n_examples} examples -> {report_path}")
    return 0


def cmd_sweep(args) -> int:
    config = _config_from_args(args)
    world, nets, model, vocab = _world_for_eval(args, config)
    counts = [int(x) for x in args.np.split(",") if x]
    if not counts:
        raise ConfigError("--np needs a comma-separated list of path counts")
    out = Path(args.out or Path(args.checkpoint))
    out.mkdir(parents=True, exist_ok=True)
    sweep = []
    for n in counts:
        records = mx.build_eval_records(nets, model, vocab, world, config,
                                        examples=world.test, n_paths=n)
        report = mx.compute_report(records, world.kg)
        mx.emit_report(report, out / f"report_np{n}.txt")
        sweep.append((n, report))
        hit = "null" if report.hit is None else f"{report.hit:.3f}"
        print(f"n_paths={n}: hit={hit} p_inter={report.p_inter:.3f} "
              f"p_inner={report.p_inner:.3f}")
    plots = mx.emit_plots(sweep, out)
    for p in plots:
        print(f"plot -> {p}")
    return 0


def cmd_plot(args) -> int:
    paths = [Path(p) for p in args.reports.split(",") if p]
    if not paths:
        raise ConfigError("--reports needs a comma-separated list of report files")
    sweep = []
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(f"report {p} does not exist")
        name = p.stem
        n = int(name.split("np")[-1]) if "np" in name else len(sweep) + 1
        sweep.append((n, mx.load_report(p)))
    sweep.sort(key=lambda x: x[0])
    out = Path(args.out or paths[0].parent)
    for p in mx.emit_plots(sweep, out):
        print(f"plot -> {p}")
    return 0


FALLBACK_RESPONSE = "tell me about something you have enjoyed recently ."


def cmd_chat(args) -> int:
    config = _config_from_args(args)
    kg_path = Path(args.kg) if args.kg else default_root() / "kg.tsv"
    if not kg_path.exists():
        raise FileNotFoundError(f"required input {kg_path} does not exist")
    kg = load_kg_tsv(kg_path)
    nets, model, vocab, emb = _checkpoint_models(args.checkpoint, args.use_stage)
    templates = None
    template_path = Path(args.checkpoint) / "templates.tsv"
    if template_path.exists():
        templates = cp.load_templates_tsv(template_path)
    world = tr.World(kg=kg, emb=emb, train=[], valid=[], test=[], templates=templates)
    turns: list[cp.Turn] = []
    print("chat ready; type a message, /quit to exit")
    while True:
        try:
            line = input("you> ")
        except EOFError:
            print()
            return 0
        line = line.strip()
        if line in ("/quit", "/exit"):
            return 0
        if not line:
            continue
        tokens = tuple(cp.tokenize_text(line))
        links = link_entities(tokens, kg)
        turns.append(cp.Turn("user", tokens, tuple(links)))
        context_entities = []
        for t in turns[-cp.CONTEXT_WINDOW:]:
            context_entities.extend(t.mentioned_ids())
        if not context_entities:
            print(f"bot> {FALLBACK_RESPONSE}")
            print("path>")
            turns.append(cp.Turn("system", tuple(FALLBACK_RESPONSE.split())))
            continue
        ex = cp.TrainingExample(
            dialog_id="chat",
            turn_index=len(turns),
            context=cp.flatten_context(turns),
            response=(),
            context_entities=tuple(context_entities),
            gold_items=(),
        )
        paths = tr.candidate_paths(nets, world, ex, config)
        tokens_per_path = [cp.tokenize_path(p, kg, templates) for p in paths]
        prep = cv.prepare_example(ex, tokens_per_path, vocab, config.max_context_tokens)
        reply = cv.generate_response(model, prep, vocab, mode="greedy",
                                     max_tokens=config.max_tokens)
        top = next((p for p in paths if p.length > 0), None)
        print(f"bot> {' '.join(reply)}")
        print(f"path> {' '.join(cp.tokenize_path(top, kg, templates)) if top else ''}")
        reply_links = link_entities(tuple(reply), kg)
        turns.append(cp.Turn("system", tuple(reply), tuple(reply_links)))


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="convrec",
        description="KG path reasoning + path-aware response generation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--kg", help="KG TSV path")
        p.add_argument("--corpus", help="corpus JSONL path")
        p.add_argument("--out", help="artifact directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config field")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="trained artifact dir")
            p.add_argument("--use-stage", default="auto",
                           choices=["auto", "gen", "joint"],
                           help="which converse checkpoint to evaluate")

    p = sub.add_parser("prepare", help="normalize a corpus and KG into artifacts")
    common(p)
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("toygen", help="generate the synthetic toy world")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--entities", type=int, default=200)
    p.add_argument("--relations", type=int, default=5)
    p.add_argument("--dialogs", type=int, default=500)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_toygen)

    p = sub.add_parser("train-embeddings", help="train KG embeddings only")
    common(p)
    p.set_defaults(fn=cmd_train_embeddings)

    p = sub.add_parser("train", help="run training stages")
    common(p)
    p.add_argument("--stage", default="all",
                   choices=list(tr.STAGES) + ["all"])
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p, checkpoint=True)
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--report", help="report output path")
    p.add_argument("--np", dest="np_single", type=int, default=None,
                   help="candidate paths fed to the decoder")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="evaluate across candidate-path counts")
    common(p, checkpoint=True)
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--np", default="1,5,10", help="comma-separated path counts")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("chat", help="interactive loop against a checkpoint")
    common(p, checkpoint=True)
    p.set_defaults(fn=cmd_chat)

    p = sub.add_parser("plot", help="render sweep plots from report files")
    p.add_argument("--reports", required=True,
                   help="comma-separated report_np*.txt files")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ParseError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted; partial checkpoints are per-epoch in the out dir",
              file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
