"""Command-line entry point: one subcommand per pipeline stage.

Every command prints a JSON summary (with input/output digests) on stdout
and exits 0; failures print a JSON error naming the stage and artifact on
stderr and exit 1. Option values resolve as: command-line flag, then the
``--config`` JSON file, then built-in defaults.
"""

from __future__ import annotations

import argparse
import errno
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .checkpoint import Checkpoint
from .ensemble import EnsembleConfig, NORMALIZATIONS, member_metrics, merge_files, parse_member, write_submission
from .evaluation import (
    evaluate,
    item_counts,
    item_index,
    predict_topk,
    read_topk,
    truths_from_sessions,
    write_topk,
)
from .ingest import COVEO_GINI, SyntheticConfig, calibrate_zipf_exponent, corpus_stats, generate_synthetic
from .model import CAUSAL, MASKED, SessionTransformer
from .pipeline import (
    MODEL_PRESETS,
    PRESETS,
    PipelineConfig,
    analyze_stage,
    corpus_model_config,
    digests,
    file_digest,
    read_dataset,
    run_preset,
    similarity_stage,
    stage_seed,
    validator,
    write_dataset,
    write_json,
)
from .preprocess import PreprocessSettings, SPLIT_TAGS, assign_folds, load_corpus, preprocess, save_corpus
from .training import TrainConfig, finetune_item_embeddings, pretrain

GLOBAL_DEFAULTS = {"seed": 0, "precision": 32, "jobs": 1}

DEFAULTS = {
    "synth": {"out": "data/raw", "num_sessions": 5000, "num_skus": 500, "num_page_urls": 50,
              "zipf_exponent": 1.2, "calibrate": False, "target_gini": COVEO_GINI},
    "stats": {"data": "data/raw"},
    "preprocess": {"data": "data/raw", "out": "data/encoded", "max_len": 30, "valid_weeks": 3.0,
                   "test_weeks": 0.0, "cap_threshold": 0, "folds": 5},
    "split": {"encoded": "data/encoded", "folds": 5},
    "train": {"encoded": "data/encoded", "out": "checkpoints/model.pretrain.ckpt", "scheme": MASKED,
              "size": "base", "epochs": 10, "lr": 3e-3, "batch_size": 64, "mask_probability": 0.2,
              "optimizer": "adam", "image_vectors": True, "search_context": False,
              "preset": "eval-regime", "fold": None},
    "finetune": {"checkpoint": "checkpoints/model.pretrain.ckpt", "encoded": "data/encoded",
                 "out": "checkpoints/model.ckpt", "tag": "valid_first_half", "epochs": 1, "lr": 1e-3,
                 "batch_size": 64, "freeze": []},
    "predict": {"checkpoint": "checkpoints/model.ckpt", "encoded": "data/encoded",
                "tag": "valid_first_half", "k": 100, "out": "predictions/model.topk.jsonl"},
    "evaluate": {"predictions": "predictions/model.topk.jsonl", "encoded": "data/encoded",
                 "tag": "valid_second_half", "cutoff": 20, "f1_k": 20, "out": None},
    "ensemble": {"member": [], "norm": "softmax-prob", "k": 100, "out": "predictions/ensemble.topk.jsonl",
                 "encoded": None, "tag": "valid_second_half"},
    "analyze": {"predictions": "predictions/model.topk.jsonl", "encoded": "data/encoded",
                "data": "data/raw", "tag": "valid_second_half", "input_tag": "valid_first_half",
                "seen_tags": ["train", "valid_first_half"], "out": "reports/analysis"},
    "pipeline": {"preset": "eval-regime", "workdir": "run"},
}


class StageError(Exception):
    def __init__(self, message: str, artifact: str | None = None):
        super().__init__(message)
        self.artifact = artifact


def need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(errno.ENOENT, f"missing {what}", str(p))
    return p


def _out(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _encoded_digests(d) -> dict:
    return digests(sorted(p for p in Path(d).iterdir() if p.is_file()))


# --------------------------------------------------------------------------
# commands


def cmd_synth(o: dict) -> dict:
    cfg = SyntheticConfig(num_sessions=o["num_sessions"], num_skus=o["num_skus"],
                          num_page_urls=o["num_page_urls"], zipf_exponent=o["zipf_exponent"],
                          seed=stage_seed(o["seed"], "synth"))
    achieved = None
    if o["calibrate"]:
        cfg, achieved = calibrate_zipf_exponent(cfg, o["target_gini"])
    out = write_dataset(generate_synthetic(cfg), o["out"])
    return {"config": cfg.to_dict(), "calibrated_gini": achieved, "outputs": out}


def cmd_stats(o: dict) -> dict:
    data = read_dataset(need(o["data"], "raw data directory"))
    return {"inputs": _encoded_digests(o["data"]), "stats": corpus_stats(data).to_dict()}


def cmd_preprocess(o: dict) -> dict:
    data = read_dataset(need(o["data"], "raw data directory"))
    settings = PreprocessSettings(max_len=o["max_len"], valid_weeks=o["valid_weeks"], test_weeks=o["test_weeks"],
                                  cap_threshold=o["cap_threshold"], folds=o["folds"],
                                  seed=stage_seed(o["seed"], "folds"))
    corpus = preprocess(data, settings)
    paths = save_corpus(corpus, o["out"])
    return {"inputs": _encoded_digests(o["data"]), "settings": asdict(settings), "report": corpus.report,
            "outputs": digests(paths.values())}


def cmd_split(o: dict) -> dict:
    d = need(o["encoded"], "encoded corpus")
    corpus = load_corpus(d)
    plan = assign_folds({s.session_id for s in corpus.sessions}, o["folds"], stage_seed(o["seed"], "folds"))
    path = d / "folds.json"
    path.write_text(json.dumps(plan.to_dict(), sort_keys=True))
    return {"inputs": digests([d / "sessions.jsonl"]), "fold_sizes": plan.sizes(), "outputs": digests([path])}


def cmd_train(o: dict) -> dict:
    d = need(o["encoded"], "encoded corpus")
    corpus = load_corpus(d)
    meta = item_index(corpus.vocab)
    if o["preset"] == "eval-regime":
        sessions = corpus.by_tag("train")
    elif o["preset"] == "submission-regime":
        sessions = corpus.by_tag("train", "valid_first_half", "valid_second_half")
    else:
        raise ValueError(f"unknown preset {o['preset']!r}")
    stage = "pretrain"
    if o["fold"] is not None:
        if corpus.fold_plan is None:
            raise StageError("--fold given but the corpus has no fold plan", str(d / "folds.json"))
        if not 0 <= o["fold"] < corpus.fold_plan.k:
            raise ValueError(f"fold {o['fold']} outside 0..{corpus.fold_plan.k - 1}")
        sessions = [s for s in sessions if corpus.fold_plan.folds[s.session_id] != o["fold"]]
        stage = f"pretrain:fold{o['fold']}"
    if o["size"] not in MODEL_PRESETS:
        raise ValueError(f"unknown model size {o['size']!r}; choose from {sorted(MODEL_PRESETS)}")
    mc = corpus_model_config(corpus, scheme=o["scheme"], precision=o["precision"], max_len=o["max_len"],
                             use_image_vectors=o["image_vectors"], use_search_context=o["search_context"],
                             frequency_capped=corpus.report.get("cap_threshold", 0) > 0,
                             **MODEL_PRESETS[o["size"]])
    tc = TrainConfig(learning_rate=o["lr"], epochs=o["epochs"], batch_size=o["batch_size"],
                     mask_probability=o["mask_probability"], optimizer=o["optimizer"],
                     seed=stage_seed(o["seed"], stage))
    validate = None
    if o["preset"] == "eval-regime" and corpus.by_tag("valid_second_half"):
        validate = validator(corpus.by_tag("valid_first_half"),
                             truths_from_sessions(corpus.by_tag("valid_second_half")), meta, 100)
    model = SessionTransformer(mc, seed=stage_seed(o["seed"], "init"))
    ckpt = pretrain(model, sessions, tc, validate=validate, meta=meta)
    out = _out(o["out"])
    ckpt.save(out)
    return {"inputs": _encoded_digests(d), "variant": mc.variant_name, "sessions": len(sessions),
            "history": ckpt.state["history"], "best_epoch": ckpt.state["best_epoch"],
            "outputs": digests([out])}


def cmd_finetune(o: dict) -> dict:
    ckpt = Checkpoint.load(need(o["checkpoint"], "checkpoint"))
    d = need(o["encoded"], "encoded corpus")
    sessions = load_corpus(d).by_tag(o["tag"])
    if not sessions:
        raise StageError(f"no sessions tagged {o['tag']!r}", str(d / "sessions.jsonl"))
    tc = TrainConfig(learning_rate=o["lr"], epochs=o["epochs"], batch_size=o["batch_size"],
                     freeze_set=list(o["freeze"]), seed=stage_seed(o["seed"], "finetune"))
    tuned = finetune_item_embeddings(ckpt, sessions, tc)
    out = _out(o["out"])
    tuned.save(out)
    return {"inputs": {**digests([o["checkpoint"]]), **_encoded_digests(d)}, "sessions": len(sessions),
            "outputs": digests([out])}


def cmd_predict(o: dict) -> dict:
    ckpt = Checkpoint.load(need(o["checkpoint"], "checkpoint"))
    d = need(o["encoded"], "encoded corpus")
    sessions = load_corpus(d).by_tag(o["tag"])
    if not sessions:
        raise StageError(f"no sessions tagged {o['tag']!r}", str(d / "sessions.jsonl"))
    lists = predict_topk(ckpt, sessions, o["k"])
    out = _out(o["out"])
    write_topk(lists, out, o["k"], {"checkpoint": file_digest(o["checkpoint"])})
    return {"inputs": {**digests([o["checkpoint"]]), **_encoded_digests(d)}, "sessions": len(lists),
            "outputs": digests([out])}


def _truths(encoded, tag):
    d = need(encoded, "encoded corpus")
    hidden = load_corpus(d).by_tag(tag)
    if not hidden:
        raise StageError(f"no ground-truth sessions tagged {tag!r}", str(d / "sessions.jsonl"))
    return truths_from_sessions(hidden)


def cmd_evaluate(o: dict) -> dict:
    preds = read_topk(need(o["predictions"], "predictions file"))
    report = evaluate(preds, _truths(o["encoded"], o["tag"]), o["cutoff"], o["f1_k"])
    out = {}
    if o["out"]:
        write_json(report.to_dict(), _out(o["out"]))
        out = digests([o["out"]])
    return {"inputs": {**digests([o["predictions"]]), **_encoded_digests(o["encoded"])},
            "metrics": report.summary(), "outputs": out}


def cmd_ensemble(o: dict) -> dict:
    members = [parse_member(m) for m in o["member"]]
    for path, _ in members:
        need(path, "ensemble member predictions")
    cfg = EnsembleConfig(members, o["k"], o["norm"])
    merged = merge_files(cfg)
    out = _out(o["out"])
    write_submission(merged, out, cfg.k)
    summary = {"inputs": digests([p for p, _ in members]), "members": cfg.members, "norm": cfg.norm,
               "outputs": digests([out])}
    if o["encoded"]:
        truths = _truths(o["encoded"], o["tag"])
        summary["metrics"] = member_metrics([(p, read_topk(p)) for p, _ in members], merged, truths)
    return summary


def cmd_analyze(o: dict) -> dict:
    preds = read_topk(need(o["predictions"], "predictions file"))
    d = need(o["encoded"], "encoded corpus")
    corpus = load_corpus(d)
    data = read_dataset(need(o["data"], "raw data directory"))
    truths = _truths(d, o["tag"])
    report = evaluate(preds, truths)
    seen = item_counts(corpus.by_tag(*o["seen_tags"]))
    out = Path(o["out"])
    result = analyze_stage(report, preds, truths, corpus.by_tag(o["input_tag"]), seen, data, out)
    sim = similarity_stage(data, out)
    return {"inputs": {**digests([o["predictions"]]), **_encoded_digests(d)},
            "frequency_correlation": result["frequency_correlation"],
            "similarity_per_length": sim["per_length"],
            "outputs": {**result["outputs"], **sim["outputs"]}}


def cmd_pipeline(o: dict) -> dict:
    if o["preset"] not in PRESETS:
        raise ValueError(f"unknown preset {o['preset']!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[o["preset"]]()
    cfg = PipelineConfig.from_dict(o.get("_file", {}), base=cfg)
    for key in ("seed", "precision", "jobs", "workdir"):
        if key in o["_flags"] or key not in o.get("_file", {}):
            setattr(cfg, key, o[key])
    summary = run_preset(o["preset"], cfg)
    return {"preset": o["preset"], "results": summary["results"],
            "outputs": digests([Path(cfg.workdir) / "reports" / "summary.json"])}


COMMANDS = {
    "synth": cmd_synth, "stats": cmd_stats, "preprocess": cmd_preprocess, "split": cmd_split,
    "train": cmd_train, "finetune": cmd_finetune, "predict": cmd_predict, "evaluate": cmd_evaluate,
    "ensemble": cmd_ensemble, "analyze": cmd_analyze, "pipeline": cmd_pipeline,
}


# --------------------------------------------------------------------------
# argument parsing


def _bool_flag(p, name, help):
    p.add_argument(f"--{name}", dest=name.replace("-", "_"), action=argparse.BooleanOptionalAction, help=help)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, help="global seed (default 0)")
    common.add_argument("--precision", type=int, choices=(32, 64), help="float width (default 32)")
    common.add_argument("--jobs", type=int, help="worker processes for fold training (default 1)")
    common.add_argument("--config", help="JSON file of option values")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="sessrec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help):
        return sub.add_parser(name, help=help, parents=[common], argument_default=argparse.SUPPRESS)

    p = add("synth", "generate a synthetic dataset")
    p.add_argument("--out")
    p.add_argument("--num-sessions", type=int)
    p.add_argument("--num-skus", type=int)
    p.add_argument("--num-page-urls", type=int)
    p.add_argument("--zipf-exponent", type=float)
    _bool_flag(p, "calibrate", "bisect the Zipf exponent to hit --target-gini")
    p.add_argument("--target-gini", type=float)

    p = add("stats", "corpus statistics")
    p.add_argument("--data")

    p = add("preprocess", "encode raw data into model-ready sessions")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--max-len", type=int)
    p.add_argument("--valid-weeks", type=float)
    p.add_argument("--test-weeks", type=float)
    p.add_argument("--cap-threshold", type=int, help="frequency cap (0 disables)")
    p.add_argument("--folds", type=int)

    p = add("split", "reassign out-of-fold session folds")
    p.add_argument("--encoded")
    p.add_argument("--folds", type=int)

    p = add("train", "pre-train a model")
    p.add_argument("--encoded")
    p.add_argument("--out")
    p.add_argument("--scheme", choices=(MASKED, CAUSAL))
    p.add_argument("--size", choices=sorted(MODEL_PRESETS))
    p.add_argument("--max-len", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--mask-probability", type=float)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    _bool_flag(p, "image-vectors", "use image vectors as input features")
    _bool_flag(p, "search-context", "add the search-query term to the context")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--fold", type=int, help="train on everything outside this fold")

    p = add("finetune", "fine-tune only the item embeddings")
    p.add_argument("--checkpoint")
    p.add_argument("--encoded")
    p.add_argument("--out")
    p.add_argument("--tag", choices=SPLIT_TAGS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--freeze", action="append", help="parameter-name pattern to freeze (repeatable)")

    p = add("predict", "top-K lists for input sessions")
    p.add_argument("--checkpoint")
    p.add_argument("--encoded")
    p.add_argument("--tag", choices=SPLIT_TAGS)
    p.add_argument("--k", type=int)
    p.add_argument("--out")

    p = add("evaluate", "MRR and F1 of a predictions file")
    p.add_argument("--predictions")
    p.add_argument("--encoded")
    p.add_argument("--tag", choices=SPLIT_TAGS)
    p.add_argument("--cutoff", type=int)
    p.add_argument("--f1-k", type=int)
    p.add_argument("--out")

    p = add("ensemble", "weighted score-sum of prediction files")
    p.add_argument("--member", action="append", help="PATH[:WEIGHT] (repeatable)")
    p.add_argument("--norm", choices=NORMALIZATIONS)
    p.add_argument("--k", type=int)
    p.add_argument("--out")
    p.add_argument("--encoded", help="report member and merged metrics against this corpus")
    p.add_argument("--tag", choices=SPLIT_TAGS)

    p = add("analyze", "breakdown tables and similarity analysis")
    p.add_argument("--predictions")
    p.add_argument("--encoded")
    p.add_argument("--data")
    p.add_argument("--tag", choices=SPLIT_TAGS)
    p.add_argument("--input-tag", choices=SPLIT_TAGS)
    p.add_argument("--seen-tags", nargs="+", choices=SPLIT_TAGS)
    p.add_argument("--out")

    p = add("pipeline", "run a full preset end to end")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--workdir")
    return parser


def resolve(command: str, flags: dict, file_values: dict) -> dict:
    """flags > config file > defaults."""
    known = {**GLOBAL_DEFAULTS, **DEFAULTS[command]}
    if command == "train":
        known.setdefault("max_len", 30)
    unknown = set(file_values) - set(known)
    if unknown and command != "pipeline":
        raise ValueError(f"unknown config keys for {command}: {sorted(unknown)}")
    opts = {**known, **{k: v for k, v in file_values.items() if k in known}, **flags}
    return opts


def _load_config(path) -> dict:
    p = need(path, "config file")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise StageError(f"config is not valid JSON: {e}", str(p)) from e
    if not isinstance(cfg, dict):
        raise StageError("config must be a JSON object", str(p))
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    command = args.command
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = _load_config(args.config) if getattr(args, "config", None) else {}
        if command == "pipeline":
            opts = resolve(command, flags, {k: v for k, v in file_values.items()
                                            if k in ("seed", "precision", "jobs", "workdir", "preset")})
            opts["_file"] = {k: v for k, v in file_values.items() if k != "preset"}
            opts["_flags"] = set(flags)
        else:
            # a config file may hold one section per command or flat keys
            if set(file_values) & set(COMMANDS):
                section = file_values.get(command, {})
            else:
                section = file_values
            opts = resolve(command, flags, section)
        summary = COMMANDS[command](opts)
    except Exception as e:  # noqa: BLE001 - every failure becomes a structured error
        artifact = getattr(e, "artifact", None) or getattr(e, "filename", None)
        err = {"status": "error", "stage": command, "error": type(e).__name__,
               "message": e.strerror if isinstance(e, OSError) and e.strerror else str(e),
               "artifact": str(artifact) if artifact else None}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "stage": command, **summary}, sort_keys=True, allow_nan=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
