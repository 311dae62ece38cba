"""End-to-end runs wiring every stage together, with per-stage seeds and
file digests recorded for provenance."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

from . import analysis
from .checkpoint import Checkpoint
from .ensemble import member_metrics, merge, write_submission
from .evaluation import (
    evaluate,
    item_counts,
    item_index,
    popularity_topk,
    predict_topk,
    truths_from_sessions,
    write_topk,
)
from .ingest import (
    COVEO_GINI,
    SessionEventLog,
    SyntheticConfig,
    calibrate_zipf_exponent,
    corpus_stats,
    generate_synthetic,
    load_dataset,
    save_dataset,
)
from .model import CAUSAL, MASKED, ModelConfig, SessionTransformer
from .preprocess import EncodedCorpus, PreprocessSettings, preprocess, save_corpus
from .training import TrainConfig, finetune_item_embeddings, pretrain, train_oof

log = logging.getLogger(__name__)

DATA_FILES = ("browsing.csv", "search.jsonl", "skus.csv")

# Desk-scale hyperparameter presets (chosen for a single CPU, not taken from
# any published configuration).
MODEL_PRESETS = {
    "small": {"d": 32, "layers": 1, "heads": 2},
    "base": {"d": 64, "layers": 2, "heads": 2},
    "wide": {"d": 96, "layers": 2, "heads": 4},
}


def stage_seed(seed: int, stage: str) -> int:
    """Fixed hash of (global seed, stage name) -> 31-bit seed."""
    h = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return int.from_bytes(h[:4], "little") & 0x7FFFFFFF


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def digests(paths) -> dict[str, str]:
    return {Path(p).name: file_digest(p) for p in paths}


def dataset_paths(directory) -> list[Path]:
    d = Path(directory)
    return [d / name for name in DATA_FILES]


def write_dataset(log_: SessionEventLog, directory) -> dict[str, str]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = dataset_paths(d)
    save_dataset(log_, *paths)
    return digests(paths)


def read_dataset(directory) -> SessionEventLog:
    paths = dataset_paths(directory)
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(2, "missing raw data file", str(p))
    return load_dataset(*paths)


def write_json(obj, path) -> str:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n")
    return file_digest(path)


def deep_update(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_update(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class PipelineConfig:
    workdir: str = "run"
    seed: int = 0
    precision: int = 32
    jobs: int = 1
    synthetic: dict = field(default_factory=lambda: SyntheticConfig().to_dict())
    calibrate: bool = True
    target_gini: float = COVEO_GINI
    preprocess: dict = field(default_factory=lambda: asdict(PreprocessSettings()))
    model: dict = field(default_factory=lambda: dict(MODEL_PRESETS["base"]))
    train: dict = field(default_factory=lambda: TrainConfig(learning_rate=3e-3, epochs=10).to_dict())
    finetune: dict = field(default_factory=lambda: TrainConfig(learning_rate=1e-3, epochs=1).to_dict())
    variants: list[dict] = field(default_factory=lambda: [
        {"name": "masked", "scheme": MASKED},
        {"name": "causal", "scheme": CAUSAL},
        {"name": "masked_capped", "scheme": MASKED, "frequency_capped": True},
    ])
    cap_threshold: int = 5
    k: int = 100
    ensemble_norm: str = "softmax-prob"
    oof: bool = False

    def to_dict(self) -> dict:
        # through JSON so tuples come back as lists and the round trip is exact
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict, base: "PipelineConfig | None" = None) -> "PipelineConfig":
        """Overlay ``d`` on ``base`` (default: a fresh default config)."""
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(**deep_update((base or cls()).to_dict(), d))


def portable(cfg: PipelineConfig) -> dict:
    """Config as recorded in reports: without the output location, so reruns
    elsewhere produce identical bytes."""
    d = cfg.to_dict()
    d.pop("workdir")
    return d


def submission_defaults() -> PipelineConfig:
    cfg = PipelineConfig()
    cfg.preprocess["test_weeks"] = 2
    cfg.variants = [{"name": "masked", "scheme": MASKED}, {"name": "causal", "scheme": CAUSAL}]
    return cfg


PRESETS = {"eval-regime": PipelineConfig, "submission-regime": submission_defaults}


# --------------------------------------------------------------------------
# stages


def synth_stage(cfg: PipelineConfig, out_dir: Path) -> tuple[SessionEventLog, dict]:
    scfg = SyntheticConfig.from_dict({**cfg.synthetic, "seed": stage_seed(cfg.seed, "synth")})
    achieved = None
    if cfg.calibrate:
        scfg, achieved = calibrate_zipf_exponent(scfg, cfg.target_gini)
    out = write_dataset(generate_synthetic(scfg), out_dir)
    data = read_dataset(out_dir)
    stats = corpus_stats(data)
    return data, {"config": scfg.to_dict(), "calibrated_gini": achieved, "outputs": out,
                  "stats": stats.to_dict()}


def preprocess_stage(cfg: PipelineConfig, data: SessionEventLog, out_dir: Path,
                     cap_threshold: int = 0) -> tuple[EncodedCorpus, dict]:
    settings = PreprocessSettings(**{**cfg.preprocess, "cap_threshold": cap_threshold,
                                     "seed": stage_seed(cfg.seed, "folds")})
    corpus = preprocess(data, settings)
    paths = save_corpus(corpus, out_dir)
    return corpus, {"settings": asdict(settings), "report": corpus.report,
                    "outputs": digests(paths.values())}


def corpus_model_config(corpus: EncodedCorpus, **kw) -> ModelConfig:
    dims = corpus.report.get("vector_dims")
    if dims is None:
        raise ValueError("encoded corpus report lacks vector_dims; re-run preprocess")
    return ModelConfig.for_corpus(corpus.vocab, corpus.stats, dims["description"], dims["image"],
                                  dims["query"], **kw)


def model_config(cfg: PipelineConfig, variant: dict, corpus: EncodedCorpus) -> ModelConfig:
    kw = {k: v for k, v in variant.items() if k != "name"}
    return corpus_model_config(corpus, precision=cfg.precision, max_len=corpus_max_len(cfg), **{**cfg.model, **kw})


def corpus_max_len(cfg: PipelineConfig) -> int:
    return int(cfg.preprocess.get("max_len", PreprocessSettings().max_len))


def train_config(cfg: PipelineConfig, section: str, stage: str) -> TrainConfig:
    return TrainConfig.from_dict({**getattr(cfg, section), "seed": stage_seed(cfg.seed, stage)})


def validator(sessions, truths, meta, k):
    def run(model: SessionTransformer) -> float:
        return evaluate(predict_topk(model, sessions, k, meta), truths).mrr
    return run


def analyze_stage(report, predictions, truths, inputs, seen_counts, data, out_dir: Path) -> dict:
    """Per-length, per-popularity, per-price tables and the frequency correlation."""
    out_dir.mkdir(parents=True, exist_ok=True)
    tables = {
        "by_length": analysis.analyze_by_session_length(
            report, analysis.session_lengths(inputs), seen_counts),
        "by_popularity": analysis.mrr_by_popularity_bucket(report, seen_counts),
        "by_price": analysis.mrr_by_price_bucket(report, analysis.sku_price_buckets(data)),
    }
    files = []
    for name, rows in tables.items():
        analysis.write_csv(rows, out_dir / f"{name}.csv")
        files.append(out_dir / f"{name}.csv")
    try:
        top, full = analysis.frequency_correlation(predictions, truths)
    except ValueError:
        top = full = float("nan")
    summary = {"frequency_correlation": {"top50": top, "all": full},
               "partition_check": {name: analysis.weighted_mrr(rows) for name, rows in tables.items()},
               "tables": tables}
    write_json(summary, out_dir / "analysis.json")
    files.append(out_dir / "analysis.json")
    return {"frequency_correlation": summary["frequency_correlation"],
            "by_popularity": tables["by_popularity"], "outputs": digests(files)}


def similarity_stage(data: SessionEventLog, out_dir: Path) -> dict:
    sim = analysis.intra_session_similarity(data)
    out_dir.mkdir(parents=True, exist_ok=True)
    analysis.write_csv(sim.per_length, out_dir / "similarity_by_length.csv")
    rows = []
    for key, h in sim.histograms.items():
        for lo, hi, c in zip(h["edges"], h["edges"][1:], h["counts"]):
            rows.append({"vector": key, "lo": lo, "hi": hi, "sessions": c})
    analysis.write_csv(rows, out_dir / "similarity_histogram.csv")
    means = [r["description"] for r in sim.per_length]
    return {"per_length": sim.per_length, "skipped": sim.skipped,
            "description_strictly_decreasing": analysis.strictly_decreasing(means),
            "outputs": digests([out_dir / "similarity_by_length.csv", out_dir / "similarity_histogram.csv"])}


# --------------------------------------------------------------------------
# presets


def run_eval_regime(cfg: PipelineConfig) -> dict:
    """synth -> preprocess -> pretrain(train) -> finetune(valid first halves)
    -> predict -> evaluate -> analyze, for every variant, plus baseline and ensemble."""
    root = Path(cfg.workdir)
    summary: dict = {"preset": "eval-regime", "config": portable(cfg), "stages": {}}
    stages = summary["stages"]
    data, stages["synth"] = synth_stage(cfg, root / "raw")
    corpora = {False: None, True: None}
    corpora[False], stages["preprocess"] = preprocess_stage(cfg, data, root / "encoded")
    if any(v.get("frequency_capped") for v in cfg.variants):
        corpora[True], stages["preprocess_capped"] = preprocess_stage(
            cfg, data, root / "encoded_capped", cfg.cap_threshold)

    base = corpora[False]
    inputs = base.by_tag("valid_first_half")
    hidden = base.by_tag("valid_second_half")
    truths = truths_from_sessions(hidden)
    seen = item_counts(base.by_tag("train", "valid_first_half"))
    preds_dir, reports_dir, ckpt_dir = root / "predictions", root / "reports", root / "checkpoints"
    for d in (preds_dir, reports_dir, ckpt_dir):
        d.mkdir(parents=True, exist_ok=True)

    pop = popularity_topk(seen, [s.session_id for s in inputs], cfg.k)
    pop_path = preds_dir / "popularity.topk.jsonl"
    write_topk(pop, pop_path, cfg.k, {"model": "popularity"})
    pop_report = evaluate(pop, truths)
    write_json(pop_report.to_dict(), reports_dir / "popularity.eval.json")
    results = {"popularity": pop_report.summary()}
    stages["popularity"] = {"outputs": digests([pop_path, reports_dir / "popularity.eval.json"]),
                            "metrics": pop_report.summary()}

    member_preds = {}
    for variant in cfg.variants:
        name = variant["name"]
        corpus = corpora[bool(variant.get("frequency_capped"))]
        meta = item_index(corpus.vocab)
        v_inputs = corpus.by_tag("valid_first_half")
        mc = model_config(cfg, variant, corpus)
        model = SessionTransformer(mc, seed=stage_seed(cfg.seed, f"init:{name}"))
        ckpt = pretrain(model, corpus.by_tag("train"), train_config(cfg, "train", f"pretrain:{name}"),
                        validate=validator(v_inputs, truths, meta, cfg.k), meta=meta)
        pre_path = ckpt_dir / f"{name}.pretrain.ckpt"
        ckpt.save(pre_path)
        tuned = finetune_item_embeddings(ckpt, v_inputs, train_config(cfg, "finetune", f"finetune:{name}"))
        ft_path = ckpt_dir / f"{name}.ckpt"
        tuned.save(ft_path)
        preds = predict_topk(tuned, v_inputs, cfg.k)
        member_preds[name] = preds
        pred_path = preds_dir / f"{name}.topk.jsonl"
        write_topk(preds, pred_path, cfg.k, {"model": name, "variant": mc.variant_name})
        report = evaluate(preds, truths)
        pre_report = evaluate(predict_topk(ckpt, v_inputs, cfg.k), truths)
        eval_path = reports_dir / f"{name}.eval.json"
        write_json(report.to_dict(), eval_path)
        ana = analyze_stage(report, preds, truths, v_inputs, seen, data, reports_dir / name)
        results[name] = report.summary()
        stages[name] = {
            "variant": mc.variant_name,
            "inputs": {"train_sessions": len(corpus.by_tag("train")), "finetune_sessions": len(v_inputs)},
            "outputs": digests([pre_path, ft_path, pred_path, eval_path]),
            "best_epoch": ckpt.state.get("best_epoch"),
            "metrics_before_finetune": pre_report.summary(),
            "metrics": report.summary(),
            "analysis": ana,
        }
        log.info("%s: MRR %.4f F1 %.4f", name, report.mrr, report.f1)

    uncapped = [v["name"] for v in cfg.variants if not v.get("frequency_capped")]
    if len(uncapped) >= 2:
        merged = merge([(member_preds[n], 1.0) for n in uncapped], cfg.k, cfg.ensemble_norm)
        ens_path = preds_dir / "ensemble.topk.jsonl"
        write_topk(merged, ens_path, cfg.k, {"model": "ensemble", "members": uncapped})
        rows = member_metrics([(n, member_preds[n]) for n in uncapped], merged, truths)
        analysis.write_csv(rows, reports_dir / "ensemble_members.csv")
        results["ensemble"] = evaluate(merged, truths).summary()
        stages["ensemble"] = {"members": uncapped, "norm": cfg.ensemble_norm, "metrics": rows,
                              "outputs": digests([ens_path, reports_dir / "ensemble_members.csv"])}

    stages["similarity"] = similarity_stage(data, reports_dir)
    summary["results"] = results
    write_json(summary, reports_dir / "summary.json")
    return summary


def run_submission_regime(cfg: PipelineConfig) -> dict:
    """synth -> preprocess -> pretrain(train + valid) -> finetune(test first halves) -> predict.

    With ``oof`` each variant is a k-fold ensemble of out-of-fold models;
    variants are then merged into one submission file.
    """
    root = Path(cfg.workdir)
    if not cfg.preprocess.get("test_weeks"):
        raise ValueError("submission regime needs preprocess.test_weeks > 0")
    summary: dict = {"preset": "submission-regime", "config": portable(cfg), "stages": {}}
    stages = summary["stages"]
    data, stages["synth"] = synth_stage(cfg, root / "raw")
    corpus, stages["preprocess"] = preprocess_stage(cfg, data, root / "encoded")
    meta = item_index(corpus.vocab)
    pretrain_sessions = corpus.by_tag("train", "valid_first_half", "valid_second_half")
    inputs = corpus.by_tag("test_first_half")
    if not inputs:
        raise ValueError("no test sessions; increase preprocess.test_weeks")
    truths = truths_from_sessions(corpus.by_tag("test_second_half"))
    ckpt_dir, preds_dir, reports_dir = root / "checkpoints", root / "predictions", root / "reports"
    for d in (preds_dir, reports_dir, ckpt_dir):
        d.mkdir(parents=True, exist_ok=True)

    members = []
    results = {}
    for variant in cfg.variants:
        name = variant["name"]
        if variant.get("frequency_capped"):
            raise ValueError("capped variants are only supported in the eval regime")
        mc = model_config(cfg, variant, corpus)
        ft_cfg = train_config(cfg, "finetune", f"finetune:{name}")
        if cfg.oof:
            ckpts = train_oof(pretrain_sessions, corpus.fold_plan, mc,
                              train_config(cfg, "train", f"pretrain:{name}"), inputs, ft_cfg,
                              jobs=cfg.jobs, meta=meta)
        else:
            model = SessionTransformer(mc, seed=stage_seed(cfg.seed, f"init:{name}"))
            pre = pretrain(model, pretrain_sessions, train_config(cfg, "train", f"pretrain:{name}"), meta=meta)
            ckpts = [finetune_item_embeddings(pre, inputs, ft_cfg)]
        paths = []
        fold_preds = []
        for i, ck in enumerate(ckpts):
            p = ckpt_dir / f"{name}.fold{i}.ckpt" if cfg.oof else ckpt_dir / f"{name}.ckpt"
            ck.save(p)
            paths.append(p)
            fold_preds.append((predict_topk(ck, inputs, cfg.k), 1.0))
        preds = merge(fold_preds, cfg.k, cfg.ensemble_norm) if len(fold_preds) > 1 else fold_preds[0][0]
        pred_path = preds_dir / f"{name}.topk.jsonl"
        write_topk(preds, pred_path, cfg.k, {"model": name, "variant": mc.variant_name})
        members.append((name, preds))
        stages[name] = {"variant": mc.variant_name, "models": len(ckpts),
                        "outputs": digests(paths + [pred_path])}
        if truths:
            results[name] = evaluate(preds, truths).summary()
    final = merge([(p, 1.0) for _, p in members], cfg.k, cfg.ensemble_norm) if len(members) > 1 else members[0][1]
    sub_path = root / "submission.jsonl"
    write_submission(final, sub_path, cfg.k)
    stages["submission"] = {"members": [n for n, _ in members], "outputs": digests([sub_path])}
    if truths:
        results["ensemble"] = evaluate(final, truths).summary()
    summary["results"] = results
    write_json(summary, reports_dir / "summary.json")
    return summary


def run_preset(name: str, cfg: PipelineConfig) -> dict:
    if name == "eval-regime":
        return run_eval_regime(cfg)
    if name == "submission-regime":
        return run_submission_regime(cfg)
    raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")


def small_config(workdir, seed: int = 0, **overrides) -> PipelineConfig:
    """A seconds-scale configuration for smoke and determinism runs."""
    cfg = PipelineConfig(workdir=str(workdir), seed=seed, calibrate=False)
    cfg.synthetic.update(num_sessions=300, num_skus=60, num_page_urls=10, num_topics=5,
                         vector_dims=[4, 6, 6], zipf_exponent=1.284)
    cfg.model = {"d": 16, "layers": 1, "heads": 2}
    cfg.train.update(epochs=2, batch_size=32)
    cfg.finetune.update(epochs=1, batch_size=32)
    cfg.k = 20
    return replace(cfg, **overrides) if overrides else cfg
