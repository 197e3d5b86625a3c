#!/usr/bin/env python3
"""
Dynamic Attention Lab
Train toy transformers, attack them, and measure how dynamic attention
rectification, defensive dropout and their fusion hold up.

Usage:
    python main.py train  --config experiment.json
    python main.py attack --config experiment.json --seed 3
    python main.py eval   --config experiment.json --out-dir runs/seed3
    python main.py sweep  --config experiment.json
    python main.py replay --config experiment.json
"""

import argparse
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Dict, List, Optional, Tuple

import numpy as np

import evaluation
from attacks import GENERATION_GOAL, attack_many, read_archive, write_archive
from config import ENV_LOG_LEVEL, ExperimentConfig, load_experiment_config, m_ranges
from dynattn import DynamicMode
from errors import ConfigError, MissingArtifactError, TrainingError
from model import CLASSIFIER, SEQ2SEQ, ModelParams, Victim, load_checkpoint, save_checkpoint, train
from numerics import derive_seed, make_rng
from textdata import (CLASSIFICATION, SynonymTable, TriggerSpec, Vocabulary, build_vocab,
                      build_vocab_from_texts, default_synonyms, load_corpus, load_synonyms, poison,
                      synth_classification, synth_seq2seq)

__version__ = "1.0.0"

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_MISSING_ARTIFACT = 4

COMMANDS = ("train", "attack", "eval", "sweep", "replay")


def setup_logging(out_dir: Optional[str] = None, level: Optional[str] = None):
    """Set up logging to stdout and, when an output directory is known, to run.log inside it."""
    level_name = (level or os.getenv(ENV_LOG_LEVEL) or "INFO").upper()
    handlers = [logging.StreamHandler(sys.stdout)]
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        handlers.append(logging.FileHandler(os.path.join(out_dir, "run.log")))
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    versions: Dict[str, str]
    started: str
    finished: str = ""
    outputs: List[str] = field(default_factory=list)

    def write(self, out_dir: str) -> str:
        path = os.path.join(out_dir, f"manifest-{self.command}.json")
        tmp_path = f"{path}.tmp"
        with open(tmp_path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp_path, path)
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _versions() -> Dict[str, str]:
    import nltk
    return {"lab": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "nltk": nltk.__version__}


# ---------------------------------------------------------------------------
# Data and models
# ---------------------------------------------------------------------------

@dataclass
class RunData:
    train: object
    holdout: object
    vocab: Vocabulary
    synonyms: SynonymTable
    trigger: Optional[TriggerSpec] = None


def prepare_data(config: ExperimentConfig) -> RunData:
    """Corpus, train/holdout split, vocabulary and synonym table for a run document."""
    logger = logging.getLogger(__name__)
    data = config.data
    data_seed = derive_seed(config.seed, "data")

    if config.model.task == SEQ2SEQ:
        pairs = synth_seq2seq(data_seed, data.size)
        cut = len(pairs) - int(round(data.holdout_fraction * len(pairs)))
        train_pairs, holdout_pairs = pairs[:cut], pairs[cut:]
        vocab = build_vocab_from_texts([s for s, _ in train_pairs] + [t for _, t in train_pairs], data.min_count)
        synonyms = load_synonyms(data.synonyms_path) if data.synonyms_path else default_synonyms("seq2seq")
        logger.info(f"[data] {len(train_pairs)} training pairs, {len(holdout_pairs)} held out, vocab {len(vocab)}")
        return RunData(train_pairs, holdout_pairs, vocab, synonyms)

    if data.source == "file":
        corpus = load_corpus(data.path)
    else:
        corpus = synth_classification(data_seed, data.size)
    train_corpus, holdout = corpus.split(data.holdout_fraction)

    trigger = None
    if data.poison is not None:
        trigger = TriggerSpec(data.poison.trigger, data.poison.target, data.poison.rate)
        train_corpus, poisoned = poison(train_corpus, trigger, make_rng(config.seed, "poison"))
        logger.info(f"[data] poisoned {len(poisoned)} training items")

    vocab = build_vocab(train_corpus, data.min_count)
    synonyms = load_synonyms(data.synonyms_path) if data.synonyms_path else default_synonyms(CLASSIFICATION)
    logger.info(f"[data] {len(train_corpus)} training items, {len(holdout)} held out, vocab {len(vocab)}")
    return RunData(train_corpus, holdout, vocab, synonyms, trigger)


def load_model(config: ExperimentConfig) -> Tuple[ModelParams, Vocabulary]:
    path = config.io.checkpoint_path
    if not os.path.exists(path):
        raise MissingArtifactError(f"checkpoint not found: {path} (run the train command first)")
    params, _, vocab = load_checkpoint(path)
    if vocab is None:
        raise MissingArtifactError(f"checkpoint {path} carries no vocabulary")
    return params, vocab


def holdout_items(run: RunData) -> List[Tuple[List[str], int]]:
    return evaluation.items_from_corpus(run.holdout)


def attack_sample(config: ExperimentConfig, params: ModelParams, run: RunData):
    """Held-out texts the static model gets right (classification) or held-out sources (generation)."""
    if config.model.task == SEQ2SEQ:
        return [(source.split(), None) for source, _ in run.holdout[: config.attack.sample]]
    return evaluation.eligible_items(params, run.vocab, holdout_items(run), config.attack.sample)


def _write_report(report, out_dir: str, name: str, outputs: List[str]):
    json_path = os.path.join(out_dir, f"{name}.json")
    csv_path = os.path.join(out_dir, f"{name}.csv")
    evaluation.write_json_report(report, json_path)
    evaluation.write_csv_rows(report, csv_path)
    outputs.extend([json_path, csv_path])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(config: ExperimentConfig, outputs: List[str]):
    logger = logging.getLogger(__name__)
    run = prepare_data(config)
    classes = run.train.classes if config.model.task == CLASSIFIER else 2
    model_cfg = config.model.to_model_config(len(run.vocab), classes)
    hyper = config.model.to_train_hyper(derive_seed(config.seed, "train"))

    logger.info("[train] Step 1: training...")
    params = train(run.train, model_cfg, hyper, run.vocab)

    logger.info("[train] Step 2: saving checkpoint...")
    save_checkpoint(params, model_cfg, config.io.checkpoint_path, run.vocab)
    outputs.append(config.io.checkpoint_path)

    if config.model.task == CLASSIFIER:
        acc = evaluation.accuracy(params, run.vocab, holdout_items(run), threads=config.threads)
        logger.info(f"[train] held-out accuracy {acc}")
        print(f"✓ Held-out accuracy: {acc}")
        summary = {"heldout_accuracy": acc, "loss_history": params.history}
    else:
        report = evaluation.bleu_suite(params, run.vocab, DynamicMode.static(), run.holdout, threads=config.threads)
        print(f"✓ Held-out BLEU: {report.clean:.4f}")
        summary = {"heldout_bleu": report.clean, "loss_history": params.history}
    _write_report(summary, config.io.out_dir, "train", outputs)


def _surrogate_mode(config: ExperimentConfig, target: DynamicMode) -> DynamicMode:
    if config.attack.threat == "static-transfer":
        return DynamicMode.static()
    return target


def cmd_attack(config: ExperimentConfig, outputs: List[str]):
    logger = logging.getLogger(__name__)
    params, vocab = load_model(config)
    run = prepare_data(config)
    run.vocab = vocab
    mode = config.defense.to_mode()
    attack_cfg = config.attack.to_attack_config()
    items = attack_sample(config, params, run)
    if not items:
        raise ConfigError("no held-out text is eligible for attack", field="attack.sample")

    threat = config.attack.threat
    logger.info(f"[attack] threat={threat}, kind={attack_cfg.kind}, target={mode.describe()}, texts={len(items)}")
    if threat == "query":
        if attack_cfg.goal == GENERATION_GOAL:
            records = attack_many(items, lambda ctx: Victim(params, vocab, mode, ctx), attack_cfg,
                                  run.synonyms, config.seed, config.threads, label="query-generation")
            report = evaluation.MetricsReport(
                mode=mode.describe(), attack=attack_cfg.kind, seed=config.seed,
                asr_q=evaluation.Rate(sum(r.success for r in records), len(records)),
                mean_queries=float(np.mean([r.queries for r in records])))
        else:
            clean = holdout_items(run)[: config.attack.sample]
            report, records = evaluation.attack_suite(params, vocab, mode, attack_cfg, items, run.synonyms,
                                                      config.seed, config.threads, clean_items=clean)
    else:
        surrogate = _surrogate_mode(config, mode)
        surrogate_seed = derive_seed(config.seed, "surrogate")
        records = attack_many(items, lambda ctx: Victim(params, vocab, surrogate, ctx), attack_cfg,
                              run.synonyms, surrogate_seed, config.threads, label=f"surrogate-{surrogate.kind}")
        single, multi = evaluation.transfer_suite(records, params, vocab, mode, config.seed,
                                                  config.eval.replay_trials, config.threads)
        report = evaluation.MetricsReport(mode=mode.describe(), attack=attack_cfg.kind, seed=config.seed,
                                          asr_m=multi, mean_queries=float(np.mean([r.queries for r in records])))
        if threat == "static-transfer":
            report.asr_s = single
            report.per_attack["static_target_sanity"] = evaluation.to_jsonable(evaluation.transfer_rate(
                records, params, vocab, DynamicMode.static(), config.seed, 1, config.threads, "sanity"))
        else:
            report.asr_d = single
        report.per_attack[attack_cfg.kind] = {"attacked": len(records),
                                              "surrogate_successes": sum(r.success for r in records)}

    report.config = {"threat": threat, "attack": asdict(config.attack), "defense": asdict(config.defense)}
    write_archive(records, config.io.archive_path)
    outputs.append(config.io.archive_path)
    _write_report(report, config.io.out_dir, f"attack-{threat}", outputs)
    print(f"✓ {sum(r.success for r in records)}/{len(records)} adversarial texts archived to {config.io.archive_path}")


def _archive(config: ExperimentConfig):
    return read_archive(config.io.archive_path)


def run_suite(suite: str, config: ExperimentConfig, params: ModelParams, run: RunData, outputs: List[str]):
    """Run one evaluation suite and write its JSON and CSV reports."""
    logger = logging.getLogger(__name__)
    vocab, threads, seed = run.vocab, config.threads, config.seed
    mode = config.defense.to_mode()
    attack_cfg = config.attack.to_attack_config()
    out_dir = config.io.out_dir
    logger.info(f"[eval] suite '{suite}' on {mode.describe()}")

    if suite == "bleu":
        records = _archive(config) if os.path.exists(config.io.archive_path) else []
        report = evaluation.bleu_suite(params, vocab, mode, run.holdout, records, seed, threads)
    elif suite == "generation-sweep":
        report = evaluation.generation_sensitivity_sweep(params, vocab, _archive(config), run.holdout, seed, threads)
    elif config.model.task == SEQ2SEQ:
        raise ConfigError(f"suite '{suite}' needs a classifier", field="eval.suites")
    elif suite == "stability":
        records = [r for r in _archive(config) if r.success]
        clean = evaluation.eligible_items(params, vocab, holdout_items(run), config.eval.sample)
        adv = [(r.adversarial_words, r.orig_label) for r in records]
        report = evaluation.stability(params, vocab, mode, clean, adv, config.eval.trials, seed, threads)
    elif suite == "robustness":
        items = holdout_items(run)[: config.eval.texts]
        report = evaluation.statistical_robustness(params, vocab, mode, items, config.eval.rho, config.eval.mu_grid,
                                                   config.eval.copies, config.eval.noise_factor, seed, threads)
        curve_path = os.path.join(out_dir, "robustness-curve.csv")
        evaluation.write_curve_csv(report, curve_path)
        outputs.append(curve_path)
    elif suite == "sensitivity":
        clean = holdout_items(run)[: config.eval.sample]
        report = evaluation.sensitivity_sweep(params, vocab, _archive(config), clean, config.eval.betas,
                                              m_ranges(config), seed, threads)
    elif suite == "replacement":
        pairs = [(r.original_words, r.adversarial_words, r.orig_label) for r in _archive(config) if r.success]
        report = evaluation.replacement_experiment(params, vocab, pairs)
    elif suite == "trigger-asr":
        if run.trigger is None:
            raise ConfigError("trigger-asr needs a poisoned training set", field="data.poison")
        items = holdout_items(run)
        report = {
            "static": evaluation.trigger_asr(params, vocab, run.trigger, items, DynamicMode.static(), seed, threads),
            mode.describe(): evaluation.trigger_asr(params, vocab, run.trigger, items, mode, seed, threads),
        }
    elif suite == "transfer":
        single, multi = evaluation.transfer_suite(_archive(config), params, vocab, mode, seed,
                                                  config.eval.replay_trials, threads)
        report = {"mode": mode.describe(), "single_trial": single, "multi_trial": multi,
                  "trials": config.eval.replay_trials}
    elif suite == "shift":
        shifted = synth_classification(derive_seed(seed, "shift"), config.eval.shift_size, shift=True)
        modes = {name: config.defense.to_mode(name) for name in config.eval.modes}
        items = evaluation.items_from_corpus(shifted)[: config.eval.sample]
        report = evaluation.shift_suite(params, vocab, modes, attack_cfg, items, run.synonyms, seed, threads)
    elif suite == "adaptive":
        items = evaluation.eligible_items(params, vocab, holdout_items(run), config.eval.sample)
        report = evaluation.adaptive_suite(params, vocab, mode, attack_cfg, items, run.synonyms, seed, threads)
    elif suite == "retrain":
        model_cfg = params.config
        items = holdout_items(run)[: config.eval.sample]
        report = evaluation.retrain_transfer_rate(run.train, vocab, model_cfg,
                                                  config.model.to_train_hyper(seed),
                                                  tuple(config.eval.retrain_seeds), attack_cfg, items,
                                                  run.synonyms, threads)
    elif suite == "attentive":
        report = evaluation.attentive_sentence_experiment(params, vocab, _archive(config), config.eval.mask_rate,
                                                          seed=seed)
    elif suite == "confidence":
        modes = {name: config.defense.to_mode(name) for name in config.eval.modes}
        report = evaluation.confidence_breakdown(_archive(config), params, vocab, modes, seed,
                                                 config.eval.confidence_edges, threads)
    else:
        raise ConfigError(f"unknown suite '{suite}'", field="eval.suites")

    _write_report(report, out_dir, f"eval-{suite}", outputs)
    print(f"✓ {suite}")


def cmd_eval(config: ExperimentConfig, outputs: List[str]):
    params, vocab = load_model(config)
    run = prepare_data(config)
    run.vocab = vocab
    for suite in config.eval.suites:
        run_suite(suite, config, params, run, outputs)


def cmd_sweep(config: ExperimentConfig, outputs: List[str]):
    """Sensitivity sweep once per seed in eval.seeds."""
    params, vocab = load_model(config)
    run = prepare_data(config)
    run.vocab = vocab
    records = _archive(config)
    for seed in config.eval.seeds:
        if config.model.task == SEQ2SEQ:
            rows = evaluation.generation_sensitivity_sweep(params, vocab, records, run.holdout, seed, config.threads)
        else:
            clean = holdout_items(run)[: config.eval.sample]
            rows = evaluation.sensitivity_sweep(params, vocab, records, clean, config.eval.betas, m_ranges(config),
                                                seed, config.threads)
        _write_report(rows, config.io.out_dir, f"sweep-seed{seed}", outputs)
        print(f"✓ seed {seed}: best cell {rows[0].label} (M={rows[0].m:.4f})")


def cmd_replay(config: ExperimentConfig, outputs: List[str]):
    params, vocab = load_model(config)
    mode = config.defense.to_mode()
    records = _archive(config)
    single, multi = evaluation.transfer_suite(records, params, vocab, mode, config.seed,
                                              config.eval.replay_trials, config.threads)
    report = {"mode": mode.describe(), "single_trial": single, "multi_trial": multi,
              "trials": config.eval.replay_trials, "records": len(records)}
    _write_report(report, config.io.out_dir, "replay", outputs)
    print(f"✓ Replay on {mode.describe()}: single {single}, {config.eval.replay_trials} trials {multi}")


HANDLERS = {"train": cmd_train, "attack": cmd_attack, "eval": cmd_eval, "sweep": cmd_sweep, "replay": cmd_replay}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Dynamic attention robustness lab")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        sub = subparsers.add_parser(command, help=HANDLERS[command].__doc__ or f"{command} command")
        sub.add_argument("--config", help="run document (JSON); defaults to $DYNATTN_CONFIG")
        sub.add_argument("--seed", type=int, help="global seed override")
        sub.add_argument("--out-dir", help="output directory override")
        sub.add_argument("--threads", type=int, help="worker threads")
        sub.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    return parser


def main(args: argparse.Namespace):
    """Load the run document, execute one command and write its manifest."""
    start_time = time.time()
    logger = logging.getLogger(__name__)

    config = load_experiment_config(args.config, args.seed, args.out_dir, args.threads)
    os.makedirs(config.io.out_dir, exist_ok=True)
    setup_logging(config.io.out_dir, args.log_level)

    logger.info("=" * 60)
    logger.info(f"Dynamic Attention Lab: {args.command}")
    logger.info(f"Timestamp: {datetime.now().isoformat()}")
    logger.info(f"Seed: {config.seed}, threads: {config.threads}, out_dir: {config.io.out_dir}")
    logger.info("=" * 60)

    manifest = RunManifest(command=args.command, config_hash=config.config_hash(), seed=config.seed,
                           versions=_versions(), started=_now())
    HANDLERS[args.command](config, manifest.outputs)
    manifest.finished = _now()
    manifest_path = manifest.write(config.io.out_dir)

    logger.info("=" * 60)
    logger.info(f"{args.command.upper()} COMPLETED")
    logger.info(f"Outputs: {len(manifest.outputs)} file(s), manifest {manifest_path}")
    logger.info(f"Total execution time: {time.time() - start_time:.2f} seconds")
    logger.info("=" * 60)


def run_with_error_handling(argv: Optional[List[str]] = None) -> int:
    """Run one command and map the outcome to a stable exit code."""
    args = build_parser().parse_args(argv)
    setup_logging(level=args.log_level)
    logger = logging.getLogger(__name__)

    try:
        main(args)
        return EXIT_OK
    except KeyboardInterrupt:
        logger.info("Run cancelled by user")
        return EXIT_UNEXPECTED
    except ConfigError as e:
        logger.error(f"✗ Invalid configuration: {e}")
        return EXIT_CONFIG
    except TrainingError as e:
        logger.error(f"✗ Training failed: {e}")
        return EXIT_TRAINING
    except MissingArtifactError as e:
        logger.error(f"✗ Missing artifact: {e}")
        return EXIT_MISSING_ARTIFACT
    except Exception as e:
        logger.error(f"Run failed with error: {str(e)}", exc_info=True)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(run_with_error_handling())
