#   Copyright 2024 The spkadapt Authors
#   Licensed under the Apache License, Version 2.0 (the "License");
#   you may not use this file except in compliance with the License.
#   You may obtain a copy of the License at
#       http://www.apache.org/licenses/LICENSE-2.0
#   Unless required by applicable law or agreed to in writing, software
#   distributed under the License is distributed on an "AS IS" BASIS,
#   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#   See the License for the specific language governing permissions and
#   limitations under the License.

"""
Command-line driver. Every subcommand reads and writes under one output directory:

    OUT/corpus     manifests, feature and label archives (and rendered audio)
    OUT/models     model containers
    OUT/ivectors   i-vector archives
    OUT/reports    grid reports, text and TAB-separated records
    OUT/run.log    config echo, seeds and stage timings
"""

import argparse
import configparser
import logging
import os
import sys
import time

import numpy as np
import pandas as pd

import spkadapt
from spkadapt.adapt.harness import PartitionSet, PartitionType, adapt_all, evaluate, first_pass_targets, slot_key
from spkadapt.adapt.pipeline import (AVERAGE_COLUMN, BASELINE_ROW, DataSplit, cumulative_pipeline, extract_split_ivectors,
                                     ivector_norm_grid, pipeline_stage, position_label, speech_masks, train_acoustic,
                                     train_extractor, ubm_feature_grid)
from spkadapt.config import ExperimentConfig
from spkadapt.corpus.generator import SPLITS, generate, render_audio
from spkadapt.corpus.manifest import DatasetManifest, load_manifest, write_manifest
from spkadapt.exceptions import ConfigError, MissingFileError, SpkadaptError
from spkadapt.features.transforms import ubm_pipeline
from spkadapt.models.gmm import fit_gmm, train_vad
from spkadapt.models.ivector import IVector
from spkadapt.tools.archive_tools import TAGGED_VERSION, read_archive, write_archive
from spkadapt.tools.container_tools import load_model, save_model
from spkadapt.tools.file_tools import atomic_write
from spkadapt.tools.report_tools import standardize_axes_names, write_report

logger = logging.getLogger(__name__)

TABLES = ("ubm-features", "ivector-norm", "adaptation")
FIRST_PASS_TARGET = "FIRST_PASS"

# Command-line flag -> (config section, key)
FLAG_KEYS = {
    "seed": ("run", "seed"),
    "rank": ("ivector", "rank"),
    "norm": ("ivector", "normalization"),
    "positions": ("adapt", "positions"),
    "partition": ("adapt", "partition"),
    "ivectors": ("acoustic", "ivectors"),
    "frontend": ("features", "frontend"),
    "derivatives": ("features", "derivatives"),
    "context": ("features", "context"),
    "lda_dim": ("features", "lda_dim"),
}


class Workspace:
    """Paths under the output directory."""

    def __init__(self, out):
        self.out = os.path.abspath(out)
        for sub in ("corpus", "models", "ivectors", "reports"):
            os.makedirs(os.path.join(self.out, sub), exist_ok=True)

    def path(self, *parts):
        return os.path.join(self.out, *parts)

    def manifest(self, split, audio=False):
        return self.path("corpus", f"{split}_audio.tsv" if audio else f"{split}.tsv")

    def model(self, name):
        return self.path("models", f"{name}.amdl")

    def ivectors(self, split):
        return self.path("ivectors", f"{split}.farc")

    @property
    def reports(self):
        return self.path("reports")


def _am_name(with_ivectors):
    return "am_ivectors" if with_ivectors else "am"


def _load_split(cfg, ws, split, audio=False):
    path = ws.manifest(split, audio)
    if not os.path.isfile(path):
        raise MissingFileError(f"No {split} manifest at {path}; run gen-corpus first.")
    return DataSplit.from_manifest(load_manifest(path), cfg.frontend_config())


def _load(ws, name, kind):
    path = ws.model(name)
    if not os.path.isfile(path):
        raise MissingFileError(f"No {name} model at {path}; train it first.")
    return load_model(path, kind)


def _ubm_split(cfg, ws, split):
    """A split's features run through the configured UBM pathway; the LDA is fitted on train and saved."""
    data = _load_split(cfg, ws, split)
    pathway = cfg.pathway()
    lda = None
    if pathway.needs_lda:
        if split == "train":
            lda = pathway.fit(list(data.features.values()), list(data.labels.values()))
            save_model("LDA", lda, ws.model("lda"))
        else:
            lda = _load(ws, "lda", "LDA")
    features = {utt: ubm_pipeline(pathway, f, lda) for utt, f in data.features.items()}
    logger.info("UBM features: %s (%d utterances)", pathway.label, len(features))
    return DataSplit(features, data.labels, data.records)


def _read_ivectors(ws, split, normalization):
    path = ws.ivectors(split)
    if not os.path.isfile(path):
        raise MissingFileError(f"No {split} i-vectors at {path}; run extract-ivectors first.")
    return {utt: IVector(utt, values.ravel(), normalization) for utt, values in read_archive(path).items()}


def _write_corpus_audio(corpus, cfg, ws):
    for split in SPLITS:
        records = render_audio(corpus, ws.path("corpus", "audio", split), cfg.frontend_config(), split)
        records["Label_Path"] = ws.path("corpus", f"{split}_labels.farc")
        write_manifest(DatasetManifest(records), ws.manifest(split, audio=True))


def _ensure_corpus(cfg, ws, audio=False):
    corpus = None
    if not all(os.path.isfile(ws.manifest(split)) for split in SPLITS):
        corpus = generate(cfg.corpus_spec())
        corpus.write(ws.path("corpus"))
    if audio and not all(os.path.isfile(ws.manifest(split, audio=True)) for split in SPLITS):
        _write_corpus_audio(corpus or generate(cfg.corpus_spec()), cfg, ws)


def gen_corpus(cfg, ws, args):
    corpus = generate(cfg.corpus_spec())
    manifests = corpus.write(ws.path("corpus"))
    if args.audio:
        _write_corpus_audio(corpus, cfg, ws)
    for split, path in manifests.items():
        logger.info("%s manifest: %s", split, path)


def train_vad_command(cfg, ws, args):
    pipe = cfg.pipeline_config()
    train = _ubm_split(cfg, ws, "train")
    masks = speech_masks(train.labels)
    speech = np.vstack([f.frames[masks[u]] for u, f in train.features.items()])
    nonspeech = np.vstack([f.frames[~masks[u]] for u, f in train.features.items()])
    vad = train_vad(speech, nonspeech, pipe.vad_components, pipe.seed, pipe.vad_iterations)
    save_model("VAD", vad, ws.model("vad"))


def train_ubm_command(cfg, ws, args):
    pipe = cfg.pipeline_config()
    train = _ubm_split(cfg, ws, "train")
    masks = speech_masks(train.labels)
    speech = np.vstack([f.frames[masks[u]] for u, f in train.features.items()])
    ubm = fit_gmm(speech, pipe.ubm_components, pipe.ubm_iterations, pipe.seed, pipe.verbose)
    save_model("GMM", ubm, ws.model("ubm"))


def train_tv_command(cfg, ws, args):
    pipe = cfg.pipeline_config()
    ubm = _load(ws, "ubm", "GMM")
    tv = train_extractor(ubm, _ubm_split(cfg, ws, "train"), pipe)
    save_model("TV", tv, ws.model("tv"))


def extract_ivectors_command(cfg, ws, args):
    pipe = cfg.pipeline_config()
    tv = _load(ws, "tv", "TV")
    if args.rank is not None and tv.rank != args.rank:
        raise ConfigError(f"--rank {args.rank} was requested but the TV model has rank {tv.rank}; retrain it with train-tv --rank {args.rank}.")
    vad = None
    if pipe.use_vad and os.path.isfile(ws.model("vad")):
        vad = _load(ws, "vad", "VAD")
    elif pipe.use_vad:
        logger.warning("No VAD model found; test i-vectors use every frame")
    train_ivs, test_ivs, rg = extract_split_ivectors(tv, vad, _ubm_split(cfg, ws, "train"), _ubm_split(cfg, ws, "test"), pipe)
    if rg is not None:
        save_model("RG", rg, ws.model("rg"))
    for split, ivectors in (("train", train_ivs), ("test", test_ivs)):
        count = write_archive([(utt, iv.values.reshape(1, -1)) for utt, iv in ivectors.items()], ws.ivectors(split), version=TAGGED_VERSION)
        logger.info("Wrote %d %s i-vectors (%s)", count, split, pipe.normalization.value)


def train_am_command(cfg, ws, args):
    pipe = cfg.pipeline_config()
    with_ivectors = cfg.get("acoustic", "ivectors")
    train = _load_split(cfg, ws, "train")
    ivectors = _read_ivectors(ws, "train", pipe.normalization) if with_ivectors else None
    num_classes = max(train.num_classes, _load_split(cfg, ws, "test").num_classes)
    m = train_acoustic(train, pipe, ivectors, num_classes)
    save_model("AM", m, ws.model(_am_name(with_ivectors)))
    write_report(m.training_log, ws.reports, f"train-{_am_name(with_ivectors)}")


def _adaptation_meta(ws):
    return ws.path("models", "am_adapted.ini")


def adapt_command(cfg, ws, args):
    pipe = cfg.pipeline_config()
    with_ivectors = cfg.get("acoustic", "ivectors")
    m = _load(ws, _am_name(with_ivectors), "AM")
    test = _load_split(cfg, ws, "test")
    ivectors = _read_ivectors(ws, "test", pipe.normalization) if with_ivectors else None
    adaptation = cfg.adaptation_config(m.num_layers)
    with pipeline_stage("first-pass"):
        pseudo_targets = first_pass_targets(m, test.features, ivectors)
    partition_set = PartitionSet.from_records(test.records, adaptation.partition)
    outcomes = adapt_all(m, partition_set, test.features, pseudo_targets, adaptation, ivectors)
    save_model("AM", m, ws.model("am_adapted"))

    meta = configparser.ConfigParser(interpolation=None)
    meta["adaptation"] = {"partition": adaptation.partition.value, "positions": ",".join(str(p) for p in adaptation.positions),
                          "ivectors": str(with_ivectors)}
    with atomic_write(_adaptation_meta(ws), "w", encoding="utf-8") as out:
        meta.write(out)
    curves = pd.concat({key: outcome.curve for key, outcome in outcomes.items()}, names=["Partition", "Epoch"])
    curves.columns.name = "Name"
    write_report(curves, ws.reports, "adapt-curves")


def evaluate_command(cfg, ws, args):
    pipe = cfg.pipeline_config()
    test = _load_split(cfg, ws, "test")
    environments = test.environments()
    adapted = os.path.isfile(ws.model("am_adapted")) and os.path.isfile(_adaptation_meta(ws)) and not args.baseline
    if adapted:
        meta = configparser.ConfigParser(interpolation=None)
        meta.read(_adaptation_meta(ws), encoding="utf-8")
        partition = PartitionType.parse(meta["adaptation"]["partition"])
        positions = tuple(int(p) for p in meta["adaptation"]["positions"].split(","))
        with_ivectors = meta["adaptation"].getboolean("ivectors")
        m = _load(ws, "am_adapted", "AM")
        partition_set = PartitionSet.from_records(test.records, partition)
        transforms = {key: [m.at_slots[(p, k)] for (p, k) in sorted(m.at_slots) if k == slot_key(partition, key) and p in positions]
                      for key in partition_set.keys()}
        transforms = {key: value for key, value in transforms.items() if value}
        ivectors = _read_ivectors(ws, "test", pipe.normalization) if with_ivectors else None
        report = evaluate(m, test.features, test.labels, ivectors, partition_set, transforms, group_by=environments)
        row, target = position_label(positions), partition.value
    else:
        with_ivectors = cfg.get("acoustic", "ivectors")
        m = _load(ws, _am_name(with_ivectors), "AM")
        ivectors = _read_ivectors(ws, "test", pipe.normalization) if with_ivectors else None
        report = evaluate(m, test.features, test.labels, ivectors, group_by=environments)
        row, target = BASELINE_ROW, FIRST_PASS_TARGET

    values = dict(report.per_partition["FER"])
    values[AVERAGE_COLUMN] = report.overall
    columns = pd.MultiIndex.from_product([[target], list(values)], names=["Target", "Subset"])
    grid = pd.DataFrame([list(values.values())], index=[row], columns=columns)
    write_report(standardize_axes_names(grid, "Position"), ws.reports, "evaluate")
    logger.info("FER %.4f (%s, %s)", report.overall, target, row)


def report_grid_command(cfg, ws, args):
    pipe = cfg.pipeline_config()
    _ensure_corpus(cfg, ws, audio=args.table == "ubm-features")
    if args.table == "ubm-features":
        train_audio = load_manifest(ws.manifest("train", audio=True))
        test_audio = load_manifest(ws.manifest("test", audio=True))
        grid = ubm_feature_grid(train_audio, test_audio, pipe, cfg.frontend_config())
        write_report(grid, ws.reports, "ubm-features", "FER by UBM / i-vector features")
        return
    train, test = _load_split(cfg, ws, "train"), _load_split(cfg, ws, "test")
    if args.table == "ivector-norm":
        grid = ivector_norm_grid(train, test, pipe, cfg.grid_ranks())
        write_report(grid, ws.reports, "ivector-norm", "FER by i-vector normalization and rank")
        return
    report = cumulative_pipeline(train, test, pipe)
    titles = {"adaptation-no-ivectors": "FER by affine transform position, without i-vectors",
              "adaptation-ivectors": "FER by affine transform position, with i-vectors"}
    for name, grid in report.grids.items():
        write_report(grid, ws.reports, name, titles[name])


COMMANDS = {
    "gen-corpus": gen_corpus,
    "train-vad": train_vad_command,
    "train-ubm": train_ubm_command,
    "train-tv": train_tv_command,
    "extract-ivectors": extract_ivectors_command,
    "train-am": train_am_command,
    "adapt": adapt_command,
    "evaluate": evaluate_command,
    "report-grid": report_grid_command,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config; flags override its values")
    common.add_argument("--seed", type=int, help="seed for every random draw")
    common.add_argument("--out", default="spkadapt-out", help="output directory (default: spkadapt-out)")
    common.add_argument("-v", "--verbose", action="store_true", help="progress bars")

    pathway = argparse.ArgumentParser(add_help=False)
    pathway.add_argument("--frontend", choices=["mfcc", "gt"], help="frontend for WAV manifests and UBM features")
    pathway.add_argument("--derivatives", type=int, choices=[0, 1, 2], help="delta orders appended to UBM features")
    pathway.add_argument("--context", type=int, help="frames of context on each side before LDA")
    pathway.add_argument("--lda-dim", dest="lda_dim", type=int, help="LDA output dimension (0 for none)")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--rank", type=int, help="i-vector rank")
    model.add_argument("--norm", choices=["none", "unity", "sqrt", "rg"], help="i-vector length normalization")
    model.add_argument("--ivectors", choices=["on", "off"], help="append i-vectors to the acoustic model input")

    adapt = argparse.ArgumentParser(add_help=False)
    adapt.add_argument("--positions", help="comma-separated slot positions, or 'all'")
    adapt.add_argument("--partition", choices=["speaker", "environment"], help="one transform set per speaker or environment")

    parser = argparse.ArgumentParser(prog="spkadapt", description="Speaker and environment adaptation experiments for BLSTM acoustic models.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {spkadapt.version()}")
    sub = parser.add_subparsers(dest="command", required=True)
    gen = sub.add_parser("gen-corpus", parents=[common, pathway], help="generate the synthetic corpus")
    gen.add_argument("--audio", action="store_true", help="also render WAV files and audio manifests")
    sub.add_parser("train-vad", parents=[common, pathway], help="train the speech / non-speech GMMs")
    sub.add_parser("train-ubm", parents=[common, pathway], help="train the universal background model")
    sub.add_parser("train-tv", parents=[common, pathway, model], help="train the total-variability matrix")
    sub.add_parser("extract-ivectors", parents=[common, pathway, model], help="extract normalized i-vectors for both splits")
    sub.add_parser("train-am", parents=[common, pathway, model], help="train the speaker-independent BLSTM")
    sub.add_parser("adapt", parents=[common, pathway, model, adapt], help="train per-partition affine transforms on first-pass labels")
    ev = sub.add_parser("evaluate", parents=[common, pathway, model, adapt], help="frame error rate of the current model")
    ev.add_argument("--baseline", action="store_true", help="ignore any adapted model")
    grid = sub.add_parser("report-grid", parents=[common, pathway, model, adapt], help="run an experiment grid")
    grid.add_argument("--table", choices=TABLES, required=True)
    return parser


def _flag_overrides(args):
    return {target: getattr(args, flag) for flag, target in FLAG_KEYS.items() if hasattr(args, flag)}


def _configure_logging(ws):
    package_logger = logging.getLogger("spkadapt")
    package_logger.setLevel(logging.INFO)
    file_handler = logging.FileHandler(ws.path("run.log"), encoding="utf-8")
    file_handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.WARNING)
    console.addFilter(lambda record: record.levelno < logging.ERROR)
    console.setFormatter(logging.Formatter("spkadapt %(levelname)s: %(message)s"))
    for handler in (file_handler, console):
        package_logger.addHandler(handler)
    return [file_handler, console]


def main(argv=None):
    """Run one subcommand. Returns 0 on success and 1 on a validation or stage failure; usage errors exit with 2."""
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
        cfg.override(_flag_overrides(args))
        if args.verbose:
            cfg.set("run", "verbose", True)
        ws = Workspace(args.out)
    except SpkadaptError as e:
        print(f"spkadapt error: [config] {e}", file=sys.stderr)
        return 1

    handlers = _configure_logging(ws)
    start = time.perf_counter()
    try:
        logger.info("spkadapt %s: %s", spkadapt.version(), args.command)
        logger.info("Seed %d; config:\n%s", cfg.seed, cfg.to_text())
        cfg.write(ws.path("config.ini"))
        with pipeline_stage(args.command):
            COMMANDS[args.command](cfg, ws, args)
        logger.info("%s finished in %.2f s", args.command, time.perf_counter() - start)
        return 0
    except SpkadaptError as e:
        logger.error("%s", e)
        print(f"spkadapt error: {e}", file=sys.stderr)
        return 1
    finally:
        package_logger = logging.getLogger("spkadapt")
        for handler in handlers:
            package_logger.removeHandler(handler)
            handler.close()
