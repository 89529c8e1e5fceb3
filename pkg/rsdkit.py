#!/usr/bin/env python3
"""
rsd-kit - remaining surgery duration estimation on synthetic surgeries.

Command-line front door and experiment runner: dataset generation, the
two-step encoder/LSTM training, baselines, evaluation and cell dumps, with
artifacts cached under out/<config hash>/<stage>/.
"""
import argparse
import copy
import datetime
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dotenv import load_dotenv

import baselines
import evalkit
from encoder import (
    EncoderNet,
    EncoderTask,
    EncoderTrainConfig,
    extract_all,
    mean_predictor_mae,
    train_encoder,
)
from numkernel import SgdConfig, resolve_dtype
from rsdcommon import ConfigError, PipelineOrderError, RsdKitError
from rsdio import (
    atomic_write_bytes,
    canonical_json,
    read_checkpoint,
    read_features,
    write_checkpoint,
    write_features,
)
from rsdlstm import (
    VARIANT_ALIASES,
    VARIANT_KINDS,
    LstmTrainConfig,
    PredictionTrace,
    RsdNet,
    VariantConfig,
    cell_statistics,
    dump_cell_activations,
    predict_traces,
    read_traces,
    train_variant,
    write_cells,
    write_traces,
)
from synthsurg import (
    Dataset,
    DatasetSplit,
    WorkflowSpec,
    build_workflow_spec,
    dataset_summary,
    export_frames,
    extend_t1,
    generate_dataset,
    index_dataset,
    make_splits,
    read_dataset,
    write_dataset,
)

APP_DIR = os.path.dirname(os.path.abspath(__file__))
CONFIG_VERSION = 1
# sections that do not change any result and stay out of the config hash
UNHASHED_KEYS = (
    "logging",
    "full_schedule",
    "experiment.out_dir",
    "experiment.threads",
    # row selection only; each row keeps its own artifact path
    "experiment.methods",
    "experiment.encoder_tasks",
    "experiment.cnn_train_sizes",
    "experiment.ablate_no_finetune",
    "experiment.cell_surgeries",
)


class ConfigManager:
    """Manages configuration loading and validation."""

    def __init__(self, config_file: str = "config.json"):
        self.config_file = config_file
        self.config = self._load_config()
        self.overrides: Dict[str, Any] = {}
        self._validate_config()

    def _load_config(self) -> Dict[str, Any]:
        """Load configuration from JSON file."""
        try:
            with open(self.config_file, "r") as f:
                return json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"Configuration file {self.config_file} not found")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Invalid JSON in {self.config_file}: {e}")

    def _validate_config(self) -> None:
        """Validate required configuration sections exist."""
        required_sections = [
            "version",
            "dataset",
            "splits",
            "encoder",
            "lstm",
            "baselines",
            "evaluation",
            "experiment",
            "logging",
        ]
        for section in required_sections:
            if section not in self.config:
                raise ConfigError(f"Missing required config section: {section}")
        if self.config["version"] != CONFIG_VERSION:
            raise ConfigError(
                f"Unsupported config version {self.config['version']} (expected {CONFIG_VERSION})"
            )

    def set_override(self, key_path: str, value: Any) -> None:
        """Command-line value; wins over environment and file. None is ignored."""
        if value is not None:
            self.overrides[key_path] = value

    def with_override(self, key_path: str, value: Any) -> "ConfigManager":
        """Copy sharing the file config, with one more command-line override."""
        other = copy.copy(self)
        other.overrides = {**self.overrides, key_path: value}
        return other

    def get(self, key_path: str, default=None) -> Any:
        """Get configuration value using dot notation (e.g., 'lstm.lr0')."""
        if key_path in self.overrides:
            return self.overrides[key_path]

        env_value = self._get_env_override(key_path)
        if env_value is not None:
            return env_value

        keys = key_path.split(".")
        value = self.config
        for key in keys:
            if isinstance(value, dict) and key in value:
                value = value[key]
            else:
                return default
        return value

    def _get_env_override(self, key_path: str) -> Any:
        """Check for environment variable override for a config key."""
        env_mappings = {
            "dataset.preset": "RSDKIT_PRESET",
            "dataset.time_scale": "RSDKIT_TIME_SCALE",
            "experiment.seed": "RSDKIT_SEED",
            "experiment.threads": "RSDKIT_THREADS",
            "experiment.out_dir": "RSDKIT_OUT_DIR",
            "logging.level": "LOG_LEVEL",
            "logging.format": "LOG_FORMAT",
            "logging.file": "LOG_FILE",
        }

        env_var = env_mappings.get(key_path)
        if env_var:
            env_value = os.getenv(env_var)
            if env_value is not None:
                return self._convert_env_value(env_value, key_path)

        return None

    def _convert_env_value(self, value: str, key_path: str) -> Any:
        """Convert environment variable string to appropriate type."""
        if key_path in ["experiment.seed", "experiment.threads"]:
            try:
                return int(value)
            except ValueError:
                logging.warning(f"Invalid integer value for {key_path}: {value}")
                return None

        if key_path in ["dataset.time_scale"]:
            try:
                return float(value)
            except ValueError:
                logging.warning(f"Invalid float value for {key_path}: {value}")
                return None

        return value

    def resolved(self) -> Dict[str, Any]:
        """The file config with environment and command-line overrides applied."""
        effective = copy.deepcopy(self.config)
        paths = set(self.overrides) | set(_leaf_paths(effective))
        for path in sorted(paths):
            _set_path(effective, path, self.get(path))
        return effective

    def config_hash(self) -> str:
        """First 12 hex chars of the SHA-256 of the result-relevant configuration."""
        effective = self.resolved()
        for key in UNHASHED_KEYS:
            _drop_path(effective, key)
        return hashlib.sha256(canonical_json(effective).encode("utf-8")).hexdigest()[:12]


def _leaf_paths(tree: Dict[str, Any], prefix: str = "") -> List[str]:
    paths = []
    for key, value in tree.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            paths.extend(_leaf_paths(value, f"{path}."))
        else:
            paths.append(path)
    return paths


def _set_path(tree: Dict[str, Any], key_path: str, value: Any) -> None:
    *parents, leaf = key_path.split(".")
    for key in parents:
        tree = tree.setdefault(key, {})
    tree[leaf] = value


def _drop_path(tree: Dict[str, Any], key_path: str) -> None:
    *parents, leaf = key_path.split(".")
    for key in parents:
        tree = tree.get(key, {})
    tree.pop(leaf, None)


class PresetManager:
    """Manages workflow presets from JSON file."""

    def __init__(self, presets_file: str = os.path.join(APP_DIR, "presets.json")):
        self.presets_file = presets_file
        self.presets = self._load_presets()

    def _load_presets(self) -> Dict[str, Any]:
        """Load presets from JSON file."""
        try:
            with open(self.presets_file, "r") as f:
                return json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"Presets file {self.presets_file} not found")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Invalid JSON in {self.presets_file}: {e}")

    def get_preset(self, preset_key: str) -> Dict[str, Any]:
        """Get preset configuration by key."""
        if preset_key not in self.presets:
            raise ConfigError(f"Preset '{preset_key}' not found. Available: {list(self.presets)}")
        return self.presets[preset_key]


class RFC3339Formatter(logging.Formatter):
    """UTC timestamps with millisecond precision and a Z suffix."""

    def formatTime(self, record, datefmt=None) -> str:
        dt = datetime.datetime.fromtimestamp(record.created, tz=datetime.timezone.utc)
        return dt.strftime("%Y-%m-%dT%H:%M:%S.%f")[:-3] + "Z"


def setup_logging(config: ConfigManager, verbose: bool = False) -> None:
    """Set up logging configuration."""
    level_name = "DEBUG" if verbose else str(config.get("logging.level", "INFO")).upper()
    log_level = getattr(logging, level_name, logging.INFO)
    log_format = config.get("logging.format", "%(asctime)s - %(levelname)s - %(message)s")
    log_file = config.get("logging.file", "rsdkit.log")

    formatter = RFC3339Formatter(log_format)

    handlers: List[logging.Handler] = []
    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(formatter)
        handlers.append(file_handler)

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(formatter)
    handlers.append(console_handler)

    logging.basicConfig(level=log_level, handlers=handlers, force=True)


# --- experiment rows ------------------------------------------------------

_SHORT_NAMES = {kind: alias for alias, kind in VARIANT_ALIASES.items()}


@dataclass(frozen=True)
class ModelRow:
    """One learned method: an LSTM variant plus the stage-one encoder it consumes.

    Spelled `variant[@qualifier]` on the command line, e.g. `rsdnet`,
    `rsdnet@rsd-classification`, `rsdnet@t1=60` or `rsdnet@random`.
    """

    variant: str
    task: Optional[str] = None
    t1_size: Optional[int] = None
    random_encoder: bool = False

    @classmethod
    def parse(cls, text: str) -> "ModelRow":
        name, _, qualifier = text.partition("@")
        kind = VARIANT_ALIASES.get(name, name)
        if kind not in VARIANT_KINDS:
            raise ConfigError(f"Unknown method '{text}'")
        if not qualifier:
            return cls(kind)
        if qualifier == "random":
            return cls(kind, random_encoder=True)
        if qualifier.startswith("t1="):
            try:
                return cls(kind, t1_size=int(qualifier[3:]))
            except ValueError:
                raise ConfigError(f"Invalid T1 size in '{text}'")
        return cls(kind, task=qualifier.replace("-", "_"))

    @property
    def qualifier(self) -> str:
        if self.random_encoder:
            return "random"
        if self.t1_size is not None:
            return f"t1={self.t1_size}"
        return (self.task or "").replace("_", "-")

    @property
    def name(self) -> str:
        short = _SHORT_NAMES.get(self.variant, self.variant)
        return f"{short}@{self.qualifier}" if self.qualifier else short

    @property
    def slug(self) -> str:
        return self.name.replace("@", "_").replace("=", "-")


def is_model_method(text: str) -> bool:
    name = text.partition("@")[0]
    return name in VARIANT_ALIASES or name in VARIANT_KINDS


def parse_list(value: Any) -> List[str]:
    """Comma-separated command-line value or a JSON list from the config file."""
    if value is None:
        return []
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return [str(item) for item in value]


# --- runner ----------------------------------------------------------------


class ExperimentRunner:
    """Runs pipeline stages against the artifact tree of one configuration."""

    def __init__(
        self,
        config: ConfigManager,
        presets: Optional[PresetManager] = None,
        force: bool = False,
    ):
        self.config = config
        self.presets = presets or PresetManager()
        self.force = force
        self.config_hash = config.config_hash()
        self.root = os.path.join(config.get("experiment.out_dir", "out"), self.config_hash)
        self.threads = config.get("experiment.threads")
        self.seed = int(config.get("experiment.seed", 0))
        self.time_scale = float(config.get("dataset.time_scale", 1.0))
        self._dataset: Optional[Tuple[WorkflowSpec, Dataset]] = None
        self._splits: Optional[List[DatasetSplit]] = None
        self._quartiles: Optional[Tuple[float, float]] = None

    # paths and provenance

    def path(self, stage: str, *parts: str) -> str:
        directory = os.path.join(self.root, stage, *parts[:-1])
        os.makedirs(directory, exist_ok=True)
        return os.path.join(directory, parts[-1])

    def provenance(self, **extra: Any) -> Dict[str, Any]:
        return {"config_hash": self.config_hash, "seed": self.seed, **extra}

    def _reuse(self, path: str, what: str) -> bool:
        """True when an existing artifact should be kept rather than rebuilt."""
        if os.path.exists(path) and not self.force:
            logging.info(f"Reusing {what} at {path} (use --force to rebuild)")
            return True
        return False

    @staticmethod
    def _require(path: str, stage: str, hint: str) -> None:
        if not os.path.exists(path):
            raise PipelineOrderError(f"{stage} artifact missing ({path}); run `rsdkit {hint}` first")

    # derived settings

    @property
    def preset(self) -> Dict[str, Any]:
        return self.presets.get_preset(self.config.get("dataset.preset", "cholec"))

    @property
    def s_norm(self) -> float:
        configured = self.config.get("lstm.s_norm")
        if configured is not None:
            return float(configured)
        return float(self.preset.get("s_norm", 5.0)) * self.time_scale

    @property
    def folds(self) -> int:
        return int(self.config.get("splits.folds", 1))

    def _minutes(self, key_path: str) -> List[float]:
        values = [float(v) for v in self.config.get(key_path, list(evalkit.CURVE_VALUES))]
        if self.config.get("evaluation.scale_with_time_scale", True):
            values = [v * self.time_scale for v in values]
        return values

    def _sgd(self, section: str) -> SgdConfig:
        return SgdConfig(
            lr0=float(self.config.get(f"{section}.lr0")),
            momentum=float(self.config.get(f"{section}.momentum", 0.9)),
            weight_decay=float(self.config.get(f"{section}.weight_decay", 0.0)),
            decay_factor=float(self.config.get(f"{section}.decay_factor", 10.0)),
            decay_every=int(self.config.get(f"{section}.decay_every", 20000)),
        )

    def encoder_task(self, kind: str) -> EncoderTask:
        kind = kind.replace("-", "_")
        if kind == "rsd_classification":
            return EncoderTask.create(
                kind,
                bin_width_min=float(self.config.get("encoder.bin_width_min", 3.0)) * self.time_scale,
                max_bins=int(self.config.get("encoder.max_bins", 20)),
            )
        if kind == "progress_classification":
            return EncoderTask.create(kind, n_classes=int(self.config.get("encoder.progress_classes", 10)))
        if kind == "phase_classification":
            return EncoderTask.create(kind, n_classes=self.load_dataset()[0].n_phases)
        return EncoderTask.create(kind)

    def variant_of(self, row: ModelRow) -> VariantConfig:
        task = self.encoder_task(row.task) if row.task else None
        if task is None and row.variant == "timelstm_phase_encoder":
            task = self.encoder_task("phase_classification")
        return VariantConfig.create(row.variant, encoder_task=task)

    def encoder_tag(self, row: ModelRow) -> str:
        if row.random_encoder:
            return "random"
        tag = self.variant_of(row).encoder_task.slug
        return f"{tag}_t1-{row.t1_size}" if row.t1_size is not None else tag

    # stage: generate

    def generate(self, export: Optional[str] = None, copy_to: Optional[str] = None) -> str:
        path = self.path("dataset", "dataset.rsds")
        if not self._reuse(path, "dataset"):
            spec = build_workflow_spec(self.preset, self.time_scale)
            n = int(self.config.get("dataset.n_surgeries", 120))
            seed = int(self.config.get("dataset.seed", 0))
            dataset = generate_dataset(spec, n, seed, self.threads)
            write_dataset(path, spec, dataset, self.provenance(dataset_seed=seed))
            atomic_write_bytes(
                self.path("dataset", "summary.json"),
                canonical_json(dataset_summary(dataset)).encode("utf-8"),
            )
            self._dataset = (spec, dataset)
        if copy_to:
            with open(path, "rb") as f:
                atomic_write_bytes(copy_to, f.read())
            logging.info(f"Copied dataset to {copy_to}")
        if export:
            export_frames(export, self.load_dataset()[1])
        return path

    def attach_dataset(self, path: str) -> None:
        """Use a dataset file from outside the artifact tree for this invocation."""
        self._require(path, "dataset", "generate --out FILE")
        spec, dataset, _ = read_dataset(path)
        self._dataset = (spec, dataset)
        self._quartiles = None

    def load_dataset(self) -> Tuple[WorkflowSpec, Dataset]:
        if self._dataset is None:
            path = os.path.join(self.root, "dataset", "dataset.rsds")
            self._require(path, "dataset", "generate")
            spec, dataset, _ = read_dataset(path)
            self._dataset = (spec, dataset)
        return self._dataset

    def quartiles(self) -> Tuple[float, float]:
        if self._quartiles is None:
            self._quartiles = evalkit.duration_quartiles(
                [rec.total_duration_T for rec, _ in self.load_dataset()[1]]
            )
        return self._quartiles

    # stage: split

    def split(self) -> str:
        path = self.path("split", "splits.json")
        if self._reuse(path, "splits"):
            return path
        _, dataset = self.load_dataset()
        splits = make_splits(
            dataset,
            ratios=[float(r) for r in self.config.get("splits.ratios")],
            n_folds=self.folds,
            seed=int(self.config.get("splits.seed", 0)),
            tolerance=float(self.config.get("splits.tolerance", 0.15)),
        )
        payload = {**self.provenance(), "folds": [s.to_dict() for s in splits]}
        atomic_write_bytes(path, canonical_json(payload).encode("utf-8"))
        self._splits = splits
        logging.info(f"Wrote {len(splits)} fold split(s) to {path}")
        return path

    def load_splits(self) -> List[DatasetSplit]:
        if self._splits is None:
            path = os.path.join(self.root, "split", "splits.json")
            self._require(path, "split", "split")
            with open(path, "r") as f:
                self._splits = [DatasetSplit.from_dict(d) for d in json.load(f)["folds"]]
        return self._splits

    def fold_split(self, fold: int, row: Optional[ModelRow] = None) -> DatasetSplit:
        splits = self.load_splits()
        if not 0 <= fold < len(splits):
            raise ConfigError(f"fold {fold} outside 0..{len(splits) - 1}")
        split = splits[fold]
        if row is not None and row.t1_size is not None:
            split = extend_t1(split, row.t1_size)
        return split

    # stage: encoder

    def encoder_config(self, fold: int) -> EncoderTrainConfig:
        return EncoderTrainConfig(
            sgd=self._sgd("encoder"),
            iterations=int(self.config.get("encoder.iterations", 5000)),
            batch_size=int(self.config.get("encoder.batch_size", 48)),
            eval_every=int(self.config.get("encoder.eval_every", 250)),
            hidden_sizes=tuple(int(h) for h in self.config.get("encoder.hidden_sizes", [64, 64])),
            dropout_p=float(self.config.get("encoder.dropout", 0.1)),
            s_norm=self.s_norm,
            clip_norm=float(self.config.get("encoder.clip_norm", 5.0)),
            seed=self.seed + 1000 * fold,
            precision=self.config.get("numerics.precision", "f32"),
        )

    def train_encoder(self, row: ModelRow, fold: int, out_path: Optional[str] = None) -> str:
        tag = self.encoder_tag(row)
        path = out_path or self.path("encoder", tag, f"fold{fold}.rsdc")
        if self._reuse(path, f"encoder {tag} fold {fold}"):
            return path
        spec, dataset = self.load_dataset()
        split = self.fold_split(fold, row)
        cfg = self.encoder_config(fold)
        meta = self.provenance(fold=fold, encoder_tag=tag)
        if row.random_encoder:
            net = EncoderNet(
                self.encoder_task("progress_regression"),
                input_dim=spec.feature_dim,
                hidden_sizes=cfg.hidden_sizes,
                dropout_p=cfg.dropout_p,
                s_norm=cfg.s_norm,
                seed=cfg.seed,
                dtype=resolve_dtype(cfg.precision),
            )
            logging.info(f"Random (untrained) encoder for fold {fold}")
            checkpoint = net.to_checkpoint({**meta, "random": True, "fold_index": fold})
        else:
            checkpoint = train_encoder(dataset, split, self.variant_of(row).encoder_task, cfg, meta)
        write_checkpoint(path, checkpoint)
        return path

    def extract(
        self, row: ModelRow, fold: int, ckpt_path: Optional[str] = None, out_path: Optional[str] = None
    ) -> str:
        tag = self.encoder_tag(row)
        path = out_path or self.path("features", tag, f"fold{fold}.rsdf")
        if self._reuse(path, f"features {tag} fold {fold}"):
            return path
        ckpt_path = ckpt_path or os.path.join(self.root, "encoder", tag, f"fold{fold}.rsdc")
        self._require(ckpt_path, "encoder", "encoder train")
        net = EncoderNet.from_checkpoint(read_checkpoint(ckpt_path, "encoder"))
        _, dataset = self.load_dataset()
        features = extract_all(net, [seq for _, seq in dataset], self.threads)
        write_features(path, features, self.provenance(fold=fold, encoder_tag=tag))
        logging.info(f"Extracted {net.penultimate_dim}-dim features for {len(features)} surgeries")
        return path

    def load_features(self, row: ModelRow, fold: int) -> Dict[str, np.ndarray]:
        path = os.path.join(self.root, "features", self.encoder_tag(row), f"fold{fold}.rsdf")
        self._require(path, "features", "encoder extract")
        return read_features(path)[0]

    # stage: rsdlstm

    def lstm_config(self, fold: int) -> LstmTrainConfig:
        return LstmTrainConfig(
            sgd=self._sgd("lstm"),
            iterations=int(self.config.get("lstm.iterations", 3000)),
            eval_every=int(self.config.get("lstm.eval_every", 100)),
            hidden_size=int(self.config.get("lstm.hidden_size", 64)),
            dropout_p=float(self.config.get("lstm.dropout", 0.3)),
            s_norm=self.s_norm,
            clip_norm=float(self.config.get("lstm.clip_norm", 5.0)),
            forget_bias=float(self.config.get("lstm.forget_bias", 1.0)),
            seed=self.seed + 1000 * fold + 1,
            precision=self.config.get("numerics.precision", "f32"),
        )

    def train_lstm(self, row: ModelRow, fold: int, out_path: Optional[str] = None) -> str:
        path = out_path or self.path("lstm", row.slug, f"fold{fold}.rsdc")
        if self._reuse(path, f"{row.name} fold {fold}"):
            return path
        _, dataset = self.load_dataset()
        features = self.load_features(row, fold)
        checkpoint = train_variant(
            self.variant_of(row),
            self.fold_split(fold, row),
            dataset,
            features,
            self.lstm_config(fold),
            self.provenance(fold=fold, method=row.name, encoder_tag=self.encoder_tag(row)),
        )
        write_checkpoint(path, checkpoint)
        return path

    def load_model(self, row: ModelRow, fold: int, ckpt_path: Optional[str] = None) -> RsdNet:
        path = ckpt_path or os.path.join(self.root, "lstm", row.slug, f"fold{fold}.rsdc")
        self._require(path, "lstm", "rsdlstm train")
        return RsdNet.from_checkpoint(read_checkpoint(path, "rsdlstm"))

    def predict(
        self, row: ModelRow, fold: int, ckpt_path: Optional[str] = None, out_path: Optional[str] = None
    ) -> str:
        path = out_path or self.path("predict", row.slug, f"fold{fold}.jsonl")
        if self._reuse(path, f"{row.name} traces fold {fold}"):
            return path
        model = self.load_model(row, fold, ckpt_path)
        _, dataset = self.load_dataset()
        split = self.fold_split(fold)
        traces = predict_traces(model, dataset, self.load_features(row, fold), split.e_ids, self.threads)
        write_traces(path, traces, self.provenance(fold=fold, method=row.name))
        return path

    def cells(
        self,
        row: ModelRow,
        fold: int,
        surgery_ids: Optional[Sequence[str]] = None,
        ckpt_path: Optional[str] = None,
        out_path: Optional[str] = None,
    ) -> List[str]:
        """Cell activations and per-cell statistics for a few E-set surgeries.

        An explicit `out_path` names the activation file of a single surgery;
        its statistics go next to it as `<stem>.stats.csv`.
        """
        model = self.load_model(row, fold, ckpt_path)
        features = self.load_features(row, fold)
        spec, dataset = self.load_dataset()
        by_id = index_dataset(dataset)
        if not surgery_ids:
            count = int(self.config.get("experiment.cell_surgeries", 3))
            surgery_ids = self.fold_split(fold).e_ids[:count]
        if out_path and len(surgery_ids) != 1:
            raise ConfigError("cells --out needs exactly one --surgery")
        written = []
        for sid in surgery_ids:
            if sid not in by_id:
                raise ConfigError(f"Unknown surgery id '{sid}'")
            seq = by_id[sid][1]
            table = dump_cell_activations(model, seq, features[sid])
            if out_path:
                cells_path = out_path
                stats_path = f"{os.path.splitext(out_path)[0]}.stats.csv"
            else:
                cells_path = self.path("cells", row.slug, f"fold{fold}", f"{sid}.csv")
                stats_path = self.path("cells", row.slug, f"fold{fold}", f"{sid}.stats.csv")
            write_cells(cells_path, table)
            write_cells(stats_path, cell_statistics(table, seq.phase_id == spec.end_signal_phase))
            written.append(cells_path)
        return written

    def run_model(self, row: ModelRow) -> None:
        for fold in range(self.folds):
            self.train_encoder(row, fold)
            self.extract(row, fold)
            self.train_lstm(row, fold)
            self.predict(row, fold)

    # stage: baselines

    def run_baseline(self, method: str, fold: int, out_path: Optional[str] = None) -> str:
        path = out_path or self.path("baselines", method, f"fold{fold}.jsonl")
        if self._reuse(path, f"{method} traces fold {fold}"):
            return path
        spec, dataset = self.load_dataset()
        progress = None
        if method == "progress-derived":
            rsdnet_traces = os.path.join(self.root, "predict", "rsdnet", f"fold{fold}.jsonl")
            self._require(rsdnet_traces, "rsdnet predict", "rsdlstm predict --variant rsdnet")
            progress = read_traces(rsdnet_traces)
        traces = baselines.run_baseline(
            method,
            self.fold_split(fold),
            dataset,
            progress,
            spec.n_phases,
            prog_floor=float(self.config.get("baselines.prog_floor", baselines.PROG_FLOOR)),
            rsd_cap_factor=float(self.config.get("baselines.rsd_cap_factor", baselines.RSD_CAP_FACTOR)),
        )
        write_traces(path, traces, self.provenance(fold=fold, method=method))
        return path

    # stage: evaluate

    def traces_for(self, method: str, fold: int) -> List[PredictionTrace]:
        if is_model_method(method):
            path = os.path.join(self.root, "predict", ModelRow.parse(method).slug, f"fold{fold}.jsonl")
            hint = "rsdlstm predict"
        else:
            path = os.path.join(self.root, "baselines", method, f"fold{fold}.jsonl")
            hint = "baselines run"
        self._require(path, "trace", hint)
        return read_traces(path)

    def evaluate(self, method: str) -> evalkit.EvalReport:
        q1, q3 = self.quartiles()
        fold_reports = [
            evalkit.evaluate_traces(
                method,
                self.traces_for(method, fold),
                q1,
                q3,
                self._minutes("evaluation.thresholds_min"),
                self._minutes("evaluation.gt_values_min"),
                self.threads,
            )
            for fold in range(self.folds)
        ]
        report = evalkit.aggregate_folds(fold_reports)
        slug = ModelRow.parse(method).slug if is_model_method(method) else method
        evalkit.write_report(
            report,
            self.path("evaluate", slug, "report.json"),
            self.path("evaluate", slug, "report.txt"),
            self.path("evaluate", slug, "curves.csv"),
            self.provenance(folds=self.folds),
        )
        return report

    # end-to-end

    def methods(self) -> List[str]:
        """Configured comparison rows, extra study rows included, in report order."""
        rows = parse_list(self.config.get("experiment.methods"))
        for kind in parse_list(self.config.get("experiment.encoder_tasks")):
            rows.append(f"rsdnet@{kind.replace('_', '-')}")
        for size in parse_list(self.config.get("experiment.cnn_train_sizes")):
            rows.append(f"rsdnet@t1={int(size)}")
        if self.config.get("experiment.ablate_no_finetune", False):
            rows += ["rsdnet", "rsdnet@random"]
        unique = []
        for method in rows:
            if method not in unique:
                unique.append(method)
        for method in unique:
            if not is_model_method(method) and method not in baselines.METHODS:
                raise ConfigError(f"Unknown method '{method}'")
        return unique

    def run(self) -> Dict[str, evalkit.EvalReport]:
        methods = self.methods()
        logging.info(f"Experiment {self.config_hash}: {', '.join(methods)}")
        self.generate()
        self.split()
        model_rows = [m for m in methods if is_model_method(m)]
        if "progress-derived" in methods and "rsdnet" not in model_rows:
            model_rows.insert(0, "rsdnet")
        for method in model_rows:
            self.run_model(ModelRow.parse(method))
        for method in methods:
            if not is_model_method(method):
                for fold in range(self.folds):
                    self.run_baseline(method, fold)
        reports = {method: self.evaluate(method) for method in methods}
        if "rsdnet" in model_rows:
            self.cells(ModelRow.parse("rsdnet"), 0)
        self.write_comparison(reports)
        return reports

    def ablate_no_finetune(self) -> Dict[str, evalkit.EvalReport]:
        self.generate()
        self.split()
        reports = {}
        for method in ("rsdnet", "rsdnet@random"):
            self.run_model(ModelRow.parse(method))
            reports[method] = self.evaluate(method)
        self.write_comparison(reports, "ablation")
        return reports

    def write_comparison(self, reports: Dict[str, evalkit.EvalReport], name: str = "comparison") -> str:
        findings = self.findings(reports)
        text = evalkit.compare_reports(list(reports.values()))
        if findings:
            text += "\nFindings\n" + "".join(
                f"  {key}: {value}\n" for key, value in sorted(findings.items())
            )
        path = self.path("evaluate", f"{name}.txt")
        atomic_write_bytes(path, text.encode("utf-8"))
        atomic_write_bytes(
            self.path("evaluate", f"{name}.json"),
            canonical_json({**self.provenance(), "findings": findings}).encode("utf-8"),
        )
        print(text, end="")
        return path

    def sibling_finding(self, preset: str, key: str) -> Optional[Any]:
        """A finding of the same experiment run on another preset, if that run exists."""
        other = self.config.with_override("dataset.preset", preset)
        root = os.path.join(self.config.get("experiment.out_dir", "out"), other.config_hash())
        path = os.path.join(root, "evaluate", "comparison.json")
        if not os.path.exists(path):
            logging.info(f"No {preset} comparison at {path}; run `rsdkit --preset {preset} run` first")
            return None
        with open(path, "r") as f:
            return json.load(f).get("findings", {}).get(key)

    def findings(self, reports: Dict[str, evalkit.EvalReport]) -> Dict[str, Any]:
        """Ordering checks of the learned methods against their comparison rows."""
        mae = {m: r.mae() for m, r in reports.items()}

        def complete(method: str) -> Optional[float]:
            return mae[method]["complete"].mean if method in mae else None

        out: Dict[str, Any] = {}
        rsdnet = complete("rsdnet")
        if rsdnet is None:
            return out
        naive = complete("naive-median")
        if naive is not None:
            out["rsdnet_le_0.9_naive_median"] = rsdnet <= 0.9 * naive
            mean_duration = float(np.mean([rec.total_duration_T for rec, _ in self.load_dataset()[1]]))
            gaps = []
            for cat in ("short", "long"):
                ours, theirs = mae["rsdnet"][cat].mean, mae["naive-median"][cat].mean
                if ours is not None and theirs is not None:
                    out[f"rsdnet_beats_naive_median_{cat}"] = ours < theirs
                    gaps.append((theirs - ours) / mean_duration)
            if len(gaps) == 2:
                # naive minus RSDNet, in units of the mean surgery duration
                gap = float(np.mean(gaps))
                out["short_long_gap_normalized"] = round(gap, 6)
                if self.config.get("dataset.preset", "cholec") == "bypass":
                    cholec_gap = self.sibling_finding("cholec", "short_long_gap_normalized")
                    if cholec_gap is not None:
                        out["bypass_gap_exceeds_cholec"] = gap > cholec_gap
        derived = complete("progress-derived")
        if derived is not None:
            out["direct_beats_progress_derived"] = rsdnet < derived
        single = complete("single")
        if single is not None:
            out["multitask_within_single_plus_0.5"] = rsdnet <= single + 0.5
        random_encoder = complete("rsdnet@random")
        if random_encoder is not None:
            out["no_finetune_worse"] = random_encoder > rsdnet
        for method in reports:
            if method.startswith("rsdnet@") and method.endswith("classification"):
                other = complete(method)
                out[f"progress_regression_beats_{method.split('@')[1]}"] = rsdnet < other

        quarters = reports["rsdnet"].under_over()
        short_over = [q.over_frac for q in quarters["short"] if q.over_frac is not None]
        long_under = [q.under_frac for q in quarters["long"] if q.under_frac is not None]
        if short_over:
            out["short_over_fraction"] = round(float(np.mean(short_over)), 4)
        if long_under:
            out["long_under_fraction"] = round(float(np.mean(long_under)), 4)
        first, last = quarters["complete"][0].over_frac, quarters["complete"][-1].over_frac
        if first is not None and last is not None:
            out["final_quarter_over_ge_first"] = last >= first

        ckpt_path = os.path.join(self.root, "encoder", "progress-regression", "fold0.rsdc")
        if os.path.exists(ckpt_path):
            val = read_checkpoint(ckpt_path, "encoder").metadata.get("val_metrics", {})
            if "mae" in val:
                out["encoder_progress_v_mae"] = round(float(val["mae"]), 4)
        rsd_ckpt = os.path.join(self.root, "encoder", "rsd-regression", "fold0.rsdc")
        if os.path.exists(rsd_ckpt):
            checkpoint = read_checkpoint(rsd_ckpt, "encoder")
            _, dataset = self.load_dataset()
            by_id = index_dataset(dataset)
            v_seqs = [by_id[sid][1] for sid in self.fold_split(0).v_ids]
            baseline_mae = mean_predictor_mae(checkpoint, v_seqs)
            model_mae = float(checkpoint.metadata.get("val_metrics", {}).get("mae", np.inf))
            out["encoder_rsd_regression_no_better_than_mean"] = model_mae >= baseline_mae

        cell_dir = os.path.join(self.root, "cells", "rsdnet", "fold0")
        if os.path.isdir(cell_dir):
            monotone, cue = False, False
            for name in sorted(os.listdir(cell_dir)):
                if name.endswith(".stats.csv"):
                    stats = pd.read_csv(os.path.join(cell_dir, name))
                    monotone |= bool((stats["spearman_t"].abs() > 0.9).any())
                    cue |= bool((stats["cue_separation"] > 2.0).any())
            out["monotone_cell_found"] = monotone
            out["cue_cell_found"] = cue
        return out


# --- command line ----------------------------------------------------------


def task_row(task: str) -> str:
    """RSDNet row whose stage-one encoder solves `task`."""
    kind = task.replace("_", "-")
    return "rsdnet" if kind == "progress-regression" else f"rsdnet@{kind}"


def parse_fold(text: str) -> int:
    """`2` or `fold2`."""
    try:
        return int(text[4:] if text.startswith("fold") else text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid fold '{text}' (expected k or fold<k>)")


def add_fold_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--fold", "--split", dest="fold", type=parse_fold, help="Single fold (default: all)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Remaining surgery duration estimation on synthetic surgeries"
    )
    parser.add_argument("--config", default="config.json", help="Configuration file path")
    parser.add_argument("--verbose", "-v", action="store_true", help="Enable verbose logging")
    parser.add_argument("--preset", help="Workflow preset (cholec, bypass)")
    parser.add_argument("--time-scale", type=float, help="Multiplier on every phase duration")
    parser.add_argument("--seed", type=int, help="Master training seed")
    parser.add_argument("--folds", type=int, help="Number of cross-validation folds")
    parser.add_argument("--threads", type=int, help="Thread bound per stage (RSDKIT_THREADS)")
    parser.add_argument("--out", help="Artifact root directory", metavar="DIR")
    parser.add_argument(
        "--force", action="store_true", help="Rebuild artifacts that already exist"
    )

    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="Generate the synthetic dataset")
    gen.add_argument("--n", type=int, help="Number of surgeries")
    gen.add_argument("--dataset-seed", "--seed", dest="dataset_seed", type=int, help="Dataset seed")
    gen.add_argument("--out", dest="output", help="Also copy the dataset file here", metavar="FILE")
    gen.add_argument("--export", help="Also export frames as CSV or JSONL", metavar="FILE")

    sub.add_parser("split", help="Build the T1/T2/V/E folds")

    enc = sub.add_parser("encoder", help="Stage one: frame encoder")
    enc.add_argument("action", choices=["train", "extract"])
    enc.add_argument("--method", default="rsdnet", help="Row whose encoder to build (e.g. rsdnet@rsd-classification)")
    enc.add_argument("--task", help="Encoder task (e.g. progress-regression); overrides --method")
    add_fold_arguments(enc)
    enc.add_argument("--data", help="Dataset file to use instead of the artifact tree", metavar="FILE")
    enc.add_argument("--ckpt", help="Checkpoint written by `train`, read by `extract`", metavar="FILE")
    enc.add_argument("--out", dest="output", help="Checkpoint (train) or feature file (extract)", metavar="FILE")

    lstm = sub.add_parser("rsdlstm", help="Stage two: sequence model")
    lstm.add_argument("action", choices=["train", "predict", "cells"])
    lstm.add_argument("--method", "--variant", dest="method", default="rsdnet", help="LSTM row")
    add_fold_arguments(lstm)
    lstm.add_argument("--surgery", action="append", help="Surgery id for `cells` (repeatable)")
    lstm.add_argument("--ckpt", help="Checkpoint read by `predict` and `cells`", metavar="FILE")
    lstm.add_argument("--out", dest="output", help="Checkpoint, trace or cell file to write", metavar="FILE")

    base = sub.add_parser("baselines", help="Closed-form baselines")
    base.add_argument("action", choices=["run"])
    base.add_argument("--method", action="append", help=f"One of {', '.join(baselines.METHODS)}")
    add_fold_arguments(base)
    base.add_argument("--out", dest="output", help="Trace file for a single method and fold", metavar="FILE")

    ev = sub.add_parser("evaluate", help="Evaluate traces and write reports")
    ev.add_argument("--methods", help="Comma-separated methods (default: experiment.methods)")

    run = sub.add_parser("run", help="Run the whole experiment")
    run.add_argument("--methods", help="Comma-separated methods")
    run.add_argument("--cnn-train-sizes", help="Comma-separated T1 sizes for extra RSDNet rows")
    run.add_argument("--encoder-tasks", help="Comma-separated encoder tasks for extra RSDNet rows")
    run.add_argument("--ablate-no-finetune", action="store_true", help="Add the random-encoder row")

    sub.add_parser("ablate-no-finetune", help="RSDNet on frozen random-encoder features")
    return parser


def apply_overrides(config: ConfigManager, args: argparse.Namespace) -> None:
    config.set_override("dataset.preset", args.preset)
    config.set_override("dataset.time_scale", args.time_scale)
    config.set_override("experiment.seed", args.seed)
    config.set_override("splits.folds", args.folds)
    config.set_override("experiment.threads", args.threads)
    config.set_override("experiment.out_dir", args.out)
    config.set_override("dataset.n_surgeries", getattr(args, "n", None))
    config.set_override("dataset.seed", getattr(args, "dataset_seed", None))
    if getattr(args, "methods", None):
        config.set_override("experiment.methods", parse_list(args.methods))
    if getattr(args, "cnn_train_sizes", None):
        config.set_override("experiment.cnn_train_sizes", parse_list(args.cnn_train_sizes))
    if getattr(args, "encoder_tasks", None):
        config.set_override("experiment.encoder_tasks", parse_list(args.encoder_tasks))
    if getattr(args, "ablate_no_finetune", False):
        config.set_override("experiment.ablate_no_finetune", True)


def dispatch(runner: ExperimentRunner, args: argparse.Namespace) -> None:
    folds = [args.fold] if getattr(args, "fold", None) is not None else list(range(runner.folds))
    output = getattr(args, "output", None)
    explicit = output or getattr(args, "ckpt", None)
    if explicit and args.command in ("encoder", "rsdlstm", "baselines") and len(folds) != 1:
        raise ConfigError("--out and --ckpt name a single artifact; pick one fold with --fold")
    if getattr(args, "data", None):
        runner.attach_dataset(args.data)
    if args.command == "generate":
        runner.generate(export=args.export, copy_to=output)
    elif args.command == "split":
        runner.split()
    elif args.command == "encoder":
        row = ModelRow.parse(task_row(args.task) if args.task else args.method)
        for fold in folds:
            if args.action == "train":
                runner.train_encoder(row, fold, output or args.ckpt)
            else:
                runner.extract(row, fold, args.ckpt, output)
    elif args.command == "rsdlstm":
        row = ModelRow.parse(args.method)
        for fold in folds:
            if args.action == "train":
                runner.train_lstm(row, fold, output)
            elif args.action == "predict":
                runner.predict(row, fold, args.ckpt, output)
            else:
                runner.cells(row, fold, args.surgery, args.ckpt, output)
    elif args.command == "baselines":
        methods = args.method or [m for m in runner.methods() if not is_model_method(m)]
        if output and len(methods) != 1:
            raise ConfigError("--out names a single trace file; pick one --method")
        for method in methods:
            if method not in baselines.METHODS:
                raise ConfigError(f"Unknown baseline '{method}'. Available: {list(baselines.METHODS)}")
            for fold in folds:
                runner.run_baseline(method, fold, output)
    elif args.command == "evaluate":
        reports = {method: runner.evaluate(method) for method in runner.methods()}
        runner.write_comparison(reports)
    elif args.command == "run":
        runner.run()
    elif args.command == "ablate-no-finetune":
        runner.ablate_no_finetune()


def main(argv: Optional[Sequence[str]] = None) -> None:
    """Entry point."""
    load_dotenv()  # Load environment variables from .env file

    args = build_parser().parse_args(argv)

    try:
        config = ConfigManager(args.config)
        apply_overrides(config, args)
        setup_logging(config, args.verbose)
        runner = ExperimentRunner(config, force=args.force)
        logging.info(f"rsdkit {args.command} (config {runner.config_hash}, root {runner.root})")
        dispatch(runner, args)
    except RsdKitError as e:
        logging.error(f"{type(e).__name__}: {e}")
        sys.exit(e.exit_code)
    except KeyboardInterrupt:
        print("\nOperation cancelled by user")
        sys.exit(1)
    except Exception as e:
        logging.error(f"Fatal error: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
