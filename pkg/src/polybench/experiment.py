"""Config-driven experiment runs.

A run lives in ``<output_dir>/<run_id>/`` where ``run_id`` is a UTC timestamp
plus the first 12 hex digits of the config digest. Re-running a command with
the same config finds the existing directory and skips work whose recorded
artifacts are still intact. Layout::

    manifest.csv  images/  foldplan.json
    models/<classifier>/fold_XX/{model.json | model.safetensors, history.json, meta.json}
    reports/{metrics.json, table.csv, *_sensitivity.png, *_precision.png, folds/}
    run.json  access_log.jsonl  config.ini
"""

from __future__ import annotations

import configparser
import copy
import datetime as _dt
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from ._util import atomic_write_text, sha256_bytes, sha256_file, stable_seed
from .dataset import (build_augmented_dataset, load_foldplan, load_manifest, make_folds, save_foldplan,
                      save_manifest)
from .errors import ConfigError, DigestMismatchError, MissingArtifactError, PolybenchError
from .metrics import EvalReport, aggregate_folds, load_metrics, render_report, write_metrics
from .phantom_synth import DIFFICULTY_PRESETS, GeneratorConfig, enumerate_phantom_grid, generate_corpus

log = logging.getLogger(__name__)

CLASSIFIERS = ("svm", "resnet_scratch", "resnet_pretrained")
N_FOLDS = 12

DEFAULTS = {
    "experiment": {
        "master_seed": 0,
        "difficulty": "hard",
        "fold_mode": "grouped",
        "classifiers": "svm,resnet_scratch,resnet_pretrained",
        "folds": "all",
        "profile": "full",
        "output_dir": "runs",
        "cache_dir": "",
        "jobs": 1,
    },
    "generator": {
        "noise_amplitude": "default",
        "motif_contrast": "default",
    },
    "svm": {
        "degree": 3,
        "gamma": "auto",
        "coef0": 0.0,
        "c_grid": "0.01,0.1,1,10,100,1000",
        "inner_folds": 3,
    },
    "resnet_scratch": {
        "learning_rate": 0.001,
        "max_epochs": 50,
        "patience": 10,
        "batch_size": 32,
        "momentum": 0.9,
        "weight_decay": 0.0,
        "image_size": 224,
    },
    "resnet_pretrained": {
        "learning_rate": 0.0001,
        "max_epochs": 20,
        "patience": 5,
        "batch_size": 32,
        "momentum": 0.9,
        "weight_decay": 0.0,
        "image_size": 224,
        "weights": "proxy",
    },
    "proxy_pretrain": {
        "n_per_class": 128,
        "epochs": 15,
        "learning_rate": 0.05,
        "momentum": 0.9,
        "batch_size": 32,
        "image_size": 224,
        "seed": 20221,
    },
}

# The quick profile trades resolution and epochs for wall-clock: 64 px inputs,
# a shorter scratch budget and three folds whose test quarters all differ.
PROFILES = {
    "full": {},
    "quick": {
        "experiment": {"folds": "0,3,7"},
        "resnet_scratch": {"image_size": 64, "max_epochs": 20, "patience": 5},
        "resnet_pretrained": {"image_size": 64},
        "proxy_pretrain": {"image_size": 64},
    },
}

# settings that change where or how fast a run executes, never its results
RUNTIME_KEYS = {("experiment", "output_dir"), ("experiment", "cache_dir"), ("experiment", "jobs")}

DOC = {
    "master_seed": "seeds generation, fold dealing and every training stream",
    "difficulty": "generator preset: easy | hard",
    "fold_mode": "grouped keeps all 8 variants of a phantom in one split; pooled deals samples",
    "classifiers": "comma list from svm, resnet_scratch, resnet_pretrained",
    "folds": "'all' or a comma list / ranges of fold ids 0-11",
    "profile": "full | quick (applied before this file's own values)",
    "output_dir": "parent directory of run directories",
    "cache_dir": "where proxy weights are cached; empty means <output_dir>/cache",
    "jobs": "parallel fold workers",
    "noise_amplitude": "'default' follows the difficulty preset",
    "gamma": "'auto' is 1 / (n_features * variance of the training features)",
    "weights": "'proxy' pretrains on generic textures (cached), or a path to a weights file",
}


def _coerce(section: str, key: str, raw):
    default = DEFAULTS[section][key]
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"[{section}] {key}: expected {type(default).__name__}, got {raw!r}") from None
    return str(raw)


def parse_fold_list(text: str) -> tuple[int, ...] | None:
    text = str(text).strip().lower()
    if text in ("", "all"):
        return None
    out = []
    for part in text.split(","):
        part = part.strip()
        try:
            if "-" in part:
                lo, hi = (int(v) for v in part.split("-", 1))
                out.extend(range(lo, hi + 1))
            else:
                out.append(int(part))
        except ValueError:
            raise ConfigError(f"bad fold list {text!r}") from None
    bad = [f for f in out if not 0 <= f < N_FOLDS]
    if bad:
        raise ConfigError(f"fold ids out of range 0-{N_FOLDS - 1}: {bad}")
    return tuple(sorted(set(out)))


@dataclass
class ExperimentConfig:
    """Typed view over ``{section: {key: value}}`` settings."""

    values: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __post_init__(self):
        self.validate()

    def get(self, section: str, key: str):
        return self.values[section][key]

    @property
    def master_seed(self) -> int:
        return self.get("experiment", "master_seed")

    @property
    def difficulty(self) -> str:
        return self.get("experiment", "difficulty")

    @property
    def fold_mode(self) -> str:
        return self.get("experiment", "fold_mode")

    @property
    def classifiers(self) -> tuple[str, ...]:
        return tuple(c.strip() for c in self.get("experiment", "classifiers").split(",") if c.strip())

    @property
    def folds(self) -> tuple[int, ...]:
        sel = parse_fold_list(self.get("experiment", "folds"))
        return tuple(range(N_FOLDS)) if sel is None else sel

    @property
    def output_dir(self) -> Path:
        return Path(self.get("experiment", "output_dir"))

    @property
    def cache_dir(self) -> Path:
        raw = self.get("experiment", "cache_dir")
        return Path(raw) if raw else self.output_dir / "cache"

    @property
    def jobs(self) -> int:
        return self.get("experiment", "jobs")

    def validate(self) -> None:
        e = self.values["experiment"]
        if e["difficulty"] not in DIFFICULTY_PRESETS:
            raise ConfigError(f"[experiment] difficulty must be one of {sorted(DIFFICULTY_PRESETS)}")
        if e["fold_mode"] not in ("grouped", "pooled"):
            raise ConfigError("[experiment] fold_mode must be grouped or pooled")
        if e["profile"] not in PROFILES:
            raise ConfigError(f"[experiment] profile must be one of {sorted(PROFILES)}")
        unknown = [c for c in self.classifiers if c not in CLASSIFIERS]
        if unknown or not self.classifiers:
            raise ConfigError(f"[experiment] classifiers must be a non-empty subset of {CLASSIFIERS}, got {unknown}")
        if e["jobs"] < 1:
            raise ConfigError("[experiment] jobs must be >= 1")
        parse_fold_list(e["folds"])
        try:
            self.generator_config()
            self.kernel_config()
            for clf in ("resnet_scratch", "resnet_pretrained"):
                self.cnn_config(clf, 0)
            self.proxy_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        grid = self.c_grid
        if not grid or min(grid) <= 0:
            raise ConfigError("[svm] c_grid must list positive values")
        if self.get("svm", "inner_folds") < 2:
            raise ConfigError("[svm] inner_folds must be >= 2")

    def generator_config(self) -> GeneratorConfig:
        g = self.values["generator"]
        return GeneratorConfig.from_mapping({
            "difficulty": self.difficulty, "master_seed": self.master_seed,
            "noise_amplitude": g["noise_amplitude"], "motif_contrast": g["motif_contrast"]})

    def kernel_config(self):
        from .svm import KernelConfig

        s = self.values["svm"]
        gamma = None if s["gamma"].lower() in ("auto", "") else float(s["gamma"])
        return KernelConfig("polynomial", s["degree"], gamma, s["coef0"])

    @property
    def c_grid(self) -> tuple[float, ...]:
        try:
            return tuple(float(v) for v in self.get("svm", "c_grid").split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"[svm] c_grid: not a list of numbers: {self.get('svm', 'c_grid')!r}") from None

    def cnn_config(self, classifier: str, seed: int):
        from .cnn import CNNConfig

        s = {k: v for k, v in self.values[classifier].items() if k != "weights"}
        regime = "scratch" if classifier == "resnet_scratch" else "pretrained"
        return CNNConfig(regime=regime, seed=seed, **s)

    def proxy_config(self):
        from .pretrain import ProxyPretrainConfig

        return ProxyPretrainConfig(**self.values["proxy_pretrain"])

    def result_values(self) -> dict:
        return {sec: {k: v for k, v in kv.items() if (sec, k) not in RUNTIME_KEYS}
                for sec, kv in self.values.items()}

    def digest(self) -> str:
        return sha256_bytes(json.dumps(self.result_values(), sort_keys=True).encode("utf-8"))

    def to_ini(self, with_docs: bool = False) -> str:
        buf = io.StringIO()
        for sec, kv in self.values.items():
            buf.write(f"[{sec}]\n")
            for k, v in kv.items():
                if with_docs and k in DOC:
                    buf.write(f"# {DOC[k]}\n")
                buf.write(f"{k} = {v}\n")
            buf.write("\n")
        return buf.getvalue()


def default_values(profile: str = "full") -> dict:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    values = copy.deepcopy(DEFAULTS)
    for sec, kv in PROFILES[profile].items():
        values[sec].update(kv)
    values["experiment"]["profile"] = profile
    return values


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the profile preset, then the file, then ``overrides``.

    ``overrides`` maps ``(section, key)`` to a value; ``None`` values are ignored.
    """
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    parser = configparser.ConfigParser(interpolation=None)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            parser.read_string(path.read_text(encoding="utf-8"), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if parser.defaults():
            raise ConfigError(f"{path}: keys outside a section are not allowed")
    profile = overrides.get(("experiment", "profile"))
    if profile is None and parser.has_option("experiment", "profile"):
        profile = parser.get("experiment", "profile").strip()
    values = default_values(profile or "full")
    for sec in parser.sections():
        if sec not in DEFAULTS:
            raise ConfigError(f"unknown config section [{sec}]")
        for key, raw in parser.items(sec):
            if key not in DEFAULTS[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            values[sec][key] = _coerce(sec, key, raw)
    for (sec, key), raw in overrides.items():
        if sec not in DEFAULTS or key not in DEFAULTS[sec]:
            raise ConfigError(f"unknown setting {sec}.{key}")
        values[sec][key] = _coerce(sec, key, raw)
    return ExperimentConfig(values)


# --------------------------------------------------------------------------
# run directory and record

@dataclass
class RunRecord:
    run_id: str
    config: dict
    config_digest: str
    tool_version: str = __version__
    artifacts: dict = field(default_factory=dict)  # name -> {"path", "sha256"}
    models: dict = field(default_factory=dict)  # classifier -> fold id (str) -> entry
    reports: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))


class Run:
    """Handle on one run directory and its record."""

    def __init__(self, cfg: ExperimentConfig, create: bool = True):
        self.cfg = cfg
        self.dir = locate_run_dir(cfg, create)
        rec_path = self.dir / "run.json"
        if rec_path.exists():
            self.record = RunRecord.from_json(rec_path.read_text(encoding="utf-8"))
            if self.record.config_digest != cfg.digest():
                raise DigestMismatchError(
                    f"{rec_path}: config digest {self.record.config_digest} does not match {cfg.digest()}")
        else:
            self.record = RunRecord(self.dir.name, cfg.result_values(), cfg.digest())
            atomic_write_text(self.dir / "config.ini", cfg.to_ini())
            self.save()

    @property
    def manifest_path(self) -> Path:
        return self.dir / "manifest.csv"

    @property
    def foldplan_path(self) -> Path:
        return self.dir / "foldplan.json"

    @property
    def reports_dir(self) -> Path:
        return self.dir / "reports"

    def model_dir(self, classifier: str, fold_id: int) -> Path:
        return self.dir / "models" / classifier / f"fold_{fold_id:02d}"

    def save(self) -> None:
        atomic_write_text(self.dir / "run.json", self.record.to_json())

    def timed(self, stage: str, seconds: float) -> None:
        self.record.timings[stage] = round(seconds, 3)

    def audit(self, entries) -> None:
        with open(self.dir / "access_log.jsonl", "a", encoding="utf-8") as fh:
            for e in entries:
                fh.write(json.dumps(e, sort_keys=True) + "\n")

    def rel(self, path: Path) -> str:
        return Path(path).relative_to(self.dir).as_posix()

    def record_artifact(self, name: str, path: Path) -> str:
        digest = sha256_file(path)
        self.record.artifacts[name] = {"path": self.rel(path), "sha256": digest}
        return digest

    def check_artifact(self, name: str, path: Path, hint: str) -> None:
        """Raise unless ``path`` exists and matches the digest recorded for ``name``."""
        if not path.exists():
            raise MissingArtifactError(f"{path} not found; run `polybench {hint}` first")
        entry = self.record.artifacts.get(name)
        if entry is None:
            raise MissingArtifactError(f"{path} is not recorded in run.json; run `polybench {hint}` first")
        check_digest(path, entry["sha256"])


def check_digest(path: Path, expected: str) -> None:
    actual = sha256_file(path)
    if actual != expected:
        raise DigestMismatchError(f"{path}: expected sha256 {expected}, got {actual}")


def locate_run_dir(cfg: ExperimentConfig, create: bool = True) -> Path:
    prefix = cfg.digest()[:12]
    root = cfg.output_dir
    existing = sorted(p for p in root.glob(f"*-{prefix}") if p.is_dir()) if root.exists() else []
    if existing:
        return existing[-1]
    if not create:
        raise MissingArtifactError(f"no run directory for config digest {prefix} under {root}; run `polybench generate`")
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    path = root / f"{stamp}-{prefix}"
    path.mkdir(parents=True, exist_ok=False)
    return path


def stage_seed(cfg: ExperimentConfig, stage: str, fold_id=None, classifier=None) -> int:
    return stable_seed(cfg.master_seed, stage, fold_id, classifier)


# --------------------------------------------------------------------------
# stages

def cmd_generate(cfg: ExperimentConfig, force: bool = False) -> Path:
    """Render the 48 phantoms, augment to 384 samples and write ``manifest.csv``."""
    run = Run(cfg)
    t0 = time.perf_counter()
    if not force and "manifest" in run.record.artifacts and run.manifest_path.exists():
        try:
            run.check_artifact("manifest", run.manifest_path, "generate")
            load_manifest(run.manifest_path, verify=True)
            log.info("manifest up to date: %s", run.manifest_path)
            return run.manifest_path
        except (DigestMismatchError, MissingArtifactError) as exc:
            log.warning("regenerating: %s", exc)
    corpus = generate_corpus(enumerate_phantom_grid(), config=cfg.generator_config())
    manifest = build_augmented_dataset(corpus, run.dir, cfg.master_seed, cfg.difficulty)
    save_manifest(manifest, run.manifest_path)
    old = run.record.artifacts.get("manifest", {}).get("sha256")
    if run.record_artifact("manifest", run.manifest_path) != old:
        _invalidate(run, "manifest")
    run.timed("generate", time.perf_counter() - t0)
    run.save()
    log.info("wrote %d samples to %s", len(manifest), run.manifest_path)
    return run.manifest_path


def _invalidate(run: Run, upstream: str) -> None:
    """Forget records derived from an artifact that changed."""
    if upstream == "manifest":
        run.record.artifacts.pop("foldplan", None)
    run.record.models.clear()
    run.record.reports.clear()
    run.record.artifacts.pop("metrics", None)


def _load_manifest(run: Run):
    run.check_artifact("manifest", run.manifest_path, "generate")
    return load_manifest(run.manifest_path, verify=True)


def cmd_split(cfg: ExperimentConfig, force: bool = False) -> Path:
    """Deal the manifest into 12 train/val/test folds and write ``foldplan.json``."""
    run = Run(cfg, create=False)
    t0 = time.perf_counter()
    manifest = _load_manifest(run)
    if not force and "foldplan" in run.record.artifacts and run.foldplan_path.exists():
        try:
            run.check_artifact("foldplan", run.foldplan_path, "split")
            log.info("fold plan up to date: %s", run.foldplan_path)
            return run.foldplan_path
        except DigestMismatchError as exc:
            log.warning("re-splitting: %s", exc)
    plan = make_folds(manifest, cfg.fold_mode, stage_seed(cfg, "split"))
    save_foldplan(plan, run.foldplan_path)
    old = run.record.artifacts.get("foldplan", {}).get("sha256")
    if run.record_artifact("foldplan", run.foldplan_path) != old:
        _invalidate(run, "foldplan")
    run.timed("split", time.perf_counter() - t0)
    run.save()
    return run.foldplan_path


def _load_plan(run: Run, manifest):
    run.check_artifact("foldplan", run.foldplan_path, "split")
    return load_foldplan(run.foldplan_path, manifest)


class _SplitReader:
    """Hands out fold splits and logs each access for the audit trail."""

    def __init__(self, manifest, plan, stage: str):
        self.manifest, self.plan, self.stage = manifest, plan, stage
        self.by_id = manifest.by_id()
        self.entries = []

    def load(self, fold_id: int, role: str):
        if role == "test" and self.stage != "evaluate":
            raise PolybenchError(f"stage {self.stage!r} may not read the test split")
        self.entries.append({"stage": self.stage, "fold": fold_id, "role": role})
        ids = self.plan.folds[fold_id].split(role)
        samples = [self.by_id[i] for i in ids]
        images = np.stack([self.manifest.load_image(s).pixels for s in samples])
        return list(ids), images, [s.class_label for s in samples], [s.base_id for s in samples]


def resolve_pretrained_weights(cfg: ExperimentConfig) -> Path:
    """Configured weights file, or cached proxy weights (pretrained on first use)."""
    from .pretrain import proxy_pretrain

    raw = cfg.get("resnet_pretrained", "weights").strip()
    if raw.lower() != "proxy":
        path = Path(raw).expanduser()
        if not path.exists():
            raise MissingArtifactError(f"pretrained weights not found: {path}")
        return path
    pcfg = cfg.proxy_config()
    path = cfg.cache_dir / f"proxy-{pcfg.digest()}.safetensors"
    if not path.exists():
        log.info("pretraining proxy weights -> %s (one-off, cached)", path)
        path.parent.mkdir(parents=True, exist_ok=True)
        proxy_pretrain(pcfg, path)
    return path


def _train_task(run_dir: str, values: dict, classifier: str, fold_id: int, weights: str | None,
                threads: int | None = None) -> dict:
    """Train one (classifier, fold); runs in-process or in a worker."""
    if threads:
        import torch

        torch.set_num_threads(threads)
    cfg = ExperimentConfig(values)
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir / "manifest.csv", verify=False)
    plan = load_foldplan(run_dir / "foldplan.json", manifest)
    reader = _SplitReader(manifest, plan, "train")
    seed = stage_seed(cfg, "train", fold_id, classifier)
    out = run_dir / "models" / classifier / f"fold_{fold_id:02d}"
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if classifier == "svm":
        meta = _train_svm(cfg, reader, fold_id, seed, out)
        model_path = out / "model.json"
    else:
        meta = _train_cnn(cfg, reader, classifier, fold_id, seed, out, weights)
        model_path = out / "model.safetensors"
    meta.update({"classifier": classifier, "fold": fold_id, "seed": seed})
    atomic_write_text(out / "meta.json", json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return {
        "classifier": classifier, "fold": fold_id,
        "entry": {"path": model_path.relative_to(run_dir).as_posix(), "sha256": sha256_file(model_path),
                  "meta": "models/" + f"{classifier}/fold_{fold_id:02d}/meta.json",
                  "seconds": round(time.perf_counter() - t0, 3)},
        "access": reader.entries,
    }


def _train_svm(cfg, reader, fold_id, seed, out) -> dict:
    from .svm import flatten_features, grid_search_C, save_model, svm_fit

    _, images, labels, groups = reader.load(fold_id, "train")
    X = np.stack([flatten_features(im) for im in images])
    kcfg = cfg.kernel_config().resolved(X)
    best_c, scores = grid_search_C(X, labels, cfg.c_grid, cfg.get("svm", "inner_folds"), seed, kcfg,
                                   groups if cfg.fold_mode == "grouped" else None)
    model = svm_fit(X, labels, best_c, kcfg)
    save_model(model, out / "model.json")
    return {"best_C": best_c, "grid_scores": {repr(c): s for c, s in scores.items()},
            "gamma": kcfg.gamma, "val_accuracy": None}


def _train_cnn(cfg, reader, classifier, fold_id, seed, out, weights) -> dict:
    from .cnn import build_resnet18, save_cnn, train

    _, x_tr, y_tr, _ = reader.load(fold_id, "train")
    _, x_va, y_va, _ = reader.load(fold_id, "val")
    ccfg = cfg.cnn_config(classifier, seed)
    model = build_resnet18(regime=ccfg.regime, seed=seed, weights_path=weights)
    model, history = train(model, x_tr, y_tr, x_va, y_va, ccfg)
    save_cnn(model, out / "model.safetensors")
    atomic_write_text(out / "history.json", json.dumps(history.to_dict(), indent=1) + "\n")
    best = history.epochs[history.best_epoch - 1]
    return {"best_epoch": history.best_epoch, "stopped_epoch": history.stopped_epoch,
            "val_loss": best["val_loss"], "val_accuracy": best["val_accuracy"],
            "source_checksum": model.meta.get("source_checksum")}


def _model_current(run: Run, classifier: str, fold_id: int) -> bool:
    entry = run.record.models.get(classifier, {}).get(str(fold_id))
    if entry is None:
        return False
    path = run.dir / entry["path"]
    return path.exists() and sha256_file(path) == entry["sha256"] and (run.dir / entry["meta"]).exists()


def cmd_train(cfg: ExperimentConfig, classifiers=None, folds=None, force: bool = False) -> dict:
    """Train the selected classifiers on the selected folds; returns the model records."""
    run = Run(cfg, create=False)
    t0 = time.perf_counter()
    manifest = _load_manifest(run)
    _load_plan(run, manifest)
    classifiers = tuple(classifiers or cfg.classifiers)
    folds = tuple(cfg.folds if folds is None else folds)
    for c in classifiers:
        if c not in CLASSIFIERS:
            raise ConfigError(f"unknown classifier {c!r}")
    tasks = [(c, f) for c in classifiers for f in folds if force or not _model_current(run, c, f)]
    if not tasks:
        log.info("all models up to date")
        return run.record.models
    weights = None
    if any(c == "resnet_pretrained" for c, _ in tasks):
        weights = resolve_pretrained_weights(cfg)
        run.record.artifacts["pretrained_weights"] = {"path": str(weights), "sha256": sha256_file(weights)}
        run.save()
    weights = None if weights is None else str(weights)
    args = [(str(run.dir), cfg.values, c, f, weights) for c, f in tasks]
    if cfg.jobs > 1 and len(tasks) > 1:
        import multiprocessing as mp

        threads = max(1, (os.cpu_count() or 1) // cfg.jobs)
        with ProcessPoolExecutor(cfg.jobs, mp_context=mp.get_context("spawn")) as pool:
            results = list(pool.map(_train_task, *zip(*args), [threads] * len(args)))
    else:
        results = []
        for a in args:
            log.info("training %s fold %d", a[2], a[3])
            results.append(_train_task(*a))
    for res in results:
        run.audit(res["access"])
        run.record.models.setdefault(res["classifier"], {})[str(res["fold"])] = res["entry"]
    run.record.reports.clear()
    run.record.artifacts.pop("metrics", None)
    run.timed("train", time.perf_counter() - t0)
    run.save()
    return run.record.models


def _predict(run: Run, classifier: str, fold_id: int, images):
    entry = run.record.models.get(classifier, {}).get(str(fold_id))
    if entry is None:
        raise MissingArtifactError(f"no trained {classifier} model for fold {fold_id}; run `polybench train`")
    path = run.dir / entry["path"]
    if not path.exists():
        raise MissingArtifactError(f"model file not found: {path}")
    check_digest(path, entry["sha256"])
    meta = json.loads((run.dir / entry["meta"]).read_text(encoding="utf-8"))
    if classifier == "svm":
        from .svm import flatten_features, load_model, svm_predict

        model = load_model(path)
        return svm_predict(model, np.stack([flatten_features(im) for im in images])), meta
    from .cnn import cnn_predict, load_cnn

    labels, _ = cnn_predict(load_cnn(path), images)
    return labels, meta


def cmd_evaluate(cfg: ExperimentConfig) -> Path:
    """Score every trained model on its fold's test split; writes ``reports/metrics.json``."""
    run = Run(cfg, create=False)
    t0 = time.perf_counter()
    manifest = _load_manifest(run)
    plan = _load_plan(run, manifest)
    reader = _SplitReader(manifest, plan, "evaluate")
    folds = cfg.folds
    per_fold = {c: [] for c in cfg.classifiers}
    fold_dir = run.reports_dir / "folds"
    for fold_id in folds:
        ids, images, labels, _ = reader.load(fold_id, "test")
        for clf in cfg.classifiers:
            pred, meta = _predict(run, clf, fold_id, images)
            report = EvalReport.from_labels(labels, pred, meta.get("val_accuracy"))
            per_fold[clf].append(report)
            doc = {"classifier": clf, "fold": fold_id, "report": report.to_dict(),
                   "predictions": {i: p.name for i, p in zip(ids, pred)}}
            atomic_write_text(fold_dir / f"{clf}_fold_{fold_id:02d}.json",
                              json.dumps(doc, indent=1, sort_keys=True) + "\n")
    run.audit(reader.entries)
    aggs = {c: aggregate_folds(per_fold[c], folds) for c in cfg.classifiers}
    path = run.reports_dir / "metrics.json"
    write_metrics(aggs, path)
    run.record.reports = {c: {"aggregate": a.report.to_dict(),
                              "folds": {str(f): f"reports/folds/{c}_fold_{f:02d}.json" for f in folds}}
                          for c, a in aggs.items()}
    run.record_artifact("metrics", path)
    run.timed("evaluate", time.perf_counter() - t0)
    run.save()
    return path


def cmd_report(cfg: ExperimentConfig) -> list[Path]:
    """Render ``table.csv`` and the pair-wise heatmaps from ``metrics.json``."""
    run = Run(cfg, create=False)
    t0 = time.perf_counter()
    path = run.reports_dir / "metrics.json"
    run.check_artifact("metrics", path, "evaluate")
    written = render_report(load_metrics(path), run.reports_dir)
    check_digest(path, run.record.artifacts["metrics"]["sha256"])
    run.timed("report", time.perf_counter() - t0)
    run.save()
    return written


def cmd_repro_paper(cfg: ExperimentConfig, force: bool = False) -> Path:
    """generate -> split -> train -> evaluate -> report; returns the run directory."""
    t0 = time.perf_counter()
    cmd_generate(cfg, force)
    cmd_split(cfg, force)
    cmd_train(cfg, force=force)
    cmd_evaluate(cfg)
    cmd_report(cfg)
    run = Run(cfg, create=False)
    run.timed("repro_paper", time.perf_counter() - t0)
    run.save()
    return run.dir
