"""Run configuration: a flat, typed key = value file with dotted sections.

Grammar (documented here and in the README):

    - one ``key = value`` pair per line;
    - keys are lowercase identifiers, optionally dotted into a section
      (``training.lr``);
    - values are typed per key: int, float, bool (``true``/``false``),
      string, or a comma-separated list;
    - blank lines and lines starting with ``#`` are ignored (no inline
      comments — a ``#`` inside a value is literal);
    - unknown or duplicate keys are errors, never warnings.

A single top-level ``seed`` drives every stochastic component (split,
augmentation, init, shuffle, embedding).  The environment variable
``SEED``, when set, overrides the config seed.  Defaults reproduce the
training recipe exactly; ``default_config_text()`` is pinned byte for
byte against a golden file in the test suite.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

from .errors import ConfigError
from .preprocess import AugmentationPolicy, NormalizationStats
from .training import TrainingConfig
from .tsne import TsneConfig

VARIANTS = ("full", "tiny")
FUSIONS = ("mean_prob", "mean_logit")

# input_size 0 means "architecture default": 224 full, 32 tiny
_AUTO_INPUT = 0


def _parse_bool(s: str) -> bool:
    if s == "true":
        return True
    if s == "false":
        return False
    raise ValueError(f"expected 'true' or 'false', got {s!r}")


def _parse_float_list(s: str):
    return tuple(float(part.strip()) for part in s.split(",") if part.strip())


def _parse_str_list(s: str):
    return tuple(part.strip() for part in s.split(",") if part.strip())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# (key, parser, default) in dump order; the single source of truth
_SCHEMA = (
    ("data_root", str, "data"),
    ("output_dir", str, "out"),
    ("seed", int, 0),
    ("classes", _parse_str_list, ()),
    ("model.variant", str, "full"),
    ("model.fusion", str, "mean_prob"),
    ("input.size", int, _AUTO_INPUT),
    ("split.train_fraction", float, 0.8),
    ("training.lr", float, 0.0001),
    ("training.batch_size", int, 32),
    ("training.epochs", int, 50),
    ("training.weight_decay", float, 0.0001),
    ("training.optimizer", str, "adam"),
    ("training.loss", str, "cross_entropy"),
    ("training.beta1", float, 0.9),
    ("training.beta2", float, 0.999),
    ("training.eps", float, 1e-08),
    ("training.joint_training", _parse_bool, True),
    ("augment.enabled", _parse_bool, True),
    ("augment.hflip_prob", float, 0.5),
    ("augment.rotation_max_deg", float, 10.0),
    ("normalize.mean", _parse_float_list, (0.485, 0.456, 0.406)),
    ("normalize.std", _parse_float_list, (0.229, 0.224, 0.225)),
    ("tsne.perplexity", float, 30.0),
    ("tsne.iterations", int, 1000),
    ("tsne.learning_rate", float, 200.0),
)

_KNOWN = {key: parser for key, parser, _ in _SCHEMA}


@dataclass
class RunConfig:
    data_root: str
    output_dir: str
    seed: int
    classes: tuple
    variant: str
    fusion: str
    input_size: int
    train_fraction: float
    training: TrainingConfig
    augment: AugmentationPolicy
    normalize: NormalizationStats
    tsne: TsneConfig

    def resolved_input_size(self) -> int:
        if self.input_size != _AUTO_INPUT:
            return self.input_size
        return 224 if self.variant == "full" else 32


def parse_config_text(text: str) -> dict:
    """Raw key -> string mapping, with strict grammar and key checking."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _KNOWN:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        if key in values:
            raise ConfigError(f"duplicate config key {key!r} (line {lineno})")
        values[key] = value
    return values


def _typed(values: dict) -> dict:
    out = {}
    for key, parser, default in _SCHEMA:
        if key in values:
            try:
                out[key] = parser(values[key])
            except ValueError as exc:
                raise ConfigError(
                    f"config key {key!r}: cannot parse {values[key]!r} ({exc})"
                ) from exc
        else:
            out[key] = default
    return out


def build_run_config(typed: dict, env=None) -> RunConfig:
    env = env if env is not None else os.environ
    seed = typed["seed"]
    if "SEED" in env:
        try:
            seed = int(env["SEED"])
        except ValueError as exc:
            raise ConfigError(f"SEED env var must be an integer, "
                              f"got {env['SEED']!r}") from exc
    if typed["model.variant"] not in VARIANTS:
        raise ConfigError(f"model.variant must be one of {VARIANTS}, "
                          f"got {typed['model.variant']!r}")
    if typed["model.fusion"] not in FUSIONS:
        raise ConfigError(f"model.fusion must be one of {FUSIONS}, "
                          f"got {typed['model.fusion']!r}")
    if not 0.0 < typed["split.train_fraction"] < 1.0:
        raise ConfigError("split.train_fraction must lie in (0, 1)")
    try:
        training = TrainingConfig(
            lr=typed["training.lr"],
            batch_size=typed["training.batch_size"],
            epochs=typed["training.epochs"],
            weight_decay=typed["training.weight_decay"],
            optimizer=typed["training.optimizer"],
            loss=typed["training.loss"],
            beta1=typed["training.beta1"],
            beta2=typed["training.beta2"],
            eps=typed["training.eps"],
            joint_training=typed["training.joint_training"],
            seed=seed)
        augment = AugmentationPolicy(
            enabled=typed["augment.enabled"],
            hflip_prob=typed["augment.hflip_prob"],
            rotation_max_deg=typed["augment.rotation_max_deg"],
            seed=seed)
        normalize = NormalizationStats(
            mean=typed["normalize.mean"], std=typed["normalize.std"])
        tsne = TsneConfig(
            perplexity=typed["tsne.perplexity"],
            iterations=typed["tsne.iterations"],
            learning_rate=typed["tsne.learning_rate"],
            seed=seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(
        data_root=typed["data_root"],
        output_dir=typed["output_dir"],
        seed=seed,
        classes=typed["classes"],
        variant=typed["model.variant"],
        fusion=typed["model.fusion"],
        input_size=typed["input.size"],
        train_fraction=typed["split.train_fraction"],
        training=training, augment=augment, normalize=normalize, tsne=tsne)


def load_config_text(text: str, env=None) -> RunConfig:
    return build_run_config(_typed(parse_config_text(text)), env=env)


def load_config(path=None, env=None) -> RunConfig:
    """RunConfig from a file (all defaults when path is None)."""
    if path is None:
        return load_config_text("", env=env)
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return load_config_text(text, env=env)


def dump_config(cfg: RunConfig) -> str:
    """Serialize a RunConfig back to the key = value format (stable bytes)."""
    current = {
        "data_root": cfg.data_root,
        "output_dir": cfg.output_dir,
        "seed": cfg.seed,
        "classes": tuple(cfg.classes),
        "model.variant": cfg.variant,
        "model.fusion": cfg.fusion,
        "input.size": cfg.input_size,
        "split.train_fraction": cfg.train_fraction,
        "training.lr": cfg.training.lr,
        "training.batch_size": cfg.training.batch_size,
        "training.epochs": cfg.training.epochs,
        "training.weight_decay": cfg.training.weight_decay,
        "training.optimizer": cfg.training.optimizer,
        "training.loss": cfg.training.loss,
        "training.beta1": cfg.training.beta1,
        "training.beta2": cfg.training.beta2,
        "training.eps": cfg.training.eps,
        "training.joint_training": cfg.training.joint_training,
        "augment.enabled": cfg.augment.enabled,
        "augment.hflip_prob": cfg.augment.hflip_prob,
        "augment.rotation_max_deg": cfg.augment.rotation_max_deg,
        "normalize.mean": tuple(cfg.normalize.mean),
        "normalize.std": tuple(cfg.normalize.std),
        "tsne.perplexity": cfg.tsne.perplexity,
        "tsne.iterations": cfg.tsne.iterations,
        "tsne.learning_rate": cfg.tsne.learning_rate,
    }
    lines = ["# endoclass run configuration",
             "# grammar: one 'key = value' per line; '#' starts a comment line"]
    for key, _, _ in _SCHEMA:
        lines.append(f"{key} = {_fmt(current[key])}".rstrip())
    return "\n".join(lines) + "\n"


def default_config_text() -> str:
    return dump_config(load_config_text("", env={}))


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Copy of cfg with every embedded seed set to ``seed``."""
    return replace(cfg, seed=seed,
                   training=replace(cfg.training, seed=seed),
                   augment=replace(cfg.augment, seed=seed),
                   tsne=replace(cfg.tsne, seed=seed))
