"""Run configuration: dataclass defaults, INI-style files and dotted overrides.

Files are line-oriented ``key = value`` with ``[data]``, ``[generator]`` and
``[train]`` sections. Overrides use dotted paths (``train.tau_s=0.7``).
Unknown keys are rejected with the full list of valid keys.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import BundleSizes, ConceptSpec, DomainSpec, generate_bundle, make_render_params, uniform_marginal, zipf_marginal
from .errors import ConfigError


def _f(default, help):
    return field(default=default, metadata={"help": help})


@dataclass
class DataConfig:
    n_classes: int = _f(10, "number of classes K")
    d_x: int = _f(32, "observation dimension")
    d_sc: int = _f(4, "cross-domain style dimension")
    d_si: int = _f(4, "intra-domain style dimension")
    n_s: int = _f(2000, "labeled source samples")
    shots: int = _f(3, "labeled target samples per class")
    n_u: int = _f(1000, "unlabeled target samples")
    n_test: int = _f(1000, "held-out target test samples")
    zipf_alpha: float = _f(1.0, "Zipf exponent of the source label marginal (target is uniform)")
    concept_scale: float = _f(2.0, "distance of class concept means from the origin")
    concept_sigma: float = _f(0.5, "within-class concept standard deviation")
    concept_gain: float = _f(1.0, "render gain of the concept channel")
    style_gain: float = _f(1.5, "render gain of the cross-domain style channel")
    intra_gain: float = _f(0.5, "render gain of the intra-domain style channel")
    style_shift: float = _f(2.5, "norm of the target cross-domain style mean (source mean is 0)")
    source_style_sigma: float = _f(0.3, "source cross-domain style standard deviation")
    target_style_sigma: float = _f(0.3, "target cross-domain style standard deviation")
    intra_sigma: float = _f(1.0, "intra-domain style standard deviation (both domains)")
    noise_sigma: float = _f(0.01, "observation noise standard deviation")
    seed: int = _f(0, "bundle seed")


@dataclass
class GeneratorConfig:
    mode: str = _f("learned", "causal factor generators: learned | oracle")
    n_g: int = _f(2, "number of cross-domain generator pairs")
    iters: int = _f(3000, "style-transfer training iterations per pair")
    hidden: int = _f(32, "hidden width of style-transfer networks")
    batch_size: int = _f(64, "style-transfer minibatch size")
    learning_rate: float = _f(0.02, "style-transfer SGD learning rate")
    momentum: float = _f(0.5, "style-transfer SGD momentum")
    lambda_cyc: float = _f(10.0, "cycle-consistency loss weight")
    lambda_idt: float = _f(5.0, "identity loss weight")
    adv_loss: str = _f("nonsaturating", "generator adversarial term: nonsaturating | saturating")
    compose: bool = _f(False, "source cross-domain variants also get an intra-domain perturbation")
    balance_source: bool = _f(True, "class-balanced sampling of source rows during style-transfer training")
    sigma_i: float = _f(0.5, "intra-domain style perturbation scale")
    ridge: float = _f(1e-3, "ridge penalty of the sealed style estimator")


@dataclass
class TrainConfig:
    batch_size: int = _f(24, "minibatch size B")
    momentum: float = _f(0.9, "SGD momentum")
    learning_rate: float = _f(0.02, "SGD learning rate")
    tau_s: float = _f(0.5, "pseudo-label threshold of the source-side model")
    tau_t: float = _f(0.5, "pseudo-label threshold of the target-side model")
    t_max: int = _f(5000, "training iterations")
    lambda_u: float = _f(1.0, "weight of the pseudo-label loss")
    lambda_ir: float = _f(0.1, "weight of the invariance regulariser")
    lambda_sp: float = _f(0.1, "weight of self-penalisation")
    lambda_feat: float = _f(0.1, "weight of the feature-distance penalty")
    ema_momentum: float = _f(0.9, "label-marginal moving-average momentum")
    hidden: int = _f(64, "hidden width of classifiers")
    seed: int = _f(0, "training seed")
    log_interval: int = _f(100, "iterations between metric rows")
    ledger_interval: int = _f(100, "iterations between pseudo-label ledger dumps (0 = never)")
    exchange_interval: int = _f(1, "iterations between pseudo-label exchanges")
    peer_only: bool = _f(False, "accept pseudo-labels on the proposer threshold alone")
    share_icl: bool = _f(True, "use the source-side classifier as the ICL learner")
    peer_order: str = _f("s_first", "update order of the peers: s_first | t_first")
    ipw_warmup: int = _f(500, "iterations of uniform supervised weights before IPW switches on")
    no_ipw: bool = _f(False, "ablation: plain CE instead of IPW-weighted CE")
    no_invariant_reg: bool = _f(False, "ablation: drop the invariance regulariser")
    no_self_pen: bool = _f(False, "ablation: drop self-penalisation")
    no_causal_intervention: bool = _f(False, "ablation: no causal factors and no ICL loss")
    solo: str = _f("", "cooperation ablation: '' | s | t (single SSL model, no exchange)")


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    SECTIONS = ("data", "generator", "train")

    def copy(self) -> "Config":
        return Config(dataclasses.replace(self.data), dataclasses.replace(self.generator), dataclasses.replace(self.train))

    def with_overrides(self, overrides: dict | list | None) -> "Config":
        cfg = self.copy()
        items = overrides.items() if isinstance(overrides, dict) else [_split_override(o) for o in overrides or []]
        for key, val in items:
            _assign(cfg, key, val)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        d, g, t = self.data, self.generator, self.train
        positive = [("data.n_classes", d.n_classes), ("data.n_s", d.n_s), ("data.shots", d.shots), ("data.n_u", d.n_u),
                    ("data.n_test", d.n_test), ("train.batch_size", t.batch_size), ("train.t_max", t.t_max),
                    ("train.learning_rate", t.learning_rate), ("train.hidden", t.hidden), ("generator.n_g", g.n_g),
                    ("train.log_interval", t.log_interval), ("train.exchange_interval", t.exchange_interval)]
        for name, v in positive:
            if not v > 0:
                raise ConfigError(f"{name} must be positive, got {v!r}")
        for name, v in (("train.tau_s", t.tau_s), ("train.tau_t", t.tau_t)):
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {v!r}")
        if not 0.0 <= t.ema_momentum < 1.0:
            raise ConfigError("train.ema_momentum must lie in [0, 1)")
        if g.mode not in ("oracle", "learned"):
            raise ConfigError(f"generator.mode must be oracle or learned, got {g.mode!r}")
        if g.adv_loss not in ("nonsaturating", "saturating"):
            raise ConfigError(f"generator.adv_loss must be nonsaturating or saturating, got {g.adv_loss!r}")
        if t.solo not in ("", "s", "t"):
            raise ConfigError(f"train.solo must be '', 's' or 't', got {t.solo!r}")
        if t.peer_order not in ("s_first", "t_first"):
            raise ConfigError("train.peer_order must be s_first or t_first")
        if d.d_x < d.n_classes + d.d_sc + d.d_si:
            raise ConfigError("data.d_x must be at least n_classes + d_sc + d_si")

    def echo(self) -> str:
        """Canonical text form; also a valid config file."""
        lines = []
        for sec in self.SECTIONS:
            lines.append(f"[{sec}]")
            obj = getattr(self, sec)
            for f in fields(obj):
                lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.echo().encode("utf-8")).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def valid_keys() -> list[str]:
    cfg = Config()
    return [f"{sec}.{f.name}" for sec in Config.SECTIONS for f in fields(getattr(cfg, sec))]


def key_docs() -> list[tuple[str, str, str]]:
    """``(dotted key, default, help)`` for every config key."""
    cfg = Config()
    return [(f"{sec}.{f.name}", _fmt(getattr(getattr(cfg, sec), f.name)), f.metadata["help"])
            for sec in Config.SECTIONS for f in fields(getattr(cfg, sec))]


def _split_override(text: str):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, val = text.split("=", 1)
    return key.strip(), val.strip()


def _coerce(ftype, raw, key):
    if not isinstance(raw, str):
        return raw
    try:
        if ftype in (bool, "bool"):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype in (int, "int"):
            return int(raw)
        if ftype in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key} (expected {ftype})") from None
    return raw.strip().strip("'\"")


def _assign(cfg: Config, key: str, raw) -> None:
    if key not in valid_keys():
        raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(valid_keys())}")
    sec, name = key.split(".", 1)
    obj = getattr(cfg, sec)
    ftype = {f.name: f.type for f in fields(obj)}[name]
    setattr(obj, name, _coerce(ftype, raw, key))


def load_config(path=None, overrides=None) -> Config:
    cfg = Config()
    if path is not None:
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            if not cp.read(Path(path), encoding="utf-8"):
                raise ConfigError(f"cannot read config file {path}")
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        for sec in cp.sections():
            if sec not in Config.SECTIONS:
                raise ConfigError(f"unknown section [{sec}]; valid keys: {', '.join(valid_keys())}")
            for name, val in cp[sec].items():
                _assign(cfg, f"{sec}.{name}", val)
    return cfg.with_overrides(overrides)


# -- data construction -------------------------------------------------------------

def domain_specs(d: DataConfig) -> tuple[DomainSpec, DomainSpec]:
    direction = np.ones(d.d_sc) / np.sqrt(d.d_sc)
    source = DomainSpec(np.zeros(d.d_sc), d.source_style_sigma ** 2 * np.eye(d.d_sc),
                        zipf_marginal(d.n_classes, d.zipf_alpha), d.noise_sigma, d.intra_sigma, "source")
    target = DomainSpec(d.style_shift * direction, d.target_style_sigma ** 2 * np.eye(d.d_sc),
                        uniform_marginal(d.n_classes), d.noise_sigma, d.intra_sigma, "target")
    return source, target


def build_bundle(d: DataConfig):
    source, target = domain_specs(d)
    concept = ConceptSpec(d.n_classes, d.concept_scale, d.concept_sigma)
    params = make_render_params(d.d_x, d.n_classes, d.d_sc, d.d_si, d.seed,
                                d.concept_gain, d.style_gain, d.intra_gain)
    sizes = BundleSizes(d.n_s, d.shots, d.n_u, d.n_test)
    return generate_bundle(source, target, sizes, d.seed, concept, params)
