"""Run configuration shared by the command-line tools.

A config file is JSON with optional sections ``corpus``, ``model``,
``train``, ``finetune``, ``eval`` and ``probe``. Keys of ``corpus``,
``model`` and ``train`` are the fields of :class:`CorpusConfig`,
:class:`ModelConfig` and :class:`TrainConfig`. ``finetune`` takes the
:class:`TrainConfig` fields plus ``scheme``, ``bits`` and ``alpha``.
Unknown sections or keys are rejected.

A single seed drives every random consumer; it is copied into each
section and expanded per consumer by :func:`svquant._random.rng_for`.
"""

import json
from dataclasses import dataclass, field, fields

from .corpus import CorpusConfig
from .exceptions import ConfigurationError
from .models import ModelConfig
from .quantizer import QuantScheme, _check_bits
from .training import TrainConfig

EVAL_DEFAULTS = {"top_k": 50, "window": 400, "hop": 300}
PROBE_DEFAULTS = {"hidden": 64, "epochs": 100, "lr": 1e-3}
QUANT_DEFAULTS = {"scheme": "uniform", "bits": 8, "alpha": 3.0}


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig.fp32)
    finetune: TrainConfig = field(default_factory=TrainConfig.qat)
    quant: dict = field(default_factory=lambda: dict(QUANT_DEFAULTS))
    eval: dict = field(default_factory=lambda: dict(EVAL_DEFAULTS))
    probe: dict = field(default_factory=lambda: dict(PROBE_DEFAULTS))
    seed: int = 0

    def to_dict(self):
        return {
            "seed": self.seed,
            "corpus": self.corpus.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "finetune": {**self.finetune.to_dict(), **self.quant},
            "eval": dict(self.eval),
            "probe": dict(self.probe),
        }


def _check_keys(section, given, allowed):
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")


def _names(cls):
    return [f.name for f in fields(cls)]


def from_dict(raw, seed=None):
    """Build a :class:`RunConfig` from parsed JSON; ``seed`` overrides every section's seed."""
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a JSON object")
    _check_keys("top level", raw, ("seed", "corpus", "model", "train", "finetune", "eval", "probe"))
    seed = int(raw.get("seed", 0) if seed is None else seed)
    sections = {k: dict(raw.get(k) or {}) for k in ("corpus", "model", "train", "finetune", "eval", "probe")}
    for name, section in sections.items():
        section.pop("seed", None)

    _check_keys("corpus", sections["corpus"], _names(CorpusConfig))
    _check_keys("model", sections["model"], _names(ModelConfig))
    _check_keys("train", sections["train"], _names(TrainConfig))
    _check_keys("finetune", sections["finetune"], _names(TrainConfig) + list(QUANT_DEFAULTS))
    _check_keys("eval", sections["eval"], EVAL_DEFAULTS)
    _check_keys("probe", sections["probe"], PROBE_DEFAULTS)

    ft = sections["finetune"]
    quant = {k: ft.pop(k, v) for k, v in QUANT_DEFAULTS.items()}
    quant["scheme"] = QuantScheme.parse(quant["scheme"]).value
    quant["bits"] = _check_bits(quant["bits"])
    quant["alpha"] = float(quant["alpha"])
    if not quant["alpha"] > 0:
        raise ConfigurationError("finetune alpha must be positive")
    try:
        return RunConfig(
            corpus=CorpusConfig(**sections["corpus"], seed=seed),
            model=ModelConfig(**sections["model"], seed=seed),
            train=TrainConfig.fp32(**sections["train"], seed=seed),
            finetune=TrainConfig.qat(**{**ft, "stage": "qat"}, seed=seed),
            quant=quant,
            eval={**EVAL_DEFAULTS, **sections["eval"]},
            probe={**PROBE_DEFAULTS, **sections["probe"]},
            seed=seed,
        )
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def load_config(path=None, seed=None):
    if path is None:
        return from_dict({}, seed)
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(raw, seed)
