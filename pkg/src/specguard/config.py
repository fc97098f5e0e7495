"""Flat key-path run configuration.

A config file holds one ``section.key value`` pair per line; ``#`` starts a
comment.  Command-line flags of the form ``--section.key value`` override the
file.  ``load`` fills defaults, checks required fields and builds the typed
objects the trainer needs; ``echo`` writes back every resolved key, and
feeding that echo in again reproduces the run.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

from .attacks import AttackConfig, parse_epsilon
from .model import VitConfig
from .msvp import MsvpConfig
from .trainer import TrainConfig

SEED_ENV = "SPECGUARD_SEED"


class ConfigError(ValueError):
    def __init__(self, message, field=None, line=None, source=None):
        where = ""
        if source is not None and line is not None:
            where = f"{source}:{line}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(f"{where}{field + ': ' if field else ''}{message}")
        self.field, self.line, self.source = field, line, source


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _text(text: str) -> str:
    return "" if text.strip().lower() == "none" else text.strip()


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "none", "auto") else parse_epsilon(text)


# key -> (parser, default); keys in REQUIRED have no usable default
SCHEMA = {
    "seed": (int, None),
    "output.dir": (_text, None),
    "model.image_size": (int, 16),
    "model.patch_size": (int, 4),
    "model.channels": (int, 3),
    "model.embed_dim": (int, 32),
    "model.heads": (int, 4),
    "model.layers": (int, 2),
    "model.mlp_ratio": (int, 2),
    "model.classes": (int, 10),
    "train.mode": (_text, "standard"),
    "train.epochs": (int, 1),
    "train.batch_size": (int, 50),
    "train.lr": (float, 0.1),
    "train.weight_decay": (float, 1e-4),
    "train.momentum": (float, 0.9),
    "msvp.enabled": (_bool, True),
    "msvp.lambda_q": (float, 1e-4),
    "msvp.lambda_k": (float, 1e-4),
    "msvp.lambda_v": (float, 1e-4),
    "msvp.iters": (int, 1),
    "attack.family": (_text, "pgd"),
    "attack.epsilon": (parse_epsilon, 8 / 255),
    "attack.alpha": (_opt_float, None),
    "attack.steps": (int, 3),
    "attack.norm": (_text, "linf"),
    "attack.random_start": (_bool, False),
    "eval.attacks": (_text, ""),
    "data.source": (_text, None),
    "data.per_class": (int, 100),
    "data.test_per_class": (int, 20),
    "data.noise_std": (float, 0.1),
    "data.train_images": (_text, ""),
    "data.train_labels": (_text, ""),
    "data.test_images": (_text, ""),
    "data.test_labels": (_text, ""),
}
# shorthands that expand to several keys
ALIASES = {"msvp.lambda": ("msvp.lambda_q", "msvp.lambda_k", "msvp.lambda_v")}
REQUIRED = ("seed", "output.dir", "data.source")


def parse_text(text: str, source: str = "<config>") -> dict:
    """``key -> raw string`` from config text; later lines win."""
    out = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(None, 1)
        if len(parts) != 2:
            raise ConfigError("expected 'section.key value'", field=parts[0], line=no, source=source)
        key, value = parts[0], parts[1].strip()
        _check_key(key, line=no, source=source)
        for k in ALIASES.get(key, (key,)):
            out[k] = (value, no, source)
    return out


def _check_key(key, line=None, source=None):
    if key not in SCHEMA and key not in ALIASES:
        raise ConfigError("unknown field", field=key, line=line, source=source)


def parse_flags(tokens) -> dict:
    """``['--train.lr', '0.1', ...] -> key -> raw`` (flags win over the file)."""
    out = {}
    tokens = list(tokens)
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError("flag needs a value", field=key)
            value = tokens[i + 1]
            i += 2
        _check_key(key)
        for k in ALIASES.get(key, (key,)):
            out[k] = (value, None, "flag")
    return out


def merge(file_values: dict, flag_values: dict, env=None) -> dict:
    """Typed values for every schema key."""
    env = os.environ if env is None else env
    merged = dict(file_values)
    merged.update(flag_values)
    if "seed" not in merged and env.get(SEED_ENV):
        merged["seed"] = (env[SEED_ENV], None, SEED_ENV)
    out = {}
    for key, (parser, default) in SCHEMA.items():
        if key in merged:
            raw, line, source = merged[key]
            try:
                out[key] = parser(raw)
            except (ValueError, ZeroDivisionError) as exc:
                raise ConfigError(f"bad value {raw!r} ({exc})", field=key, line=line, source=source) from None
        else:
            out[key] = default
    return out


def require(values: dict, keys=REQUIRED) -> None:
    for key in keys:
        if values.get(key) in (None, ""):
            hint = f" (or set {SEED_ENV})" if key == "seed" else ""
            raise ConfigError(f"missing required field{hint}", field=key)


def echo(values: dict) -> str:
    """Every resolved key in schema order, in the input format."""
    lines = []
    for key in SCHEMA:
        v = values.get(key)
        if v is None or v == "":
            v = "none"
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{key} {v}")
    return "\n".join(lines) + "\n"


def parse_attack_list(text: str) -> tuple:
    """``"fgsm@2/255, pgd20@8/255"`` -> AttackConfigs (PGD step size default)."""
    out = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        name, _, eps = item.partition("@")
        name = name.strip().lower().replace("-", "")
        if not eps:
            raise ConfigError(f"attack {item!r} needs '@epsilon'", field="eval.attacks")
        try:
            epsilon = parse_epsilon(eps)
            if name == "fgsm":
                out.append(AttackConfig("fgsm", epsilon))
            elif name.startswith("pgd") and name[3:].isdigit():
                out.append(AttackConfig("pgd", epsilon, steps=int(name[3:])))
            else:
                raise ValueError(f"unknown attack {name!r}")
        except ValueError as exc:
            raise ConfigError(str(exc), field="eval.attacks") from None
    return tuple(out)


@dataclass
class RunConfig:
    values: dict
    model: VitConfig
    train: TrainConfig
    output_dir: str
    seed: int


def build(values: dict) -> RunConfig:
    """Typed objects from merged values; contract violations name the field."""
    require(values)
    try:
        model = VitConfig(**{k.split(".", 1)[1]: values[k] for k in SCHEMA if k.startswith("model.")})
    except ValueError as exc:
        raise ConfigError(str(exc), field="model") from None
    try:
        msvp = MsvpConfig(values["msvp.lambda_q"], values["msvp.lambda_k"], values["msvp.lambda_v"],
                          values["msvp.iters"], values["msvp.enabled"])
    except ValueError as exc:
        raise ConfigError(str(exc), field="msvp") from None
    train_attack = None
    if values["train.mode"] == "adversarial":
        try:
            train_attack = AttackConfig(values["attack.family"], values["attack.epsilon"], values["attack.alpha"],
                                        values["attack.steps"], values["attack.norm"], values["attack.random_start"])
        except ValueError as exc:
            raise ConfigError(str(exc), field="attack") from None
    try:
        train = TrainConfig(values["train.mode"], values["train.epochs"], values["train.batch_size"],
                            values["train.lr"], values["train.weight_decay"], values["train.momentum"],
                            msvp, train_attack, parse_attack_list(values["eval.attacks"]), values["seed"])
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc), field="train") from None
    source = values["data.source"]
    if source == "synthetic":
        if values["data.train_images"] or values["data.train_labels"]:
            raise ConfigError("synthetic source cannot also name files", field="data.train_images")
    elif source == "idx":
        for key in ("data.train_images", "data.train_labels"):
            if not values[key]:
                raise ConfigError("required when data.source is idx", field=key)
    else:
        raise ConfigError(f"must be 'synthetic' or 'idx', got {source!r}", field="data.source")
    return RunConfig(values, model, train, values["output.dir"], values["seed"])


def load(path=None, flags=(), env=None) -> RunConfig:
    file_values = {}
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        file_values = parse_text(text, str(path))
    return build(merge(file_values, parse_flags(flags), env))
