"""Flat ``key = value`` run configuration with dotted keys for sections.

Example::

    command = train
    seed = 3
    trainer.objective = gdsd_direct
    trainer.psi = 5.0   # comments run to end of line

Every key is typed by its default; unknown keys and unparsable values are
rejected with the offending key and line.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .trainer import TrainConfig

COMMANDS = ("train", "verify", "tim")


class ConfigError(ValueError):
    """Invalid configuration; the message names the key and where it came from."""


@dataclass
class TimConfig:
    fixture_seed: int = 7
    vocab_size: int = 2
    completion_len: int = 2
    sigma: float = 0.1
    init_scale: float = 1.0
    decode_steps: int = 0  # 0: one token per step
    selection: str = "random"
    temperature: float = 1.0
    k: int = 2
    samples: int = 200
    weight: str = "inv_t"
    mask_rule: str = "bernoulli"


@dataclass
class VerifyConfig:
    checks: str = "all"  # comma-separated check names, or "all"
    training: bool = False  # also run the (slow) reward-dynamics and determinism checks


@dataclass
class RunConfig:
    command: str = "train"
    out: str = "runs/latest"
    seed: int = 0
    emit_plot_data: bool = False
    render_plots: bool = False
    trainer: TrainConfig = field(default_factory=TrainConfig)
    tim: TimConfig = field(default_factory=TimConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"command: expected one of {COMMANDS}, got {self.command!r}")
        try:
            self.trainer.validate()
        except ValueError as exc:
            raise ConfigError(f"trainer: {exc}") from exc


SECTIONS = ("trainer", "tim", "verify")
# trainer.seed would shadow the run seed; there is exactly one seed per run
HIDDEN = {("trainer", "seed")}


def _leaf_fields(obj) -> dict:
    return {f.name: f for f in fields(obj)}


def known_keys(cfg: RunConfig | None = None) -> list[str]:
    cfg = cfg or RunConfig()
    keys = [f.name for f in fields(cfg) if f.name not in SECTIONS]
    for sec in SECTIONS:
        keys += [f"{sec}.{f.name}" for f in fields(getattr(cfg, sec)) if (sec, f.name) not in HIDDEN]
    return keys


def _coerce(raw: str, default, key: str, where: str):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError("expected true/false")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        kind = type(default).__name__
        raise ConfigError(f"{where}: key {key!r}: cannot parse {raw!r} as {kind} ({exc})") from None


def parse_lines(text: str, source: str = "<config>") -> list[tuple[str, str, str]]:
    """(key, raw value, location) triples from config text."""
    out = []
    for i, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        where = f"{source}:{i}"
        if "=" not in body:
            raise ConfigError(f"{where}: expected 'key = value', got {line.strip()!r}")
        key, val = (s.strip() for s in body.split("=", 1))
        if not key:
            raise ConfigError(f"{where}: missing key before '='")
        out.append((key, val, where))
    return out


def apply(cfg: RunConfig, key: str, raw: str, where: str) -> None:
    parts = key.split(".")
    if len(parts) == 1 and parts[0] not in SECTIONS and parts[0] in _leaf_fields(cfg):
        target, name = cfg, parts[0]
    elif len(parts) == 2 and parts[0] in SECTIONS and (parts[0], parts[1]) not in HIDDEN:
        target, name = getattr(cfg, parts[0]), parts[1]
        if name not in _leaf_fields(target):
            target = None
    else:
        target = None
    if target is None:
        raise ConfigError(f"{where}: unknown key {key!r}")
    setattr(target, name, _coerce(raw, getattr(target, name), key, where))


def load(path: str | Path | None = None, overrides: list[str] = (), seed: int | None = None,
         out: str | None = None) -> RunConfig:
    """Defaults, then the file, then ``--set`` overrides, then explicit flags."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
        for key, val, where in parse_lines(text, str(p)):
            apply(cfg, key, val, where)
    for j, item in enumerate(overrides, 1):
        where = f"--set #{j}"
        if "=" not in item:
            raise ConfigError(f"{where}: expected key=value, got {item!r}")
        key, val = (s.strip() for s in item.split("=", 1))
        apply(cfg, key, val, where)
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out = out
    cfg.trainer.seed = cfg.seed
    cfg.validate()
    return cfg


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def dump(cfg: RunConfig) -> str:
    """Every key with its resolved value, in the same format ``load`` reads."""
    lines = []
    for key in known_keys(cfg):
        obj = cfg
        for part in key.split("."):
            obj = getattr(obj, part)
        lines.append(f"{key} = {_fmt(obj)}")
    return "\n".join(lines) + "\n"
