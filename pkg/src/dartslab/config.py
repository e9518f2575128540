"""Plain-text ``key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment. Every key of
``SearchConfig.to_flat()`` is accepted, plus the task keys below. Command
line overrides are applied after the file and win over it.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from . import optim
from . import search as T
from .data import DatasetSpec


class ConfigParseError(ValueError):
    def __init__(self, source: str, line: int | None, message: str):
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")
        self.source = source
        self.line = line


TASK_PREFIX = "task_"
_TASK_FIELDS = {f"{TASK_PREFIX}{f.name}": f for f in fields(DatasetSpec)}


def default_flat() -> dict:
    flat = T.SearchConfig().to_flat()
    for key, f in _TASK_FIELDS.items():
        flat[key] = f.default
    return flat


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_value(key: str, text: str, default):
    text = text.strip()
    if key == "alpha_init":
        return None if text.lower() in ("", "none", "default") else float(text)
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, (list, tuple)):
        parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
        if len(parts) != len(default):
            raise ValueError(f"expected {len(default)} comma-separated numbers")
        return [float(p) for p in parts]
    if not text:
        raise ValueError("empty value")
    return text


def _parse_lines(lines, source: str) -> dict:
    defaults = default_flat()
    seen: dict[str, tuple[object, int]] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParseError(source, lineno, f"expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigParseError(source, lineno, f"unknown key {key!r}")
        try:
            parsed = _parse_value(key, value, defaults[key])
        except ValueError as exc:
            raise ConfigParseError(source, lineno, f"bad value for {key!r}: {exc}") from None
        if key in seen and seen[key][0] != parsed:
            raise ConfigParseError(
                source, lineno, f"key {key!r} conflicts with its earlier value on line {seen[key][1]}"
            )
        seen[key] = (parsed, lineno)
    return {k: v for k, (v, _) in seen.items()}


def _optimizer(prefix: str, flat: dict) -> optim.OptimizerState:
    return optim.OptimizerState(
        kind=flat[f"{prefix}_optimizer"],
        lr=flat[f"{prefix}_lr"],
        momentum=flat[f"{prefix}_momentum"],
        betas=tuple(flat[f"{prefix}_betas"]),
        weight_decay=flat[f"{prefix}_weight_decay"],
    )


@dataclass
class RunConfig:
    search: T.SearchConfig
    task: DatasetSpec
    flat: dict

    def render(self) -> str:
        out = []
        for k in sorted(self.flat):
            v = self.flat[k]
            if isinstance(v, (list, tuple)):
                v = ",".join(repr(float(x)) for x in v)
            elif v is None:
                v = "none"
            out.append(f"{k} = {v}")
        return "\n".join(out) + "\n"

    def echo(self, out_dir, name: str = "config.resolved.txt") -> Path:
        path = Path(out_dir) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.render())
        return path


def from_flat(flat: dict, source: str = "<config>") -> RunConfig:
    full = default_flat()
    full.update(flat)
    try:
        cfg = T.SearchConfig(
            regime=full["regime"],
            epochs=full["epochs"],
            batch_size=full["batch_size"],
            w_optimizer=_optimizer("w", full),
            alpha_optimizer=_optimizer("alpha", full),
            lr_schedule=full["lr_schedule"],
            activation=full["activation"],
            seed=full["seed"],
            space=full["space"],
            width=full["width"],
            num_cells=full["num_cells"],
            order=full["order"],
            simultaneous=full["simultaneous"],
            alpha_init=full["alpha_init"],
            trace_corr=full["trace_corr"],
        ).validate()
        task = DatasetSpec(**{k[len(TASK_PREFIX):]: full[k] for k in _TASK_FIELDS})
    except (ValueError, KeyError) as exc:
        raise ConfigParseError(source, None, str(exc)) from None
    return RunConfig(cfg, task, full)


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Resolve defaults <- file <- overrides. ``overrides`` values may be strings or typed."""
    flat: dict = {}
    source = "<defaults>"
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigParseError(source, None, f"cannot read config: {exc}") from None
        flat = _parse_lines(text.splitlines(), source)
    defaults = default_flat()
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in defaults:
            raise ConfigParseError("<overrides>", None, f"unknown key {key!r}")
        if isinstance(value, str):
            try:
                value = _parse_value(key, value, defaults[key])
            except ValueError as exc:
                raise ConfigParseError("<overrides>", None, f"bad value for {key!r}: {exc}") from None
        flat[key] = value
    return from_flat(flat, source)
