"""Experiment configuration: typed sections, a flat text format, stable hashing.

A configuration is a set of named sections, each a flat mapping of keys to
typed scalars.  The text format is one ``[section]`` header per section with
``key = value`` lines, readable and diffable.  Parsing is strict: unknown
sections or keys raise, values must convert to the declared type, and a
round trip through text reproduces the configuration exactly.

The hash covers the canonical serialization, so two configurations hash
equal exactly when every field is equal, regardless of key order or
formatting in the source file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io

from .engine import GameConfig
from .grid import GridWorld, random_density
from .patrol import PatrolTrainConfig


class ConfigError(ValueError):
    """Raised for unknown keys, bad values, or malformed config text."""


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (type, default).  Declaration order is the canonical
# serialization order, so the schema also fixes the hash input.
SCHEMA: dict[str, dict[str, tuple[type, object]]] = {
    "run": {
        "seed": (int, 0),
    },
    "grid": {
        "width": (int, 8),
        "height": (int, 8),
        "density_seed": (int, 0),
    },
    "game": {
        "n_drones": (int, 2),
        "n_rangers": (int, 1),
        "n_attackers": (int, 1),
        "max_steps": (int, 100),
        "beta": (float, 0.0),
        "kappa": (float, 0.0),
        "r_capture": (float, 10.0),
        "r_damage_scale": (float, 1.0),
        "r_comm": (float, 0.1),
        "r_comm_penalty": (float, -0.2),
        "gamma": (float, 0.99),
    },
    "patrol": {
        "episodes": (int, 600),
        "lr": (float, 3e-4),
        "batch_size": (int, 32),
        "drone_buffer": (int, 192_000),
        "ranger_buffer": (int, 64_000),
        "drone_sync": (int, 20),
        "ranger_sync": (int, 50),
        "eps_start": (float, 1.0),
        "eps_end": (float, 0.05),
        "eps_decay_steps": (int, 25_000),
        "learn_start": (int, 500),
        "density_mode": (str, "visited_mask"),
    },
    "allocation": {
        "algo": (str, "combsgpo"),
        "dataset_size": (int, 20_000),
        "defender_k": (int, 0),
        "attacker_k": (int, 0),
        "autoencoder_epochs": (int, 30),
        "autoencoder_batch": (int, 256),
        "autoencoder_lr": (float, 1e-3),
        "hidden": (int, 64),
        "std_scale": (float, 0.5),
        "metric": (str, "cosine"),
        "iters": (int, 150),
        "alpha": (float, 0.05),
        "lr": (float, 0.05),
        "n_samples": (int, 10),
        "cg_iters": (int, 25),
        "cg_tol": (float, 1e-10),
        "plateau_window": (int, 50),
        "plateau_tol": (float, 0.01),
        "stop_on_plateau": (bool, False),
    },
    "eval": {
        "episodes": (int, 150),
        "heatmap_samples": (int, 100),
    },
}

_ALGOS = ("combsgpo", "pg", "optgradfp", "random")
_METRICS = ("cosine", "sqdist")


def _format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """All knobs of one experiment, grouped into flat typed sections."""

    values: dict

    def __post_init__(self):
        for section, keys in self.values.items():
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            for key, value in keys.items():
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                want = SCHEMA[section][key][0]
                if type(value) is not want:
                    raise ConfigError(
                        f"{section}.{key} must be {want.__name__}, "
                        f"got {type(value).__name__}"
                    )
        for section, keys in SCHEMA.items():
            if section not in self.values:
                raise ConfigError(f"missing section [{section}]")
            for key in keys:
                if key not in self.values[section]:
                    raise ConfigError(f"missing key {key!r} in [{section}]")
        if self.values["allocation"]["algo"] not in _ALGOS:
            raise ConfigError(f"allocation.algo must be one of {_ALGOS}")
        if self.values["allocation"]["metric"] not in _METRICS:
            raise ConfigError(f"allocation.metric must be one of {_METRICS}")
        if self.values["eval"]["episodes"] < 0:
            raise ConfigError("eval.episodes must be >= 0")
        if self.values["grid"]["width"] < 1 or self.values["grid"]["height"] < 1:
            raise ConfigError("grid dimensions must be >= 1")
        # Constructing the stage configs applies their own validation too.
        self.game_config()
        self.patrol_config()

    @classmethod
    def default(cls, **overrides) -> "ExperimentConfig":
        """Schema defaults, optionally overridden via 'section.key' kwargs."""
        values = {s: {k: spec[1] for k, spec in keys.items()} for s, keys in SCHEMA.items()}
        config = cls(values)
        return config.replace(**overrides) if overrides else config

    def get(self, section: str, key: str):
        try:
            return self.values[section][key]
        except KeyError:
            raise ConfigError(f"no such field {section}.{key}") from None

    def replace(self, **overrides) -> "ExperimentConfig":
        """New config with dotted 'section_dot_key'-style fields replaced.

        Keys are given as ``replace(**{"game.beta": 0.25})`` or, for
        convenience from code, ``replace(game_beta=0.25)`` where the first
        underscore separates section from key.
        """
        values = {s: dict(keys) for s, keys in self.values.items()}
        for dotted, value in overrides.items():
            if "." in dotted:
                section, _, key = dotted.partition(".")
            else:
                section, _, key = dotted.partition("_")
            if section not in SCHEMA or key not in SCHEMA[section]:
                raise ConfigError(f"no such field {section}.{key}")
            want = SCHEMA[section][key][0]
            if want is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            values[section][key] = value
        return ExperimentConfig(values)

    def to_text(self) -> str:
        out = io.StringIO()
        for index, (section, keys) in enumerate(SCHEMA.items()):
            if index:
                out.write("\n")
            out.write(f"[{section}]\n")
            for key in keys:
                out.write(f"{key} = {_format_value(self.values[section][key])}\n")
        return out.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        values: dict[str, dict[str, object]] = {}
        section = None
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if section not in SCHEMA:
                    raise ConfigError(f"line {lineno}: unknown section [{section}]")
                if section in values:
                    raise ConfigError(f"line {lineno}: duplicate section [{section}]")
                values[section] = {}
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            if section is None:
                raise ConfigError(f"line {lineno}: key before any [section]")
            key, _, text_value = line.partition("=")
            key = key.strip()
            text_value = text_value.strip()
            if key not in SCHEMA[section]:
                raise ConfigError(f"line {lineno}: unknown key {key!r} in [{section}]")
            if key in values[section]:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            want = SCHEMA[section][key][0]
            try:
                parsed = _parse_bool(text_value) if want is bool else want(text_value)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: {exc}") from None
            values[section][key] = parsed
        return cls(values)

    def to_file(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())

    def config_hash(self) -> str:
        """Hex digest over the canonical text; equal iff every field is equal."""
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    # Bridges into the stage-level configuration objects.

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def make_grid(self) -> GridWorld:
        g = self.values["grid"]
        return random_density(g["width"], g["height"], seed=g["density_seed"])

    def game_config(self) -> GameConfig:
        return GameConfig(**self.values["game"])

    def patrol_config(self, seed: int | None = None) -> PatrolTrainConfig:
        return PatrolTrainConfig(
            **self.values["patrol"],
            seed=self.seed if seed is None else seed,
        )


def desk_config(**overrides) -> ExperimentConfig:
    """Small-budget profile sized for a workstation run."""
    base = {
        "grid.width": 8,
        "grid.height": 8,
        "game.n_drones": 2,
        "game.n_rangers": 1,
        "game.n_attackers": 1,
        "patrol.episodes": 600,
        "patrol.eps_decay_steps": 10_000,
        "patrol.drone_buffer": 60_000,
        "patrol.ranger_buffer": 30_000,
        "allocation.dataset_size": 20_000,
        "allocation.iters": 150,
        "eval.episodes": 150,
    }
    base.update(overrides)
    return ExperimentConfig.default(**base)


def full_config(**overrides) -> ExperimentConfig:
    """Production-scale profile on the 15x15 grid."""
    base = {
        "grid.width": 15,
        "grid.height": 15,
        "game.n_drones": 3,
        "game.n_rangers": 2,
        "game.n_attackers": 2,
        "patrol.episodes": 5_000,
        "patrol.eps_decay_steps": 25_000,
        "patrol.drone_buffer": 192_000,
        "patrol.ranger_buffer": 64_000,
        "allocation.dataset_size": 100_000,
        "allocation.iters": 1_000,
        "eval.episodes": 150,
    }
    base.update(overrides)
    return ExperimentConfig.default(**base)


PROFILES = {"desk": desk_config, "full": full_config}


def profile(name: str, **overrides) -> ExperimentConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return PROFILES[name](**overrides)


def parse_assignment(text: str) -> tuple[str, object]:
    """Parse a command-line override 'section.key=value' into a typed pair."""
    dotted, sep, raw = text.partition("=")
    if not sep:
        raise ConfigError(f"expected section.key=value, got {text!r}")
    dotted = dotted.strip()
    section, dot, key = dotted.partition(".")
    if not dot or section not in SCHEMA or key not in SCHEMA[section]:
        raise ConfigError(f"no such field {dotted!r}")
    want = SCHEMA[section][key][0]
    raw = raw.strip()
    try:
        value = _parse_bool(raw) if want is bool else want(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {dotted}: {exc}") from None
    return dotted, value
