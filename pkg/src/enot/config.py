"""Run configuration: a flat INI document with one section per subsystem.

Every option has a typed schema entry, so parse(serialize(config)) is the
identity and command-line overrides reuse the same converters.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .data import (GroundTruthTask, make_circles_moons_task, make_gaussian_task,
                   make_identity_task, make_mix_task, make_sphere_task,
                   make_translation_task)
from .nn import ArchitectureSpec
from .ot_core import (EnotConfig, MissingConjugateGradient, OptimizerSettings,
                      cost_function)


class BadConfig(Exception):
    pass


TASK_KINDS = ("gaussian_pair", "translation", "identity", "mix_pair",
              "sphere_pair", "circles_moons")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def _parse_bool(s: str) -> bool:
    s = s.strip().lower()
    if s in ("true", "1", "yes", "on"):
        return True
    if s in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_tuple(s: str, conv):
    s = s.strip()
    if not s:
        return ()
    return tuple(conv(part) for part in s.split(","))


_CONVERTERS = {
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "str": lambda s: s.strip(),
    "floats": lambda s: _parse_tuple(s, float),
    "ints": lambda s: _parse_tuple(s, int),
}

# section -> option -> (type name, default)
SCHEMA = {
    "task": {
        "kind": ("str", "gaussian_pair"),
        "dim": ("int", 2),
        "seed": ("int", -1),  # -1: use [run] seed
        "shift": ("floats", ()),
        "k_source": ("int", 3),
        "k_target": ("int", 10),
        "spread": ("float", 0.3),
        "noise": ("float", 0.05),
    },
    "enot": {
        "tau": ("float", 0.9),
        "lambda": ("float", 0.3),
        "bidirectional": ("bool", False),
        "map_parametrization": ("str", "residual_mlp"),
        "batch_size": ("int", 1024),
        "train_steps": ("int", 2000),
        "cost": ("str", "half_sq_euclidean"),
    },
    "model_f": {
        "hidden": ("ints", (128, 128, 128)),
        "activation": ("str", "elu"),
    },
    "model_g": {
        "hidden": ("ints", (128, 128, 128)),
        "activation": ("str", "elu"),
    },
    "optimizer": {
        "lr0": ("float", 3e-4),
        "lr_final": ("float", 1e-4),
        "betas_f": ("floats", (0.9, 0.9)),
        "betas_g": ("floats", (0.9, 0.7)),
        "eps": ("float", 1e-8),
        "schedule_steps": ("int", 0),  # 0: follow train_steps
    },
    "eval": {
        "n_eval": ("int", 10000),
        "sinkhorn_n": ("int", 1000),
        "sinkhorn_epsilon": ("float", 0.0),  # 0: scale-relative default
    },
    "run": {
        "seed": ("int", 0),
        "out_dir": ("str", "runs/out"),
    },
}


@dataclass(frozen=True)
class RunConfig:
    """Typed view of the config document; values mirror SCHEMA exactly."""

    values: tuple  # ((section, ((key, value), ...)), ...) kept hashable

    def get(self, section: str, key: str):
        return dict(dict(self.values)[section])[key]

    def to_dict(self) -> dict:
        return {s: dict(opts) for s, opts in self.values}

    # -- construction

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        vals = []
        for section, schema in SCHEMA.items():
            given = data.get(section, {})
            unknown = set(given) - set(schema)
            if unknown:
                raise BadConfig(
                    f"unknown option(s) {sorted(unknown)} in [{section}]")
            opts = []
            for key, (typ, default) in schema.items():
                if key in given:
                    raw = given[key]
                    try:
                        value = (_CONVERTERS[typ](raw)
                                 if isinstance(raw, str) else raw)
                    except ValueError as exc:
                        raise BadConfig(
                            f"bad value for {section}.{key}: {exc}") from exc
                    if typ in ("floats", "ints") and not isinstance(value, tuple):
                        value = tuple(value)
                else:
                    value = default
                opts.append((key, value))
            vals.append((section, tuple(opts)))
        extra = set(data) - set(SCHEMA)
        if extra:
            raise BadConfig(f"unknown section(s): {sorted(extra)}")
        return cls(tuple(vals))

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls.from_dict({})

    @classmethod
    def from_ini_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise BadConfig(f"cannot parse config: {exc}") from exc
        data = {s: dict(parser.items(s)) for s in parser.sections()}
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                return cls.from_ini_text(fh.read())
        except OSError as exc:
            raise BadConfig(f"cannot read config file {path}: {exc}") from exc

    # -- serialization

    def to_ini_text(self) -> str:
        out = io.StringIO()
        for section, opts in self.values:
            out.write(f"[{section}]\n")
            for key, value in opts:
                out.write(f"{key} = {_fmt(value)}\n")
            out.write("\n")
        return out.getvalue()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_ini_text())

    def with_overrides(self, overrides) -> "RunConfig":
        """Apply "section.key=value" strings on top of this config."""
        data = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise BadConfig(f"override {item!r} is not key=value")
            key, _, value = item.partition("=")
            if "." not in key:
                raise BadConfig(f"override key {key!r} must be section.option")
            section, _, option = key.partition(".")
            if section not in SCHEMA or option not in SCHEMA[section]:
                raise BadConfig(f"unknown override target {key!r}")
            data[section][option] = value.strip()
        return RunConfig.from_dict(data)

    # -- derived objects

    def seeds(self):
        run_seed = self.get("run", "seed")
        f_seed, g_seed = (int(s) for s in
                          np.random.SeedSequence(run_seed).generate_state(2))
        task_seed = self.get("task", "seed")
        if task_seed < 0:
            task_seed = run_seed
        return run_seed, task_seed, f_seed, g_seed

    def enot_config(self) -> EnotConfig:
        _, _, f_seed, g_seed = self.seeds()
        try:
            return EnotConfig(
                tau=self.get("enot", "tau"),
                lam=self.get("enot", "lambda"),
                bidirectional=self.get("enot", "bidirectional"),
                map_parametrization=self.get("enot", "map_parametrization"),
                batch_size=self.get("enot", "batch_size"),
                train_steps=self.get("enot", "train_steps"),
                cost=cost_function(self.get("enot", "cost")),
                f_init_seed=f_seed,
                g_init_seed=g_seed,
            )
        except (ValueError, KeyError, MissingConjugateGradient) as exc:
            raise BadConfig(str(exc)) from exc

    def arch(self, which: str) -> ArchitectureSpec:
        section = f"model_{which}"
        try:
            return ArchitectureSpec(hidden=self.get(section, "hidden"),
                                    activation=self.get(section, "activation"))
        except ValueError as exc:
            raise BadConfig(f"[{section}] {exc}") from exc

    def optimizer_settings(self) -> OptimizerSettings:
        sched = self.get("optimizer", "schedule_steps")
        return OptimizerSettings(
            lr0=self.get("optimizer", "lr0"),
            lr_final=self.get("optimizer", "lr_final"),
            betas_f=self.get("optimizer", "betas_f"),
            betas_g=self.get("optimizer", "betas_g"),
            eps=self.get("optimizer", "eps"),
            schedule_steps=sched if sched > 0 else None,
        )

    def build_task(self) -> GroundTruthTask:
        _, task_seed, _, _ = self.seeds()
        kind = self.get("task", "kind")
        dim = self.get("task", "dim")
        if kind == "gaussian_pair":
            return make_gaussian_task(dim, task_seed)
        if kind == "translation":
            shift = self.get("task", "shift") or tuple([1.0] * dim)
            if len(shift) not in (1, dim):
                raise BadConfig("task.shift length must be 1 or task.dim")
            return make_translation_task(dim, np.broadcast_to(shift, (dim,)),
                                         task_seed)
        if kind == "identity":
            return make_identity_task(dim, task_seed)
        if kind == "mix_pair":
            return make_mix_task(self.get("task", "k_source"),
                                 self.get("task", "k_target"), dim, task_seed)
        if kind == "sphere_pair":
            return make_sphere_task(task_seed, d=dim,
                                    spread=self.get("task", "spread"))
        if kind == "circles_moons":
            if dim != 2:
                raise BadConfig("circles_moons is two-dimensional")
            return make_circles_moons_task(task_seed,
                                           noise=self.get("task", "noise"))
        raise BadConfig(f"unknown task kind {kind!r}; choose from {TASK_KINDS}")

    def validate(self) -> "RunConfig":
        """Fail fast on anything the derived builders would reject."""
        self.enot_config()
        self.arch("f")
        self.arch("g")
        self.optimizer_settings()
        kind = self.get("task", "kind")
        if kind not in TASK_KINDS:
            raise BadConfig(f"unknown task kind {kind!r}")
        if self.get("task", "dim") < 1:
            raise BadConfig("task.dim must be >= 1")
        if kind == "sphere_pair" and self.get("enot", "cost") != "sphere_geodesic":
            raise BadConfig("sphere_pair tasks use the sphere_geodesic cost")
        if (self.get("enot", "cost") == "sphere_geodesic"
                and kind != "sphere_pair"):
            raise BadConfig("sphere_geodesic cost needs a sphere_pair task")
        return self


PRESETS = {
    # D-dimensional benchmark-style defaults (widths suit d < 64; use
    # 512,512,512 for d >= 64)
    "high_dim": {
        "enot": {"tau": 0.9, "lambda": 0.3, "batch_size": 1024,
                 "train_steps": 200_000},
        "model_f": {"hidden": (128, 128, 128), "activation": "elu"},
        "model_g": {"hidden": (128, 128, 128), "activation": "elu"},
        "optimizer": {"lr0": 3e-4, "lr_final": 1e-4,
                      "betas_f": (0.9, 0.9), "betas_g": (0.9, 0.7)},
    },
    "synthetic_2d": {
        "enot": {"tau": 0.99, "lambda": 0.3, "batch_size": 10_000,
                 "train_steps": 100_000},
        "model_f": {"hidden": (64, 64, 64, 64), "activation": "elu"},
        "model_g": {"hidden": (64, 64, 64, 64), "activation": "elu"},
        "optimizer": {"lr0": 5e-4, "lr_final": 1e-4,
                      "betas_f": (0.9, 0.999), "betas_g": (0.9, 0.999)},
    },
    # hyperparameters of the image benchmark, over MLP potentials
    "celeba_mlp": {
        "enot": {"tau": 0.99, "lambda": 1.0, "batch_size": 64,
                 "train_steps": 80_000},
        "model_f": {"hidden": (512, 512, 512), "activation": "elu"},
        "model_g": {"hidden": (512, 512, 512), "activation": "elu"},
        "optimizer": {"lr0": 3e-4, "lr_final": 1e-4,
                      "betas_f": (0.5, 0.5), "betas_g": (0.5, 0.5)},
    },
}


def preset_config(name: str) -> RunConfig:
    if name not in PRESETS:
        raise BadConfig(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return RunConfig.from_dict(PRESETS[name])
