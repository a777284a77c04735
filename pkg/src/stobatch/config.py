"""Run configuration: ``key = value`` sections parsed with :mod:`configparser`.

Every key is declared in ``SCHEMA`` with its type and an optional default;
keys without a default are required.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass

from .errors import StoBatchError

REQUIRED = object()


def _floats(s):
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s):
    return tuple(int(v) for v in s.split(",") if v.strip())


def _words(s):
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_float(s):
    return None if s.strip().lower() in ("", "none") else float(s)


SCHEMA = {
    "data": {
        "source": (str, REQUIRED),  # synthetic | idx
        "n_train": (int, 2000), "n_test": (int, 200),
        "d": (int, 16), "classes": (int, 2),
        "separation": (float, 0.8), "spread": (float, 0.2), "clusters_per_class": (int, 1),
        "train_images": (str, ""), "train_labels": (str, ""),
        "test_images": (str, ""), "test_labels": (str, ""),
        "pool": (int, 1),
    },
    "model": {
        "beta": (int, REQUIRED),
        "hidden": (_ints, REQUIRED),
    },
    "privacy": {
        "eps2": (float, REQUIRED),
        "eps": (_opt_float, None),
        "eps1": (_opt_float, None),
        "noise_seed": (int, 0),
    },
    "training": {
        "steps": (int, REQUIRED),
        "m": (int, REQUIRED),
        "learning_rate": (float, 0.1),
        "lr_theta1": (_opt_float, None),
        "xi": (float, 1.0),
        "weight_decay": (float, 0.0),
        "mu_max": (float, 1.0),
        "trainers": (int, 1),
        "workers": (int, 1),
        "theta1_norm_cap": (_opt_float, None),
        "clip_mode": (str, "envelope"),
        "loss": (str, "perturbed"),
        "center_hidden_shift": (_bool, True),
        "checkpoint_every": (int, 0),
    },
    "attack": {
        "mu": (float, 0.2),
        "steps": (int, 10),
        "decay": (float, 1.0),
        "kinds": (_words, ("ifgsm", "mim", "madry")),
    },
    "certify": {
        "n": (int, 2000),
        "eta": (float, 0.95),
        "psi": (float, 2.0),
        "grid_lo": (float, 1e-3),
        "grid_hi": (float, 5.0),
        "grid_points": (int, 200),
        "mu_for_sensitivity": (float, 1.0),
        "mu_a": (float, 0.0),
        "limit": (int, 0),
    },
    "eval": {
        "attacks": (_words, ("fgsm", "ifgsm", "mim", "madry")),
        "mu_a": (_floats, (0.2,)),
        "attack_steps": (int, 10),
        "n_predict": (int, 200),
        "limit": (int, 0),
        "checkpoint": (str, ""),
    },
}


class ConfigParseError(StoBatchError):
    """Malformed or incomplete configuration (maps to exit code 2)."""


@dataclass(frozen=True)
class RunConfig:
    values: dict  # section -> key -> parsed value
    text: str
    seed: int

    def __getitem__(self, section):
        return self.values[section]

    def digest(self):
        """Hash of the canonical parsed config plus the effective seed."""
        canon = "\n".join(f"[{s}] {k} = {self.values[s][k]!r}" for s in sorted(self.values) for k in sorted(self.values[s]))
        return hashlib.sha256(f"{canon}\nseed = {self.seed}".encode()).hexdigest()[:16]


def parse_config(text, seed=None, source="<config>"):
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigParseError(f"{source}: {exc}") from None
    for section in cp.sections():
        if section not in SCHEMA and section != "run":
            raise ConfigParseError(f"{source}: unknown section [{section}]")
        for key in cp[section]:
            if section in SCHEMA and key not in SCHEMA[section]:
                raise ConfigParseError(f"{source}: unknown key '{key}' in section [{section}]")
    values = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (conv, default) in keys.items():
            if cp.has_option(section, key):
                raw = cp.get(section, key)
                try:
                    values[section][key] = conv(raw)
                except ValueError as exc:
                    raise ConfigParseError(f"{source}: bad value for [{section}] {key} = {raw!r}: {exc}") from None
            elif default is REQUIRED:
                raise ConfigParseError(f"{source}: missing config key '{key}' in section [{section}]")
            else:
                values[section][key] = default
    run_seed = int(cp.get("run", "seed")) if cp.has_option("run", "seed") else 0
    if seed is not None:
        run_seed = int(seed)
    return RunConfig(values, text, run_seed)


def load_config(path, seed=None):
    with open(path) as f:
        return parse_config(f.read(), seed, source=str(path))
