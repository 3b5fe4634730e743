"""Physical parameters, the truncated vibronic basis and config parsing.

All quantities are dimensionless with hbar = 1; energies and rates share a
single inverse-time unit.  Parameters are addressed by flat string keys
(``nu1``, ``alpha.2.ct``, ``Gamma.e`` ...) which double as config-file keys
and as optimizer gene names.
"""

from __future__ import annotations

import configparser
import dataclasses
import enum
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .exceptions import ConfigError

__all__ = [
    "ElectronicState",
    "ModelParams",
    "VibronicBasis",
    "DEFAULT_TRUNC",
    "MODEL_SECTIONS",
    "EXPERIMENT_SECTIONS",
    "load_config",
    "dump_config",
    "parse_sections",
    "optimized_params",
]


class ElectronicState(enum.IntEnum):
    """Electronic labels; the integer value is the block index in the basis."""

    G = 0
    E = 1
    CT = 2
    A = 3

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, text: str) -> "ElectronicState":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ConfigError(f"unknown electronic state {text!r}") from None


G, E, CT, A = ElectronicState

# Mode 1 relaxes fast, mode 2 holds many quanta after excitation; mode 2 needs
# room for ct-local states displaced by |alpha| ~ 3 from the e-frame origin.
DEFAULT_TRUNC = (14, 56)

MODEL_SECTIONS = ("model", "electronic", "vibrations", "dissipation", "basis")
EXPERIMENT_SECTIONS = ("initial_state", "solver", "optimizer", "search", "scan", "propagate")

_KEY_RE = {
    "eps": re.compile(r"^eps\.(g|e|ct|a)$"),
    "alpha": re.compile(r"^alpha\.([12])\.(g|e|ct|a)$"),
    "beta": re.compile(r"^beta\.(g|e|ct|a)$"),
    "Gamma": re.compile(r"^Gamma\.(g|e|ct|a)$"),
}
_SCALAR_KEYS = {
    "g": "g_coupling",
    "Gamma_sep": "rate_sep",
    "Gamma_rec": "rate_rec",
}
_PAIR_KEYS = {
    "nu1": ("nu", 0),
    "nu2": ("nu", 1),
    "gamma1": ("gamma_vib", 0),
    "gamma2": ("gamma_vib", 1),
    "trunc1": ("trunc", 0),
    "trunc2": ("trunc", 1),
}
REQUIRED_KEYS = (
    "delta", "g", "nu1", "nu2",
    "alpha.1.g", "alpha.2.g", "alpha.1.ct", "alpha.2.ct",
    "beta.g", "beta.e", "beta.ct",
    "gamma1", "gamma2", "Gamma.e", "Gamma.ct", "Gamma_sep", "Gamma_rec",
)


def _tuple(values: Iterable, cast=float) -> tuple:
    return tuple(cast(v) for v in values)


@dataclass(frozen=True)
class ModelParams:
    """Immutable set of model ("control") parameters.

    Per-state quantities are 4-tuples indexed by :class:`ElectronicState`;
    ``alpha`` is a pair (one per mode) of such tuples.
    """

    eps: tuple = (0.0, 0.0, 30.0, 0.0)
    g_coupling: float = 1.0
    nu: tuple = (1.0, 1.0)
    alpha: tuple = ((0.0,) * 4, (0.0,) * 4)
    beta: tuple = (0.0,) * 4
    gamma_vib: tuple = (0.0, 0.0)
    gamma_deph: tuple = (0.0,) * 4
    rate_sep: float = 0.01
    rate_rec: float = 0.01
    trunc: tuple = DEFAULT_TRUNC

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "eps", _tuple(self.eps))
        set_(self, "nu", _tuple(self.nu))
        set_(self, "alpha", tuple(_tuple(row) for row in self.alpha))
        set_(self, "beta", _tuple(self.beta))
        set_(self, "gamma_vib", _tuple(self.gamma_vib))
        set_(self, "gamma_deph", _tuple(self.gamma_deph))
        set_(self, "g_coupling", float(self.g_coupling))
        set_(self, "rate_sep", float(self.rate_sep))
        set_(self, "rate_rec", float(self.rate_rec))
        set_(self, "trunc", tuple(int(m) for m in self.trunc))
        self._validate()

    def _validate(self):
        if len(self.eps) != 4 or len(self.beta) != 4 or len(self.gamma_deph) != 4:
            raise ConfigError("per-state parameters need exactly 4 entries")
        if len(self.nu) != 2 or len(self.gamma_vib) != 2 or len(self.trunc) != 2:
            raise ConfigError("per-mode parameters need exactly 2 entries")
        if len(self.alpha) != 2 or any(len(row) != 4 for row in self.alpha):
            raise ConfigError("alpha must be a 2x4 table")
        values = (*self.eps, self.g_coupling, *self.nu, *self.alpha[0], *self.alpha[1],
                  *self.beta, *self.gamma_vib, *self.gamma_deph, self.rate_sep, self.rate_rec)
        if not all(math.isfinite(v) for v in values):
            raise ConfigError("parameters must be finite")
        for k, nu in enumerate(self.nu, start=1):
            if nu <= 0:
                raise ConfigError(f"nu{k}: frequency must be positive, got {nu}")
        if self.g_coupling < 0:
            raise ConfigError(f"g: electronic coupling must be non-negative, got {self.g_coupling}")
        rates = {
            "gamma1": self.gamma_vib[0], "gamma2": self.gamma_vib[1],
            "Gamma_sep": self.rate_sep, "Gamma_rec": self.rate_rec,
            **{f"Gamma.{z.label}": self.gamma_deph[z] for z in ElectronicState},
        }
        for key, rate in rates.items():
            if rate < 0:
                raise ConfigError(f"{key}: rate must be non-negative, got {rate}")
        if self.gamma_deph[A] != 0:
            raise ConfigError("Gamma.a: the acceptor carries no dephasing channel")
        for k in range(2):
            if self.alpha[k][E] != 0:
                raise ConfigError(f"alpha.{k + 1}.e must be 0 (the e surface defines the frame)")
        for k, m in enumerate(self.trunc, start=1):
            if m < 2:
                raise ConfigError(f"trunc{k}: truncation must be >= 2, got {m}")
        if self.delta <= 0:
            raise ConfigError(f"delta: the ct state must lie above e (delta > 0), got {self.delta}")

    @property
    def delta(self) -> float:
        """Energy gap eps[ct] - eps[e]."""
        return self.eps[CT] - self.eps[E]

    # -- flat-key access --------------------------------------------------

    def get(self, key: str) -> float:
        """Return the value addressed by a config key such as ``alpha.2.ct``."""
        if key == "delta":
            return self.delta
        if key in _SCALAR_KEYS:
            return getattr(self, _SCALAR_KEYS[key])
        if key in _PAIR_KEYS:
            name, idx = _PAIR_KEYS[key]
            return getattr(self, name)[idx]
        kind, mode, state = _parse_indexed_key(key)
        if kind == "alpha":
            return self.alpha[mode][state]
        return getattr(self, _INDEXED_FIELDS[kind])[state]

    def updated(self, changes: Mapping[str, float]) -> "ModelParams":
        """Return a copy with flat-key ``changes`` applied.

        ``delta`` shifts ``eps.ct`` relative to ``eps.e``; an explicit
        ``eps.ct`` in the same mapping must agree with it exactly.
        """
        fields = {
            "eps": list(self.eps),
            "alpha": [list(self.alpha[0]), list(self.alpha[1])],
            "beta": list(self.beta),
            "gamma_deph": list(self.gamma_deph),
            "nu": list(self.nu),
            "gamma_vib": list(self.gamma_vib),
            "trunc": list(self.trunc),
        }
        scalars = {}
        for key, value in changes.items():
            if key == "delta":
                continue
            if key in _SCALAR_KEYS:
                scalars[_SCALAR_KEYS[key]] = value
            elif key in _PAIR_KEYS:
                name, idx = _PAIR_KEYS[key]
                fields[name][idx] = value
            else:
                kind, mode, state = _parse_indexed_key(key)
                if kind == "alpha":
                    fields["alpha"][mode][state] = value
                else:
                    fields[_INDEXED_FIELDS[kind]][state] = value
        if "delta" in changes:
            delta = float(changes["delta"])
            if "eps.ct" in changes:
                gap = float(changes["eps.ct"]) - float(fields["eps"][E])
                if gap != delta:
                    raise ConfigError(
                        f"delta={delta!r} is inconsistent with eps.ct - eps.e = {gap!r}"
                    )
            else:
                fields["eps"][CT] = float(fields["eps"][E]) + delta
        return dataclasses.replace(self, **fields, **scalars)

    def to_dict(self) -> dict[str, float]:
        """Flat key -> value mapping covering every parameter."""
        out: dict[str, float] = {"delta": self.delta}
        for z in ElectronicState:
            out[f"eps.{z.label}"] = self.eps[z]
        out["g"] = self.g_coupling
        out["nu1"], out["nu2"] = self.nu
        for k in range(2):
            for z in ElectronicState:
                out[f"alpha.{k + 1}.{z.label}"] = self.alpha[k][z]
        for z in ElectronicState:
            out[f"beta.{z.label}"] = self.beta[z]
        out["gamma1"], out["gamma2"] = self.gamma_vib
        for z in ElectronicState:
            out[f"Gamma.{z.label}"] = self.gamma_deph[z]
        out["Gamma_sep"] = self.rate_sep
        out["Gamma_rec"] = self.rate_rec
        out["trunc1"], out["trunc2"] = self.trunc
        return out

    @property
    def basis(self) -> "VibronicBasis":
        return VibronicBasis(self.trunc)


_INDEXED_FIELDS = {"eps": "eps", "beta": "beta", "Gamma": "gamma_deph"}


def _parse_indexed_key(key: str) -> tuple[str, int, ElectronicState]:
    for kind, pattern in _KEY_RE.items():
        match = pattern.match(key)
        if match:
            if kind == "alpha":
                return kind, int(match.group(1)) - 1, ElectronicState.parse(match.group(2))
            return kind, -1, ElectronicState.parse(match.group(1))
    raise ConfigError(f"unknown parameter key {key!r}")


def is_model_key(key: str) -> bool:
    if key == "delta" or key in _SCALAR_KEYS or key in _PAIR_KEYS:
        return True
    return any(p.match(key) for p in _KEY_RE.values())


@dataclass(frozen=True)
class VibronicBasis:
    """Product basis ``|z, n1, n2>`` with z-major ordering and n2 fastest.

    Vibrational quanta refer to the shared Fock basis of the e surface.
    """

    trunc: tuple = DEFAULT_TRUNC
    electronic_count: int = field(default=4, init=False)

    def __post_init__(self):
        trunc = tuple(int(m) for m in self.trunc)
        if len(trunc) != 2 or min(trunc) < 2:
            raise ConfigError(f"truncation must be two integers >= 2, got {self.trunc}")
        object.__setattr__(self, "trunc", trunc)

    @property
    def vib_dim(self) -> int:
        return self.trunc[0] * self.trunc[1]

    @property
    def dim(self) -> int:
        return self.electronic_count * self.vib_dim

    def index_of(self, z, n1: int, n2: int) -> int:
        m1, m2 = self.trunc
        z = ElectronicState(z)
        if not (0 <= n1 < m1 and 0 <= n2 < m2):
            raise IndexError(f"quantum numbers ({n1}, {n2}) outside truncation {self.trunc}")
        return (int(z) * m1 + n1) * m2 + n2

    def state_of(self, index: int) -> tuple[ElectronicState, int, int]:
        if not 0 <= index < self.dim:
            raise IndexError(f"basis index {index} outside 0..{self.dim - 1}")
        m1, m2 = self.trunc
        rest, n2 = divmod(int(index), m2)
        z, n1 = divmod(rest, m1)
        return ElectronicState(z), n1, n2

    def surface(self, z) -> slice:
        """Slice of basis indices belonging to electronic state ``z``."""
        start = int(ElectronicState(z)) * self.vib_dim
        return slice(start, start + self.vib_dim)

    def indices(self, states: Iterable) -> "list[int]":
        out: list[int] = []
        for z in states:
            sl = self.surface(z)
            out.extend(range(sl.start, sl.stop))
        return out

    def electronic_labels(self):
        """Electronic label of each basis index as an integer array."""
        import numpy as np

        return np.repeat(np.arange(self.electronic_count), self.vib_dim)

    def edge_mask(self, levels: int = 2):
        """Boolean mask over the vibrational space marking the top ``levels`` Fock levels of either mode."""
        import numpy as np

        m1, m2 = self.trunc
        n1, n2 = np.meshgrid(np.arange(m1), np.arange(m2), indexing="ij")
        return ((n1 >= m1 - levels) | (n2 >= m2 - levels)).ravel()


# -- config files --------------------------------------------------------


def parse_sections(text: str) -> dict[str, dict[str, str]]:
    """Parse ``key = value`` text with optional ``[section]`` headers.

    Keys appearing before the first header belong to section ``model``.
    Duplicate keys and unknown sections raise :class:`ConfigError`.
    """
    parser = configparser.ConfigParser(
        interpolation=None, strict=True, delimiters=("=",), comment_prefixes=("#", ";"),
        inline_comment_prefixes=("#",),
    )
    parser.optionxform = str  # keys are case sensitive (Gamma vs gamma)
    stripped = text.lstrip()
    if not stripped.startswith("["):
        text = "[model]\n" + text
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    sections = {}
    for name in parser.sections():
        if name not in MODEL_SECTIONS and name not in EXPERIMENT_SECTIONS:
            raise ConfigError(f"unknown config section [{name}]")
        sections[name] = dict(parser.items(name))
    return sections


def _float(key: str, raw) -> float:
    try:
        return float(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from None


def _int(key: str, raw) -> int:
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if value != int(value):
        raise ConfigError(f"{key}: expected an integer, got {raw!r}")
    return int(value)


def params_from_mapping(values: Mapping[str, object]) -> ModelParams:
    """Build validated parameters from flat key/value pairs (strings or numbers)."""
    unknown = sorted(k for k in values if not is_model_key(k))
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}")
    missing = [k for k in REQUIRED_KEYS if k not in values]
    if missing:
        raise ConfigError(f"missing required key {missing[0]!r}")
    changes: dict[str, float] = {}
    for key, raw in values.items():
        changes[key] = _int(key, raw) if key in ("trunc1", "trunc2") else _float(key, raw)
    base = ModelParams(eps=(0.0, 0.0, 1.0, 0.0))
    # acceptor displacement follows ct unless given explicitly
    for k in (1, 2):
        changes.setdefault(f"alpha.{k}.a", changes[f"alpha.{k}.ct"])
    return base.updated(changes)


def load_config(text: str) -> ModelParams:
    """Parse a config document into validated :class:`ModelParams`.

    Keys in experiment sections (``[initial_state]``, ``[optimizer]`` ...)
    are ignored here; see :mod:`chargesep.cli`.
    """
    sections = parse_sections(text)
    flat: dict[str, str] = {}
    for name, items in sections.items():
        if name not in MODEL_SECTIONS:
            continue
        for key, value in items.items():
            if key in flat:
                raise ConfigError(f"duplicate key {key!r}")
            flat[key] = value
    return params_from_mapping(flat)


def dump_config(params: ModelParams) -> str:
    """Serialize parameters so that ``load_config(dump_config(p)) == p``."""
    d = params.to_dict()
    lines = ["[electronic]"]
    for key in ("delta", "eps.g", "eps.e", "eps.ct", "eps.a", "g", "Gamma_sep", "Gamma_rec"):
        lines.append(f"{key} = {d[key]!r}")
    lines += ["", "[vibrations]"]
    for key in ("nu1", "nu2"):
        lines.append(f"{key} = {d[key]!r}")
    for k in (1, 2):
        for z in ElectronicState:
            lines.append(f"alpha.{k}.{z.label} = {d[f'alpha.{k}.{z.label}']!r}")
    for z in ElectronicState:
        lines.append(f"beta.{z.label} = {d[f'beta.{z.label}']!r}")
    lines += ["", "[dissipation]"]
    for key in ("gamma1", "gamma2", "Gamma.g", "Gamma.e", "Gamma.ct", "Gamma.a"):
        lines.append(f"{key} = {d[key]!r}")
    lines += ["", "[basis]", f"trunc1 = {d['trunc1']}", f"trunc2 = {d['trunc2']}", ""]
    return "\n".join(lines)


def optimized_params(trunc=DEFAULT_TRUNC) -> ModelParams:
    """Optimized environment for delta = 30, Gamma_sep = Gamma_rec = 0.01.

    Satisfies the resonance 3*nu2 - nu1 ~ delta with only mode 1 relaxing.
    """
    return ModelParams(
        eps=(0.0, 0.0, 30.0, 0.0),
        g_coupling=2.35,
        nu=(9.28, 13.09),
        alpha=((0.0, 0.0, 0.5, 0.5), (-2.69, 0.0, -3.02, -3.02)),
        beta=(0.0, -0.11, 0.17, 0.0),
        gamma_vib=(0.26, 0.0),
        gamma_deph=(0.0, 0.0, 0.0, 0.0),
        rate_sep=0.01,
        rate_rec=0.01,
        trunc=trunc,
    )
