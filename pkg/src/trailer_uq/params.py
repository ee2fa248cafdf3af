"""Physical parameters of the tractor-semitrailer combination.

All quantities are SI. Distances along x are measured from the hitch
(fifth wheel), positive forward in the respective unit's frame, so trailer
quantities (``l_s``, ``a_s``) are negative.
"""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np


@dataclasses.dataclass(frozen=True)
class ParameterSet:
    # masses [kg] and COG heights [m]
    m_t: float = 9000.0
    m_s: float = 32000.0
    h_t: float = 1.1
    h_s: float = 1.95
    # principal inertias in the sprung frames [kg m^2]
    I_xx_t: float = 6.0e3
    I_yy_t: float = 4.0e4
    I_zz_t: float = 4.0e4
    I_xx_s: float = 4.4e4
    I_yy_s: float = 1.5e5
    I_zz_s: float = 1.5e5
    # geometry [m]
    l_t: float = 2.0
    l_s: float = -4.0
    a_f: float = 3.2
    a_r: float = -0.4
    a_s: float = -7.0
    T_w: float = 2.0
    # suspension
    k_roll_f: float = 1.0e6
    k_roll_r: float = 2.0e6
    k_roll_s: float = 3.0e6
    c_roll_f: float = 3.0e4
    c_roll_r: float = 5.0e4
    c_roll_s: float = 8.0e4
    k_pitch_t: float = 1.2e7
    k_pitch_s: float = 8.0e7
    c_pitch_t: float = 2.0e5
    c_pitch_s: float = 1.5e6
    k_hitch: float = 1.0e6
    # tires, per wheel
    C_kappa: float = 4.0e5
    C_alpha_f: float = 3.3e5
    C_alpha_r: float = 7.0e5
    C_alpha_s: float = 3.3e5
    sigma_f: float = 0.3
    sigma_r: float = 0.3
    sigma_s: float = 0.3
    # resistances
    rho: float = 1.225
    c_D_t: float = 0.6
    c_D_s: float = 0.8
    A_f_t: float = 7.0
    A_f_s: float = 9.0
    c1: float = 0.008
    c2: float = 1.0e-6
    g: float = 9.81

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in _STRICTLY_POSITIVE:
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0.0:
                raise ValueError(f"{name} must be > 0, got {value!r}")
        for name in _NONNEGATIVE:
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0.0:
                raise ValueError(f"{name} must be >= 0, got {value!r}")
        for name in ("h_t", "h_s"):
            value = getattr(self, name)
            if value > 4.0:
                raise ValueError(f"{name} must lie in (0, 4] m, got {value!r}")
        if not self.a_r < 0.0 < self.a_f:
            raise ValueError("tractor axles must straddle the hitch (a_r < 0 < a_f)")
        if not self.a_s < 0.0:
            raise ValueError("trailer axle must be behind the hitch (a_s < 0)")

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in FIELDS], dtype=float)

    @classmethod
    def from_array(cls, values) -> "ParameterSet":
        values = np.asarray(values, dtype=float)
        if values.shape != (len(FIELDS),):
            raise ValueError(f"expected {len(FIELDS)} values, got shape {values.shape}")
        return cls(**{name: float(v) for name, v in zip(FIELDS, values)})

    def replace(self, **changes) -> "ParameterSet":
        unknown = set(changes) - set(FIELDS)
        if unknown:
            raise KeyError(f"unknown parameter(s): {sorted(unknown)}")
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in FIELDS}

    @classmethod
    def from_dict(cls, data: dict) -> "ParameterSet":
        unknown = set(data) - set(FIELDS)
        if unknown:
            raise KeyError(f"unknown parameter(s): {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})

    def to_json(self, path=None, indent: int = 2) -> str:
        text = json.dumps(self.to_dict(), indent=indent)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, source) -> "ParameterSet":
        """Load from a JSON string or a path to a JSON file."""
        if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
            source = Path(source).read_text()
        data = json.loads(source)
        if not isinstance(data, dict):
            raise ValueError("parameter JSON must be an object")
        return cls.from_dict(data)


FIELDS: tuple[str, ...] = tuple(f.name for f in dataclasses.fields(ParameterSet))
INDEX: dict[str, int] = {name: i for i, name in enumerate(FIELDS)}

# The perturbed trailer parameters of the closed-loop study.
TABLE2_PARAMS: tuple[str, ...] = ("m_s", "h_s", "I_xx_s", "I_zz_s", "C_alpha_s", "sigma_s")

# drag and rolling coefficients may be zeroed to switch the resistances off
_NONNEGATIVE = ("c_D_t", "c_D_s", "c1", "c2")
_STRICTLY_POSITIVE = tuple(
    name for name in FIELDS
    if name not in _NONNEGATIVE and name not in ("l_t", "l_s", "a_f", "a_r", "a_s")
)


def param_indices(names) -> np.ndarray:
    """Vector positions of the named parameters; raises ``KeyError`` listing valid names."""
    out = []
    for name in names:
        if name not in INDEX:
            raise KeyError(f"unknown parameter {name!r}; valid names: {', '.join(FIELDS)}")
        out.append(INDEX[name])
    return np.array(out, dtype=np.int64)
