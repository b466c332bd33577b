"""Loading and validation of the atomic-constants file.

The constants file is plain "key = value" text (see data/ca40.constants for
the documented schema).  Everything numeric about the atom lives there, not
in code; the loader converts to the package-internal unit system once:

* time in ns
* angular frequency / rates in rad/ns
* magnetic field in gauss
* wavelengths in nm
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

# hbar*c in J*m; used for saturation intensities
_HBAR_C = 1.054571817e-34 * 2.99792458e8

TERMS = ("S12", "P12", "D32", "D52", "P32")
TRANSITION_LABELS = {
    ("P12", "S12"): "397",
    ("P12", "D32"): "866",
    ("P32", "S12"): "393",
    ("P32", "D32"): "850",
    ("P32", "D52"): "854",
}


class ConstantsError(ValueError):
    """Raised for unparsable or physically inconsistent constants files."""


@dataclass
class AtomicConstants:
    """Parsed constants in internal units plus the raw key/value map."""

    lifetimes_ns: dict          # term -> ns
    branching: dict             # (upper, lower) -> fraction
    wavelengths_nm: dict        # (upper, lower) -> nm
    g_factors: dict             # term -> Lande g
    bohr_magneton: float        # rad/ns per gauss
    magnetic_field_gauss: float
    intensity_scale: dict       # label -> dimensionless
    detection: dict             # detection-chain defaults
    aom: dict                   # AOM switching defaults
    schema_version: int
    source_path: str
    sha256: str
    raw: dict = field(repr=False, default_factory=dict)

    def decay_rate(self, term):
        """Total decay rate 1/tau of a term in rad/ns (0 for stable terms)."""
        tau = self.lifetimes_ns.get(term)
        return 0.0 if tau is None else 1.0 / tau

    def partial_rate(self, upper, lower):
        """Partial decay rate upper->lower in 1/ns."""
        return self.branching[(upper, lower)] / self.lifetimes_ns[upper]

    def saturation_intensity(self, upper, lower):
        """I_sat in W/m^2 from the partial linewidth and wavelength.

        I_sat = (2 pi^2 / 3) * hbar c * Gamma_partial / lambda^3 with
        Gamma_partial in 1/s and lambda in m.
        """
        gamma_si = self.partial_rate(upper, lower) * 1e9
        lam_m = self.wavelengths_nm[(upper, lower)] * 1e-9
        return (2.0 * math.pi**2 / 3.0) * _HBAR_C * gamma_si / lam_m**3


def default_constants_path():
    return str(resources.files("ionphoton").joinpath("data/ca40.constants"))


def parse_key_values(text, source=""):
    """Parse the 'key = value' format; errors carry line number and key."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConstantsError(
                f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ConstantsError(f"{source}:{lineno}: empty key or value")
        if key in values:
            raise ConstantsError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = float(value)
        except ValueError as exc:
            raise ConstantsError(
                f"{source}:{lineno}: key {key!r}: not a number: {value!r}") from exc
    return values


def load_constants(path=None):
    """Load and validate an atomic-constants file.

    Raises ConstantsError for parse problems (with line and key) and for
    invalid physics: non-positive lifetimes, branching fractions that do
    not sum to 1 within 1e-9, missing keys.
    """
    path = default_constants_path() if path is None else str(path)
    data = Path(path).read_bytes()
    values = parse_key_values(data.decode("utf-8"), source=path)

    def take(key):
        if key not in values:
            raise ConstantsError(f"{path}: missing required key {key!r}")
        return values[key]

    lifetimes = {t: take(f"lifetime.{t}") for t in ("P12", "P32")}
    for term, tau in lifetimes.items():
        if tau <= 0:
            raise ConstantsError(f"{path}: key lifetime.{term}: must be > 0, got {tau}")

    branching, wavelengths = {}, {}
    for (upper, lower) in TRANSITION_LABELS:
        branching[(upper, lower)] = take(f"branching.{upper}.{lower}")
        wavelengths[(upper, lower)] = take(f"wavelength.{upper}.{lower}")
        if branching[(upper, lower)] < 0:
            raise ConstantsError(
                f"{path}: key branching.{upper}.{lower}: must be >= 0")
        if wavelengths[(upper, lower)] <= 0:
            raise ConstantsError(
                f"{path}: key wavelength.{upper}.{lower}: must be > 0")
    for upper in ("P12", "P32"):
        total = sum(v for (u, _), v in branching.items() if u == upper)
        if abs(total - 1.0) > 1e-9:
            raise ConstantsError(
                f"{path}: branching fractions of {upper} sum to {total!r}, not 1")

    g_factors = {t: take(f"g_factor.{t}") for t in TERMS}

    intensity_scale = {}
    for label in ("397", "866", "850", "854"):
        intensity_scale[label] = values.get(f"intensity_scale.{label}", 1.0)
        if intensity_scale[label] <= 0:
            raise ConstantsError(f"{path}: key intensity_scale.{label}: must be > 0")

    detection = {k.split(".", 1)[1]: v for k, v in values.items()
                 if k.startswith("detection.")}
    aom = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("aom.")}

    return AtomicConstants(
        lifetimes_ns=lifetimes,
        branching=branching,
        wavelengths_nm=wavelengths,
        g_factors=g_factors,
        bohr_magneton=take("bohr_magneton_rad_per_ns_gauss"),
        magnetic_field_gauss=take("magnetic_field_gauss"),
        intensity_scale=intensity_scale,
        detection=detection,
        aom=aom,
        schema_version=int(take("schema_version")),
        source_path=path,
        sha256=hashlib.sha256(data).hexdigest(),
        raw=values,
    )


def lande_g_factor(L, S, J):
    """Lande g_J = 1 + [J(J+1) + S(S+1) - L(L+1)] / [2 J(J+1)]."""
    return 1.0 + (J * (J + 1) + S * (S + 1) - L * (L + 1)) / (2.0 * J * (J + 1))
