"""Spherical-basis decomposition, dipole emission patterns and Jones optics.

Conventions: the spherical unit vectors about the quantization axis z are
e(-1) = (x - iy)/sqrt2, e(0) = z, e(+1) = -(x + iy)/sqrt2, so a field
E = sum_q a_q e(q) drives the Delta-m = q transition with amplitude a_q.
A photon emitted on channel q carries the transverse projection of e(q) at
its emission direction; the squared norm of that projection is the
(unnormalized) angular emission pattern.
"""

from __future__ import annotations

import math

import numpy as np


def _orthonormal_transverse(direction):
    """Right-handed transverse pair (e1, e2) with e1 x e2 = direction."""
    n = np.asarray(direction, dtype=float)
    n = n / np.linalg.norm(n)
    helper = np.array([0.0, 0.0, 1.0])
    if abs(n @ helper) > 0.9:
        helper = np.array([1.0, 0.0, 0.0])
    e1 = np.cross(helper, n)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return e1, e2


def spherical_unit_vectors(quantization_axis=(0, 0, 1)):
    """Complex spherical basis vectors {-1: e-, 0: e0, +1: e+} about the axis."""
    z = np.asarray(quantization_axis, dtype=float)
    z = z / np.linalg.norm(z)
    x, y = _orthonormal_transverse(z)  # x cross y = z
    return {
        -1: (x - 1j * y) / math.sqrt(2),
        0: z.astype(complex),
        +1: -(x + 1j * y) / math.sqrt(2),
    }


def spherical_components(direction, polarization, quantization_axis=(0, 0, 1)):
    """Decompose a transverse Jones vector into (a_-1, a_0, a_+1).

    `polarization` is a complex 2-vector in the transverse basis of
    `direction` (see _orthonormal_transverse); the returned amplitudes
    satisfy sum |a_q|^2 = 1 for a unit-norm input.
    """
    pol = np.asarray(polarization, dtype=complex)
    norm = np.linalg.norm(pol)
    if norm == 0:
        raise ValueError("polarization must be nonzero")
    pol = pol / norm
    e1, e2 = _orthonormal_transverse(direction)
    field = pol[0] * e1 + pol[1] * e2
    basis = spherical_unit_vectors(quantization_axis)
    return tuple(np.vdot(basis[q], field) for q in (-1, 0, +1))


def pump_polarization_45deg(sign=+1):
    """Jones vector of the pump entering at 45 deg that nulls one sigma component.

    For sign=+1 the sigma(-1) amplitude vanishes (only pi and sigma+ are
    driven, pumping toward m=+5/2); sign=-1 mirrors it.  Returns
    (direction, jones) with jones in the transverse basis of direction.
    """
    direction = np.array([1.0, 0.0, sign * 1.0]) / math.sqrt(2)
    # transverse basis from _orthonormal_transverse; solve a_{-sign} = 0
    e1, e2 = _orthonormal_transverse(direction)
    basis = spherical_unit_vectors((0, 0, 1))
    target = basis[-sign]
    # field = u e1 + v e2 with <target, field> = u c1 + v c2 = 0
    c1 = np.vdot(target, e1)
    c2 = np.vdot(target, e2)
    jones = np.array([c2, -c1], dtype=complex)
    jones /= np.linalg.norm(jones)
    return direction, jones


def emission_transverse_field(q, direction, quantization_axis=(0, 0, 1)):
    """Jones vector and pattern weight of a q-photon emitted along direction.

    Returns (jones, weight): jones is the normalized transverse field in the
    basis of `direction`; weight = |projection|^2 is proportional to the
    angular pdf (sin^2 for pi, (1+cos^2)/2 for sigma).
    """
    n = np.asarray(direction, dtype=float)
    n = n / np.linalg.norm(n)
    e_q = spherical_unit_vectors(quantization_axis)[q]
    proj = e_q - (n @ e_q) * n
    weight = float(np.real(np.vdot(proj, proj)))
    e1, e2 = _orthonormal_transverse(n)
    if weight < 1e-30:
        return np.array([1.0 + 0j, 0.0 + 0j]), 0.0
    jones = np.array([np.vdot(e1, proj), np.vdot(e2, proj)])
    jones /= np.linalg.norm(jones)
    return jones, weight


def emission_pdf(q, cos_theta):
    """Normalized angular pdf over the sphere vs cos(theta) to the axis."""
    c = np.asarray(cos_theta, dtype=float)
    if q == 0:
        return (3.0 / (8.0 * math.pi)) * (1.0 - c**2)
    return (3.0 / (16.0 * math.pi)) * (1.0 + c**2)


def sample_emission_direction(q, rng, size=None):
    """Draw emission directions from the dipole pattern of channel q.

    Azimuth is uniform; cos(theta) is drawn by rejection from the exact
    pattern.  Returns an array of unit vectors, shape (3,) or (size, 3).
    """
    n = 1 if size is None else int(size)
    out = np.empty((n, 3))
    filled = 0
    while filled < n:
        todo = n - filled
        c = rng.uniform(-1.0, 1.0, size=2 * todo + 16)
        u = rng.uniform(0.0, 1.0, size=c.size)
        accept = u < (1.0 - c**2 if q == 0 else 0.5 * (1.0 + c**2))
        c = c[accept][:todo]
        k = c.size
        phi = rng.uniform(0.0, 2.0 * math.pi, size=k)
        s = np.sqrt(1.0 - c**2)
        out[filled:filled + k, 0] = s * np.cos(phi)
        out[filled:filled + k, 1] = s * np.sin(phi)
        out[filled:filled + k, 2] = c
        filled += k
    return out[0] if size is None else out


def collection_probability(pattern, half_angle):
    """Probability of emission into a cone about the axis, closed form.

    pattern is 'isotropic', 'pi' (q=0) or 'sigma' (q=+-1); half_angle in
    radians, in (0, pi/2).
    """
    if not 0.0 < half_angle < math.pi / 2:
        raise ValueError("cone half-angle must be in (0, pi/2)")
    c0 = math.cos(half_angle)
    if pattern == "isotropic":
        return 0.5 * (1.0 - c0)
    if pattern == "sigma":
        return (3.0 / 8.0) * ((1.0 - c0) + (1.0 - c0**3) / 3.0)
    if pattern == "pi":
        return (3.0 / 4.0) * ((1.0 - c0) - (1.0 - c0**3) / 3.0)
    raise ValueError(f"unknown pattern {pattern!r}")


def waveplate_jones(retardance, fast_axis_angle):
    """Jones matrix of a retarder: R(a) diag(1, e^{i delta}) R(-a)."""
    c, s = math.cos(fast_axis_angle), math.sin(fast_axis_angle)
    rot = np.array([[c, -s], [s, c]])
    ret = np.array([[1.0, 0.0], [0.0, np.exp(1j * retardance)]])
    return rot @ ret @ rot.T


def circular_jones(handedness):
    """On-axis Jones vector of a sigma(+-1) photon collected along +z."""
    if handedness == +1:
        return np.array([1.0, 1j]) / math.sqrt(2)
    if handedness == -1:
        return np.array([1.0, -1j]) / math.sqrt(2)
    raise ValueError("handedness must be +1 or -1")
