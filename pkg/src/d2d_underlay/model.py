"""Network model for underlay D2D resource allocation.

Holds the scalar knobs, the fading laws of the two random interference
links, scenario generation on a single circular cell, and the closed-form
rate and fairness expressions every solver shares.

Conventions: all powers and gains are linear (not dB); rates are in
bits/s/Hz. Assignment matrices are indexed ``b[i, j]`` with ``i`` the
channel (one incumbent cellular user per channel) and ``j`` the D2D pair.
Per-(channel, pair) quantities in the downlink and the uplink follow the
same ``[i, j]`` layout.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special

FADING_KINDS = ("exponential", "gaussian", "chi_squared", "log_normal", "deterministic")
SPECTRA = ("ul", "dl")


@dataclass(frozen=True)
class NetworkParams:
    n_channels_ul: int = 10
    n_channels_dl: int = 10
    n_pairs: int = 10
    p_c_max_ul: float = 1.0
    p_c_max_dl: float = 10.0
    p_d_max: float = 0.5
    noise: float = 1e-3
    eta_c_min_ul: float = 1.0
    eta_c_min_dl: float = 1.0
    eta_d_min: float = 1.0
    epsilon: float = 0.1
    gamma: float = 1.0

    def __post_init__(self):
        for name in ("n_channels_ul", "n_channels_dl", "n_pairs"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("p_c_max_ul", "p_c_max_dl", "p_d_max", "noise"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("eta_c_min_ul", "eta_c_min_dl", "eta_d_min"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")

    def replace(self, **changes) -> "NetworkParams":
        return dataclasses.replace(self, **changes)

    def n_channels(self, spectrum: str) -> int:
        return self.n_channels_ul if spectrum == "ul" else self.n_channels_dl

    def p_c_max(self, spectrum: str) -> float:
        return self.p_c_max_ul if spectrum == "ul" else self.p_c_max_dl

    def eta_c_min(self, spectrum: str) -> float:
        return self.eta_c_min_ul if spectrum == "ul" else self.eta_c_min_dl


@dataclass(frozen=True, eq=False)
class FadingModel:
    """Distribution of a random interference gain.

    ``mean`` (and ``variance``) may be arrays, in which case the model
    describes a whole matrix of independent links elementwise. The
    exponential law is fixed by its mean (variance = mean**2). The other
    laws are moment matched to ``(mean, variance)``:

    * gaussian: N(mean, variance), truncated at zero for sampling and
      quantiles;
    * chi_squared: ``s * X`` with ``X ~ chi2(k)``, ``k = 2 mean^2 / var``,
      ``s = var / (2 mean)``;
    * log_normal: ``exp(N(mu, sigma^2))`` with
      ``sigma^2 = ln(1 + var/mean^2)``, ``mu = ln(mean) - sigma^2/2``;
    * deterministic: point mass at ``mean``.
    """

    kind: str
    mean: np.ndarray
    variance: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in FADING_KINDS:
            raise ValueError(f"unknown fading kind {self.kind!r}")
        mean = np.asarray(self.mean, dtype=float)
        if np.any(mean <= 0):
            raise ValueError("fading mean must be > 0")
        object.__setattr__(self, "mean", mean)
        if self.kind in ("exponential", "deterministic"):
            object.__setattr__(self, "variance", None)
            return
        if self.variance is None:
            raise ValueError(f"{self.kind} fading needs a variance")
        var = np.broadcast_to(np.asarray(self.variance, dtype=float), mean.shape).copy()
        if np.any(var <= 0):
            raise ValueError("fading variance must be > 0")
        object.__setattr__(self, "variance", var)

    @property
    def shape(self):
        return self.mean.shape

    @property
    def var(self) -> np.ndarray:
        if self.kind == "exponential":
            return self.mean**2
        if self.kind == "deterministic":
            return np.zeros_like(self.mean)
        return self.variance

    def at(self, *index) -> "FadingModel":
        """Scalar model of one link of an array-valued model."""
        var = None if self.variance is None else self.variance[index]
        return FadingModel(self.kind, self.mean[index], var)

    def transpose(self) -> "FadingModel":
        var = None if self.variance is None else self.variance.T
        return FadingModel(self.kind, self.mean.T, var)

    def _chi2_params(self):
        k = 2.0 * self.mean**2 / self.variance
        scale = self.variance / (2.0 * self.mean)
        return k, scale

    def _lognormal_params(self):
        s2 = np.log1p(self.variance / self.mean**2)
        return np.log(self.mean) - 0.5 * s2, np.sqrt(s2)

    def quantile(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if np.any((q <= 0) | (q >= 1)):
            raise ValueError("quantile level must lie in (0, 1)")
        if self.kind == "exponential":
            return -self.mean * np.log1p(-q)
        if self.kind == "deterministic":
            return np.broadcast_to(self.mean, np.broadcast(self.mean, q).shape).copy()
        if self.kind == "gaussian":
            return np.maximum(self.mean + np.sqrt(self.variance) * special.ndtri(q), 0.0)
        if self.kind == "chi_squared":
            k, scale = self._chi2_params()
            # chi2(k) = 2 * Gamma(k/2, 1)
            return scale * 2.0 * special.gammaincinv(k / 2.0, q)
        mu, sigma = self._lognormal_params()
        return np.exp(mu + sigma * special.ndtri(q))

    def sample(self, rng: np.random.Generator, size=()) -> np.ndarray:
        """Draw samples of shape ``size + self.shape``."""
        size = tuple(np.atleast_1d(size)) if size != () else ()
        full = size + self.shape
        if self.kind == "exponential":
            return rng.exponential(1.0, full) * self.mean
        if self.kind == "deterministic":
            return np.broadcast_to(self.mean, full).copy()
        if self.kind == "gaussian":
            x = self.mean + np.sqrt(self.variance) * rng.standard_normal(full)
            return np.maximum(x, 0.0)
        if self.kind == "chi_squared":
            k, scale = self._chi2_params()
            return scale * rng.chisquare(np.broadcast_to(k, full))
        mu, sigma = self._lognormal_params()
        return np.exp(mu + sigma * rng.standard_normal(full))


def quantile(model: FadingModel, q) -> np.ndarray:
    """Inverse CDF of ``model`` at level ``q`` in (0, 1)."""
    return model.quantile(q)


@dataclass(frozen=True)
class Geometry:
    cell_radius_m: float = 500.0
    d2d_radius_m: float = 5.0
    pathloss_exponent: float = 2.0
    reference_gain: float = 1.0
    min_distance_m: float = 1.0
    # std/mean of the non-exponential fading laws
    fading_cv: float = 0.5

    def __post_init__(self):
        if not (self.cell_radius_m > 0 and self.d2d_radius_m > 0):
            raise ValueError("radii must be > 0")
        if not self.pathloss_exponent > 0:
            raise ValueError("path-loss exponent must be > 0")
        if not (self.reference_gain > 0 and self.min_distance_m > 0 and self.fading_cv > 0):
            raise ValueError("reference gain, minimum distance and fading cv must be > 0")

    def path_gain(self, distance) -> np.ndarray:
        d = np.maximum(np.asarray(distance, dtype=float), self.min_distance_m)
        return self.reference_gain * d ** (-self.pathloss_exponent)


@dataclass(frozen=True, eq=False)
class NetworkInstance:
    """All link gains of one network drop.

    ``h_c_ul_model`` has shape (N_C_ul, N_D) (CU i -> D2D receiver j);
    ``h_d_dl_model`` has shape (N_D, N_C_dl) (D2D transmitter j -> CU i).
    """

    params: NetworkParams
    g_c_ul: np.ndarray
    g_c_dl: np.ndarray
    g_d: np.ndarray
    h_d_ul: np.ndarray
    h_c_dl: np.ndarray
    h_c_ul_model: FadingModel
    h_d_dl_model: FadingModel
    positions: dict = field(default_factory=dict)

    def __post_init__(self):
        p = self.params
        shapes = {
            "g_c_ul": (p.n_channels_ul,),
            "g_c_dl": (p.n_channels_dl,),
            "g_d": (p.n_pairs,),
            "h_d_ul": (p.n_pairs,),
            "h_c_dl": (p.n_pairs,),
        }
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if np.any(arr < 0):
                raise ValueError(f"{name} must be nonnegative")
            object.__setattr__(self, name, arr)
        if self.h_c_ul_model.shape != (p.n_channels_ul, p.n_pairs):
            raise ValueError("h_c_ul_model shape mismatch")
        if self.h_d_dl_model.shape != (p.n_pairs, p.n_channels_dl):
            raise ValueError("h_d_dl_model shape mismatch")

    def with_params(self, **changes) -> "NetworkInstance":
        """Same gains, different scalar knobs (counts must not change)."""
        return dataclasses.replace(self, params=self.params.replace(**changes))


def _uniform_disc(rng, n, radius, center=(0.0, 0.0)):
    r = radius * np.sqrt(rng.random(n))
    theta = 2 * np.pi * rng.random(n)
    return np.column_stack([center[0] + r * np.cos(theta), center[1] + r * np.sin(theta)]).reshape(n, 2)


def _fading(kind, mean, cv):
    if kind in ("exponential", "deterministic"):
        return FadingModel(kind, mean)
    return FadingModel(kind, mean, (cv * mean) ** 2)


def generate_instance(seed: int, geometry: Geometry, params: NetworkParams,
                      fading_kind: str = "exponential") -> NetworkInstance:
    """Drop CUs and D2D pairs in a cell centred on the BS and compute gains.

    CUs and D2D transmitters are uniform in the cell; each D2D receiver is
    uniform in a ``d2d_radius_m`` disc around its transmitter. The random
    interference links get fading laws whose mean is the path gain.
    """
    rng = np.random.default_rng(seed)
    cu_ul = _uniform_disc(rng, params.n_channels_ul, geometry.cell_radius_m)
    cu_dl = _uniform_disc(rng, params.n_channels_dl, geometry.cell_radius_m)
    d_tx = _uniform_disc(rng, params.n_pairs, geometry.cell_radius_m)
    offsets = _uniform_disc(rng, params.n_pairs, geometry.d2d_radius_m)
    d_rx = d_tx + offsets

    def dist(a, b):
        return np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)

    origin = np.zeros((1, 2))
    pg = geometry.path_gain
    return NetworkInstance(
        params=params,
        g_c_ul=pg(dist(cu_ul, origin)[:, 0]),
        g_c_dl=pg(dist(cu_dl, origin)[:, 0]),
        g_d=pg(np.linalg.norm(offsets, axis=1)),
        h_d_ul=pg(dist(d_tx, origin)[:, 0]),
        h_c_dl=pg(dist(d_rx, origin)[:, 0]),
        h_c_ul_model=_fading(fading_kind, pg(dist(cu_ul, d_rx)), geometry.fading_cv),
        h_d_dl_model=_fading(fading_kind, pg(dist(d_tx, cu_dl)), geometry.fading_cv),
        positions={"cu_ul": cu_ul, "cu_dl": cu_dl, "d2d_tx": d_tx, "d2d_rx": d_rx},
    )


# --- rates -----------------------------------------------------------------

def shared_rate(p_signal, gain, p_interf, h_interf, noise):
    """log2(1 + p_signal*gain / (noise + p_interf*h_interf))."""
    return np.log2(1.0 + p_signal * gain / (noise + p_interf * h_interf))


def rate_cu_shared(p_c, p_d, g_c, h_interf, noise):
    return shared_rate(p_c, g_c, p_d, h_interf, noise)


def rate_d2d_shared(p_d, p_c, g_d, h_interf, noise):
    return shared_rate(p_d, g_d, p_c, h_interf, noise)


def solo_rate(p_c_max, g_c, noise):
    """Rate of a CU that keeps its channel to itself at full power."""
    return np.log2(1.0 + p_c_max * np.asarray(g_c, dtype=float) / noise)


def solo_rates(instance: NetworkInstance, spectrum: str) -> np.ndarray:
    p = instance.params
    g_c = instance.g_c_ul if spectrum == "ul" else instance.g_c_dl
    return solo_rate(p.p_c_max(spectrum), g_c, p.noise)


def rate_gain_v(i, j, p_c, p_d, instance: NetworkInstance, spectrum: str, h_eff):
    """Network-rate change when pair ``j`` shares channel ``i``.

    ``h_eff`` is the gain used for the random interference link: the
    D2D->CU link in the downlink, the CU->D2D link in the uplink. The
    other interference link is deterministic and read from ``instance``.
    """
    p = instance.params
    if spectrum == "dl":
        r_c = rate_cu_shared(p_c, p_d, instance.g_c_dl[i], h_eff, p.noise)
        r_d = rate_d2d_shared(p_d, p_c, instance.g_d[j], instance.h_c_dl[j], p.noise)
    elif spectrum == "ul":
        r_c = rate_cu_shared(p_c, p_d, instance.g_c_ul[i], instance.h_d_ul[j], p.noise)
        r_d = rate_d2d_shared(p_d, p_c, instance.g_d[j], h_eff, p.noise)
    else:
        raise ValueError(f"unknown spectrum {spectrum!r}")
    return r_c + r_d - solo_rates(instance, spectrum)[i]


def total_rate(b, v, instance: NetworkInstance, spectrum: str) -> float:
    """Sum over channels of the solo CU rate plus the gain of the sharing pair."""
    b = np.asarray(b, dtype=float)
    v = np.asarray(v, dtype=float)
    gains = np.sum(b * np.where(b != 0, v, 0.0))
    return float(gains + solo_rates(instance, spectrum).sum())


# --- fairness --------------------------------------------------------------

def fairness_delta(b, n_channels: Optional[int] = None, n_pairs: Optional[int] = None) -> float:
    """Normalised variance of per-pair channel counts around N_C / N_D."""
    b = np.asarray(b, dtype=float)
    n_c = b.shape[0] if n_channels is None else n_channels
    n_d = b.shape[1] if n_pairs is None else n_pairs
    m = b.sum(axis=0)
    return float(n_d / n_c**2 * np.sum((m - n_c / n_d) ** 2))


def joint_fairness_delta(b_ul, b_dl, params: Optional[NetworkParams] = None) -> float:
    b_ul = np.asarray(b_ul, dtype=float)
    b_dl = np.asarray(b_dl, dtype=float)
    n_d = b_ul.shape[1] if params is None else params.n_pairs
    m0 = (b_ul.shape[0] + b_dl.shape[0]) / n_d
    m = b_ul.sum(axis=0) + b_dl.sum(axis=0)
    return float(np.sum((m - m0) ** 2) / (m0**2 * n_d))


def joint_fairness_delta_expanded(b_ul, b_dl) -> float:
    """Joint unfairness written through the per-spectrum deltas.

    This form drops the sum of products m_j^ul * m_j^dl, so it agrees with
    :func:`joint_fairness_delta` only on assignments where no pair is active
    in both spectra.
    """
    b_ul = np.asarray(b_ul, dtype=float)
    b_dl = np.asarray(b_dl, dtype=float)
    n_u, n_d = b_ul.shape
    m0u, m0d = n_u / n_d, b_dl.shape[0] / n_d
    m0 = m0u + m0d
    mu, md = b_ul.sum(axis=0), b_dl.sum(axis=0)
    c = 2.0 / (m0**2 * n_d)
    return float(
        m0u**2 / m0**2 * fairness_delta(b_ul)
        - c * np.sum(m0d * mu)
        + m0d**2 / m0**2 * fairness_delta(b_dl)
        - c * np.sum(m0u * md)
        + 2.0 * m0u * m0d / m0**2
    )


# --- results ---------------------------------------------------------------

@dataclass(eq=False)
class AllocationResult:
    """Output of one resource-allocation pipeline.

    Power and utility matrices are per (channel, pair) subproblem; only the
    entries with ``b == 1`` are used on air. ``total_rate`` is UL+DL network
    rate measured with the mode's own utility (plain, expected or
    (1-eps)-guaranteed rate gain).
    """

    mode: str
    b_ul: np.ndarray
    b_dl: np.ndarray
    p_c_ul: np.ndarray
    p_d_ul: np.ndarray
    p_c_dl: np.ndarray
    p_d_dl: np.ndarray
    v_ul: np.ndarray
    v_dl: np.ndarray
    rate_ul: float
    rate_dl: float
    fairness_delta: float
    iterations: int = 0
    messages_exchanged: int = 0
    relaxed_ul: Optional[np.ndarray] = None
    relaxed_dl: Optional[np.ndarray] = None
    objective_trace: list = field(default_factory=list)
    iterates: Optional[dict] = None

    @property
    def total_rate(self) -> float:
        return self.rate_ul + self.rate_dl

    def cu_powers(self, spectrum: str, p_c_max: float) -> np.ndarray:
        """Per-channel CU (or BS) power: the shared value, or full power when alone."""
        b = self.b_ul if spectrum == "ul" else self.b_dl
        p_c = self.p_c_ul if spectrum == "ul" else self.p_c_dl
        return np.where(b.any(axis=1), (b * p_c).sum(axis=1), p_c_max)
