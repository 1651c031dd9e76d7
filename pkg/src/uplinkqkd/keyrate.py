"""Decoy-state security calculus for vacuum+weak BB84.

Implements the asymptotic and finite-size secure key rate bounds for a
weak-coherent-pulse source with one weak decoy intensity and vacuum:
the single-photon gain lower bound, the single-photon QBER upper bound
(minimum of the signal- and decoy-derived estimates), the asymptotic
rate, and the finite-size rate with its statistical-fluctuation penalty
term optimized over the two free smoothing parameters.

All operations are pure functions of their inputs and are safe to call
concurrently.  Searches (worst-case corner enumeration, the smoothing
parameter grid) are deterministic: ties are broken by the lexicographic
index of the corner or grid point.
"""

from __future__ import annotations

import dataclasses
import itertools
import math
from dataclasses import dataclass

from .errors import ConfigurationError, DomainError

__all__ = [
    "SourceConfig",
    "ChannelStatistics",
    "SecurityParams",
    "KeyRateResult",
    "binary_entropy",
    "single_photon_gain_lb",
    "single_photon_qber_ub",
    "asymptotic_rate",
    "finite_size_rate",
    "worst_case_statistics",
    "project_statistics",
]


@dataclass(frozen=True)
class SourceConfig:
    """Transmitter-side parameters entering the key rate bounds.

    ``q`` is the basis reconciliation factor: 1/2 for an ideal BB84
    receiver with balanced passive basis choice.  When analyzing
    measured data the empirical sifted/raw ratio may be substituted.
    """

    mu: float
    nu: float
    q: float = 0.5
    k_mu: float = 0.92
    k_nu: float = 0.04
    k_vac: float = 0.04
    pulse_rate: float = 76e6

    def __post_init__(self):
        if not 0.0 < self.nu < self.mu:
            raise ConfigurationError(f"need 0 < nu < mu, got mu={self.mu}, nu={self.nu}")
        if self.mu * self.nu - self.nu**2 <= 0.0:
            raise ConfigurationError("mu*nu - nu^2 must be positive")
        if abs(self.k_mu + self.k_nu + self.k_vac - 1.0) > 1e-9:
            raise ConfigurationError("intensity-class fractions must sum to 1")
        if not all(0.0 <= k <= 1.0 for k in (self.k_mu, self.k_nu, self.k_vac)):
            raise ConfigurationError("intensity-class fractions must lie in [0, 1]")
        if not 0.0 < self.q <= 1.0:
            raise ConfigurationError(f"q must lie in (0, 1], got {self.q}")
        if self.pulse_rate <= 0:
            raise ConfigurationError("pulse_rate must be positive")


@dataclass(frozen=True)
class ChannelStatistics:
    """Measured per-class gains, error rates, counts and 1-sigma errors.

    Rates are per sent pulse of the corresponding class; ``y0`` is the
    background (vacuum) yield per pulse period.  ``n_vac`` counts
    between-pulse background detections.  The flat field names double as
    the JSON record schema used by fixtures and the CLI.
    """

    q_mu: float
    q_nu: float
    e_mu: float
    e_nu: float
    y0: float
    e0_mu: float = 0.5
    e0_nu: float = 0.5
    n_mu: int = 0
    n_nu: int = 0
    n_vac: int = 0
    sigma_q_mu: float = 0.0
    sigma_q_nu: float = 0.0
    sigma_e_mu: float = 0.0
    sigma_e_nu: float = 0.0
    sigma_y0: float = 0.0
    pulses_sent: int = 0
    duration_s: float = 0.0

    def __post_init__(self):
        for name in ("q_mu", "q_nu", "e_mu", "e_nu", "y0", "e0_mu", "e0_nu"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DomainError(f"{name} must lie in [0, 1], got {v}")
        for name in ("n_mu", "n_nu", "n_vac", "pulses_sent"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be nonnegative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, record: dict) -> "ChannelStatistics":
        known = {f.name for f in dataclasses.fields(cls)}
        missing = [f.name for f in dataclasses.fields(cls)
                   if f.default is dataclasses.MISSING and f.name not in record]
        if missing:
            raise ConfigurationError(f"statistics record missing fields: {', '.join(missing)}")
        return cls(**{k: v for k, v in record.items() if k in known})


@dataclass(frozen=True)
class SecurityParams:
    """Security targets and error-correction accounting knobs.

    ``reveal_fraction`` is the share of sifted bits disclosed for the
    synchronization/QBER estimate; it is deducted from the usable key.
    """

    epsilon: float = 1e-9
    epsilon_ec: float = 1e-10
    f_ec: float = 1.2
    ten_sigma: float = 10.0
    reveal_fraction: float = 0.05

    def __post_init__(self):
        if not self.epsilon > self.epsilon_ec > 0.0:
            raise ConfigurationError("need epsilon > epsilon_ec > 0")
        if self.f_ec < 1.0:
            raise ConfigurationError("f_ec must be >= 1")
        if not 0.0 <= self.reveal_fraction < 1.0:
            raise ConfigurationError("reveal_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class KeyRateResult:
    q1_lb: float
    e1_ub: float
    r_inf: float
    r_finite: float
    delta: float
    eps_bar: float
    eps_bar_prime: float
    final_length_bits: int


def binary_entropy(p: float) -> float:
    """H2(p) = -p log2 p - (1-p) log2 (1-p), with 0 log2 0 = 0."""
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"binary_entropy argument must lie in [0, 1], got {p}")
    if p == 0.0 or p == 1.0:
        return 0.0
    return -p * math.log2(p) - (1.0 - p) * math.log2(1.0 - p)


def single_photon_gain_lb(cfg: SourceConfig, stats: ChannelStatistics) -> float:
    """Lower bound on the single-photon gain from the two measured intensities.

    Negative raw values (possible for fluctuating high-loss data) clamp
    to zero; callers must then treat the secure rate as zero.
    """
    mu, nu = cfg.mu, cfg.nu
    denom = mu * nu - nu**2
    if denom <= 0.0:
        raise ConfigurationError("mu*nu - nu^2 must be positive")
    q1 = (mu**2 * math.exp(-mu) / denom) * (
        stats.q_nu * math.exp(nu)
        - stats.q_mu * math.exp(mu) * nu**2 / mu**2
        - (mu**2 - nu**2) / mu**2 * stats.y0
    )
    return max(q1, 0.0)


def single_photon_qber_ub(cfg: SourceConfig, stats: ChannelStatistics, q1_lb: float) -> float:
    """Upper bound on the single-photon QBER.

    Both the signal-derived and the decoy-derived estimates are computed
    and the smaller is returned, clamped to [0, 1].
    """
    if q1_lb <= 0.0:
        raise DomainError("single-photon QBER bound undefined for q1_lb = 0; rate is 0")
    mu, nu = cfg.mu, cfg.nu
    from_signal = (stats.e_mu * stats.q_mu / q1_lb
                   - stats.e0_mu * stats.y0 / (q1_lb * math.exp(mu)))
    from_decoy = ((stats.e_nu * stats.q_nu * math.exp(nu) - stats.e0_nu * stats.y0)
                  * mu * math.exp(-mu) / (nu * q1_lb))
    return min(max(min(from_signal, from_decoy), 0.0), 1.0)


def _rate_terms(cfg: SourceConfig, bound_stats: ChannelStatistics,
                ec_stats: ChannelStatistics, sec: SecurityParams) -> float:
    """Braced term of the rate bounds: EC leak plus single-photon credit.

    The single-photon bound is evaluated on ``bound_stats`` (possibly
    worst-case adjusted) while the error-correction leak term uses
    ``ec_stats``: after reconciliation the signal QBER and gain are
    exactly known, so only the decoy-method inference carries the
    statistical-fluctuation adjustment.
    """
    q1 = single_photon_gain_lb(cfg, bound_stats)
    if q1 <= 0.0:
        credit = 0.0
    else:
        e1 = single_photon_qber_ub(cfg, bound_stats, q1)
        credit = q1 * (1.0 - binary_entropy(e1))
    return -ec_stats.q_mu * sec.f_ec * binary_entropy(ec_stats.e_mu) + credit


def asymptotic_rate(cfg: SourceConfig, stats: ChannelStatistics, sec: SecurityParams) -> float:
    """Asymptotic secure key rate per laser pulse, clamped at zero.

    Multiplying by ``cfg.pulse_rate`` gives bits per second.  The
    revealed synchronization subset is deducted as a multiplicative
    ``1 - reveal_fraction`` on the sifted-key accounting.
    """
    braced = _rate_terms(cfg, stats, stats, sec)
    r = cfg.q * cfg.k_mu * (1.0 - sec.reveal_fraction) * braced
    return max(r, 0.0)


def _delta(n_mu: float, eps_bar: float, eps_bar_prime: float, sec: SecurityParams) -> float:
    return (7.0 * math.sqrt(n_mu * math.log2(2.0 / (eps_bar - eps_bar_prime)))
            - 2.0 * math.log2(2.0 * (sec.epsilon - sec.epsilon_ec - eps_bar)))


_EBAR_GRID_POINTS = 80
_EBARP_FRACTIONS = (0.0, 1e-6, 1e-3, 0.1, 0.5)


def _optimize_delta(n_mu: float, sec: SecurityParams) -> tuple[float, float, float]:
    """Minimize the fluctuation penalty over its two free parameters.

    Coarse log-spaced grid over eps_bar in (0, epsilon - epsilon_ec) and
    eps_bar_prime in [0, eps_bar), then ternary refinement of eps_bar at
    the best eps_bar_prime.  Deterministic; ties keep the first (lowest
    lexicographic index) grid point.
    """
    lim = sec.epsilon - sec.epsilon_ec
    best = (math.inf, lim / 2.0, 0.0)
    for i in range(_EBAR_GRID_POINTS):
        # fractions of lim spanning 1e-6 .. ~0.9999 on a log scale
        frac = 10.0 ** (-6.0 + 5.99995 * i / (_EBAR_GRID_POINTS - 1))
        eps_bar = frac * lim
        for fp in _EBARP_FRACTIONS:
            eps_bar_prime = fp * eps_bar
            d = _delta(n_mu, eps_bar, eps_bar_prime, sec)
            if d < best[0]:
                best = (d, eps_bar, eps_bar_prime)
    _, eb, ebp = best
    lo, hi = eb / 4.0, min(eb * 4.0, lim * (1.0 - 1e-9))
    for _ in range(80):
        m1 = lo + (hi - lo) / 3.0
        m2 = hi - (hi - lo) / 3.0
        if _delta(n_mu, m1, ebp, sec) <= _delta(n_mu, m2, ebp, sec):
            hi = m2
        else:
            lo = m1
    eb = (lo + hi) / 2.0
    return _delta(n_mu, eb, ebp, sec), eb, ebp


# Parameters entering the single-photon bounds as statistical estimates,
# adjusted by the worst-case heuristic.  The signal gain is definitionally
# tied to the directly counted n_mu and is left at its measured value.
_FLUCTUATING = (
    ("q_nu", "sigma_q_nu"),
    ("e_mu", "sigma_e_mu"),
    ("e_nu", "sigma_e_nu"),
    ("y0", "sigma_y0"),
)


def _corner(stats: ChannelStatistics, signs, sec: SecurityParams) -> ChannelStatistics:
    updates = {}
    for (field, sigma_field), s in zip(_FLUCTUATING, signs):
        v = getattr(stats, field) + s * sec.ten_sigma * getattr(stats, sigma_field)
        updates[field] = min(max(v, 0.0), 1.0)
    return dataclasses.replace(stats, **updates)


def worst_case_statistics(stats: ChannelStatistics, sec: SecurityParams,
                          cfg: SourceConfig) -> ChannelStatistics:
    """Corner of the +/- ten-sigma hypercube minimizing the finite rate.

    All 2^4 corners over the statistically estimated quantities
    (decoy gain, signal and decoy QBER, vacuum yield) are evaluated
    exhaustively; the corner giving the smallest finite-size rate is
    returned.  Ties keep the lexicographically first corner.
    """
    best_rate = math.inf
    best = stats
    n_mu = max(stats.n_mu, 1)
    d, _, _ = _optimize_delta(n_mu, sec)
    for signs in itertools.product((-1, 1), repeat=len(_FLUCTUATING)):
        candidate = _corner(stats, signs, sec)
        braced = _rate_terms(cfg, candidate, stats, sec)
        r = max(braced - stats.q_mu * d / n_mu, 0.0)
        if r < best_rate:
            best_rate = r
            best = candidate
    return best


def finite_size_rate(cfg: SourceConfig, stats: ChannelStatistics,
                     sec: SecurityParams) -> KeyRateResult:
    """Finite-size secure key rate per pulse, with optimized penalty.

    The measured statistics are first passed through
    :func:`worst_case_statistics`; the adjusted values feed the
    single-photon bounds while the error-correction leak and the
    per-count penalty use the directly measured quantities.
    """
    if sec.epsilon <= sec.epsilon_ec:
        raise ConfigurationError("epsilon must exceed epsilon_ec")
    if stats.n_mu <= 0:
        raise ConfigurationError("finite-size rate requires n_mu > 0")
    wc = worst_case_statistics(stats, sec, cfg)
    q1 = single_photon_gain_lb(cfg, wc)
    e1 = single_photon_qber_ub(cfg, wc, q1) if q1 > 0.0 else 1.0
    braced = _rate_terms(cfg, wc, stats, sec)
    d, eps_bar, eps_bar_prime = _optimize_delta(stats.n_mu, sec)
    scale = cfg.q * cfg.k_mu * (1.0 - sec.reveal_fraction)
    r_fin = max(scale * (braced - stats.q_mu * d / stats.n_mu), 0.0)
    r_inf = asymptotic_rate(cfg, stats, sec)
    r_fin = min(r_fin, r_inf)
    return KeyRateResult(
        q1_lb=q1,
        e1_ub=e1,
        r_inf=r_inf,
        r_finite=r_fin,
        delta=d,
        eps_bar=eps_bar,
        eps_bar_prime=eps_bar_prime,
        final_length_bits=int(r_fin * stats.pulses_sent),
    )


def project_statistics(stats: ChannelStatistics, cfg: SourceConfig,
                       new_rate: float, new_fractions: tuple[float, float, float],
                       ) -> tuple[ChannelStatistics, SourceConfig]:
    """Rescale counts to a different source rate and intensity mix.

    Gains and QBERs are left unchanged; pulse and detection counts are
    scaled to the new repetition rate and class fractions over the same
    duration, and the 1-sigma uncertainties are recomputed from the
    scaled counts (binomial for QBERs, Poissonian for gains and yield).
    """
    k_mu, k_nu, k_vac = new_fractions
    if abs(k_mu + k_nu + k_vac - 1.0) > 1e-9:
        raise ConfigurationError("new fractions must sum to 1")
    new_cfg = dataclasses.replace(cfg, k_mu=k_mu, k_nu=k_nu, k_vac=k_vac,
                                  pulse_rate=new_rate)
    pulses = int(round(new_rate * stats.duration_s))
    n_mu = int(round(stats.q_mu * k_mu * pulses))
    n_nu = int(round(stats.q_nu * k_nu * pulses))
    n_vac = int(round(stats.y0 * pulses))
    new_stats = dataclasses.replace(
        stats,
        n_mu=n_mu, n_nu=n_nu, n_vac=n_vac, pulses_sent=pulses,
        sigma_q_mu=math.sqrt(max(n_mu, 1)) / max(k_mu * pulses, 1.0),
        sigma_q_nu=math.sqrt(max(n_nu, 1)) / max(k_nu * pulses, 1.0),
        sigma_e_mu=math.sqrt(stats.e_mu * (1.0 - stats.e_mu) / max(n_mu, 1)),
        sigma_e_nu=math.sqrt(stats.e_nu * (1.0 - stats.e_nu) / max(n_nu, 1)),
        sigma_y0=math.sqrt(max(n_vac, 1)) / max(pulses, 1),
    )
    return new_stats, new_cfg
