"""Downlink outage and the slotted (IRSA / ALOHA) uplink with SIC decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .special import gaussian_q

_PROB_TOL = 1e-12


@dataclass(frozen=True)
class DegreeDistribution:
    """Replica-count distribution Λ; ``probs[ℓ]`` is the probability of ℓ replicas."""

    probs: dict

    def __post_init__(self):
        probs = {int(k): float(v) for k, v in dict(self.probs).items() if float(v) != 0.0}
        if not probs:
            raise ValueError("degree distribution is empty")
        if any(k < 1 for k in probs):
            raise ValueError("replica counts must be >= 1")
        if any(v < 0 or not math.isfinite(v) for v in probs.values()):
            raise ValueError("degree probabilities must be nonnegative")
        if abs(sum(probs.values()) - 1.0) > _PROB_TOL:
            raise ValueError("degree probabilities must sum to 1")
        object.__setattr__(self, "probs", dict(sorted(probs.items())))

    @classmethod
    def aloha(cls) -> "DegreeDistribution":
        return cls({1: 1.0})

    @classmethod
    def regular(cls, degree: int) -> "DegreeDistribution":
        return cls({degree: 1.0})

    @property
    def max_degree(self) -> int:
        return max(self.probs)

    @property
    def is_aloha(self) -> bool:
        return self.probs == {1: 1.0}

    def sample(self, rng, size) -> np.ndarray:
        degrees = np.fromiter(self.probs, dtype=np.int64)
        if degrees.size == 1:
            return np.full(size, degrees[0], dtype=np.int64)
        p = np.fromiter(self.probs.values(), dtype=float)
        return rng.choice(degrees, size=size, p=p / p.sum())

    def to_dict(self) -> dict:
        return {str(k): v for k, v in self.probs.items()}


@dataclass(frozen=True)
class IrsaConstants:
    """Waterfall (alpha) and error-floor (stopping-set) constants for one Λ.

    ``nu_by_degree[ℓ][s]`` counts the degree-ℓ users in stopping-set profile
    s; when omitted, the distribution must have a single degree and ``nu``
    is attributed to it.
    """

    alpha: tuple  # (alpha0, alpha1, alpha2, alpha3)
    nu: tuple
    beta0: tuple
    beta1: tuple
    nu_by_degree: dict | None = None

    def __post_init__(self):
        alpha = tuple(float(a) for a in self.alpha)
        nu = tuple(int(v) for v in self.nu)
        beta0 = tuple(int(v) for v in self.beta0)
        beta1 = tuple(int(v) for v in self.beta1)
        if len(alpha) != 4:
            raise ValueError("alpha must hold four constants")
        if not nu or len(beta0) != len(nu) or len(beta1) != len(nu):
            raise ValueError("nu, beta0 and beta1 must have the same length A >= 1")
        if any(v < 1 for v in nu):
            raise ValueError("stopping-set sizes nu must be >= 1")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "beta0", beta0)
        object.__setattr__(self, "beta1", beta1)
        if self.nu_by_degree is not None:
            nbd = {int(k): tuple(int(x) for x in v) for k, v in self.nu_by_degree.items()}
            for v in nbd.values():
                if len(v) != len(nu):
                    raise ValueError("each nu_by_degree entry must have length A")
            totals = tuple(sum(v[s] for v in nbd.values()) for s in range(len(nu)))
            if totals != nu:
                raise ValueError("nu must equal the sum of nu_by_degree over degrees")
            object.__setattr__(self, "nu_by_degree", nbd)

    @property
    def num_profiles(self) -> int:
        return len(self.nu)

    def profiles(self, degrees: DegreeDistribution) -> dict:
        if self.nu_by_degree is not None:
            return self.nu_by_degree
        if len(degrees.probs) != 1:
            raise ValueError("nu_by_degree is required for irregular degree distributions")
        return {degrees.max_degree: self.nu}

    @classmethod
    def from_dict(cls, data: dict) -> "IrsaConstants":
        return cls(alpha=tuple(data["alpha"]), nu=tuple(data["nu"]),
                   beta0=tuple(data["beta0"]), beta1=tuple(data["beta1"]),
                   nu_by_degree=data.get("nu_by_degree"))

    def to_dict(self) -> dict:
        out = {"alpha": list(self.alpha), "nu": list(self.nu),
               "beta0": list(self.beta0), "beta1": list(self.beta1)}
        if self.nu_by_degree is not None:
            out["nu_by_degree"] = {str(k): list(v) for k, v in self.nu_by_degree.items()}
        return out


# Λ(x) = x³ (Munari et al. values as used for the GMM experiments).
IRSA_X3 = IrsaConstants(alpha=(0.497867, 0.784399, 0.818469, 0.964528),
                        nu=(2, 3), beta0=(1, 24), beta1=(3, 4))


@dataclass(frozen=True)
class FrameResult:
    attempted: frozenset
    decoded: frozenset
    slots_used: int
    iterations: int
    placements: dict = field(default_factory=dict, compare=False)  # user -> slots


def downlink_outage(rate_bits_per_symbol: float, snr_linear: float) -> float:
    """Rayleigh block-fading outage 1 - exp(-(2^R - 1) / γ)."""
    if not snr_linear > 0:
        raise ValueError("SNR must be > 0")
    if rate_bits_per_symbol < 0:
        raise ValueError("rate must be >= 0")
    return -math.expm1(-(2.0 ** rate_bits_per_symbol - 1.0) / snr_linear)


def draw_slots(rng, degrees, slots: int) -> np.ndarray:
    """Distinct uniform slot indices for each row; unused entries are -1.

    Returns an ``(n, max_degree)`` array. The j-th pick selects uniformly among
    the ``slots - j`` slots not yet chosen.
    """
    degrees = np.asarray(degrees, dtype=np.int64)
    n = degrees.shape[0]
    dmax = int(degrees.max()) if n else 0
    if dmax > slots:
        raise ValueError(f"degree {dmax} exceeds the number of slots {slots}")
    picks = np.empty((n, dmax), dtype=np.int64)
    for j in range(dmax):
        r = rng.integers(0, slots - j, size=n)
        if j:
            for c in np.sort(picks[:, :j], axis=1).T:
                r += r >= c
        picks[:, j] = r
    picks[np.arange(dmax)[None, :] >= degrees[:, None]] = -1
    return picks


def sic_decode(placements, slots: int):
    """Iterative SIC peeling over a replica placement.

    Args:
        placements: mapping (or sequence) of user id -> iterable of slot indices.
        slots: number of slots in the frame.

    Returns:
        (decoded user ids as a frozenset, number of SIC rounds). A round decodes
        every user that currently occupies a singleton slot and cancels all of
        its replicas.
    """
    if not isinstance(placements, dict):
        placements = dict(enumerate(placements))
    occupants = [set() for _ in range(slots)]
    for u, ss in placements.items():
        for s in ss:
            if not 0 <= s < slots:
                raise ValueError(f"slot index {s} out of range")
            occupants[s].add(u)
    decoded = set()
    rounds = 0
    while True:
        ready = {next(iter(occ)) for occ in occupants if len(occ) == 1}
        if not ready:
            break
        rounds += 1
        for u in ready:
            decoded.add(u)
            for s in placements[u]:
                occupants[s].discard(u)
    return frozenset(decoded), rounds


def simulate_frame(num_transmitters: int, slots: int, degrees: DegreeDistribution,
                   rng) -> FrameResult:
    """One IRSA frame: random replica placement followed by SIC peeling."""
    if slots < 1:
        raise ValueError("slots must be >= 1")
    if degrees.max_degree > slots:
        raise ValueError("maximum degree exceeds the number of slots")
    deg = degrees.sample(rng, num_transmitters)
    picks = draw_slots(rng, deg, slots)
    placements = {u: [int(s) for s in row if s >= 0] for u, row in enumerate(picks)}
    decoded, rounds = sic_decode(placements, slots)
    return FrameResult(frozenset(range(num_transmitters)), decoded, slots, rounds, placements)


@numba.njit(cache=True)
def _peel_batch(active, picks, slots):  # pragma: no cover - compiled
    n_frames, n_users, dmax = picks.shape
    decoded = np.zeros((n_frames, n_users), dtype=np.bool_)
    count = np.empty(slots, dtype=np.int64)
    idsum = np.empty(slots, dtype=np.int64)
    stack = np.empty(n_users * dmax + slots + 1, dtype=np.int64)
    for b in range(n_frames):
        count[:] = 0
        idsum[:] = 0
        for m in range(n_users):
            if active[b, m]:
                for k in range(dmax):
                    s = picks[b, m, k]
                    if s < 0:
                        break
                    count[s] += 1
                    idsum[s] += m
        top = 0
        for s in range(slots):
            if count[s] == 1:
                stack[top] = s
                top += 1
        while top > 0:
            top -= 1
            s = stack[top]
            if count[s] != 1:
                continue
            u = idsum[s]
            decoded[b, u] = True
            for k in range(dmax):
                t = picks[b, u, k]
                if t < 0:
                    break
                count[t] -= 1
                idsum[t] -= u
                if count[t] == 1:
                    stack[top] = t
                    top += 1
    return decoded


def peel_batch(active, picks, slots: int) -> np.ndarray:
    """SIC-decode a batch of frames.

    Args:
        active: ``(frames, users)`` bool mask of transmitting users.
        picks: ``(frames, users, max_degree)`` slot indices, -1 padded.
        slots: frame length.

    Returns:
        ``(frames, users)`` bool mask of decoded users.
    """
    active = np.ascontiguousarray(active, dtype=np.bool_)
    picks = np.ascontiguousarray(picks, dtype=np.int64)
    if picks.ndim != 3 or picks.shape[:2] != active.shape:
        raise ValueError("picks must be (frames, users, max_degree) matching active")
    if picks.shape[2] == 0:
        return np.zeros(active.shape, dtype=bool)
    return _peel_batch(active, picks, int(slots))


def simulate_error_rate(arrival_rate: float, slots: int, degrees: DegreeDistribution,
                        frames: int, rng, chunk: int = 20000):
    """Monte Carlo uplink error probability under Poisson arrivals.

    Returns:
        (failed / transmitted over all frames, total number of transmissions).
    """
    failed = 0
    total = 0
    done = 0
    while done < frames:
        b = min(chunk, frames - done)
        n = rng.poisson(arrival_rate, size=b)
        width = max(int(n.max()), 1)
        active = np.arange(width)[None, :] < n[:, None]
        deg = degrees.sample(rng, b * width)
        picks = draw_slots(rng, deg, slots).reshape(b, width, -1)
        dec = peel_batch(active, picks, slots)
        failed += int(np.count_nonzero(active & ~dec))
        total += int(n.sum())
        done += b
    return (failed / total if total else 0.0), total


def aloha_error_prob(arrival_rate, slots: int):
    """Slotted-ALOHA collision probability 1 - exp(-λ/L) for a tagged packet."""
    lam = np.asarray(arrival_rate, dtype=float)
    if np.any(lam < 0):
        raise ValueError("arrival rate must be >= 0")
    if slots < 1:
        raise ValueError("slots must be >= 1")
    out = -np.expm1(-lam / slots)
    return float(out) if out.ndim == 0 else out


def _log_comb(n, k):
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def irsa_error_floor(arrival_rate, slots: int, degrees: DegreeDistribution,
                     constants: IrsaConstants):
    """Unclamped error-floor term (a polynomial in λ; may be negative)."""
    lam = np.asarray(arrival_rate, dtype=float)
    profiles = constants.profiles(degrees)
    total = np.zeros_like(lam)
    for s in range(constants.num_profiles):
        nu = constants.nu[s]
        b1 = constants.beta1[s]
        if b1 > slots:
            raise ValueError(f"beta1[{s}] = {b1} exceeds the number of slots {slots}")
        phi = np.zeros_like(lam)
        for k in range(nu):
            sign = -1.0 if (nu - 1 + k) % 2 else 1.0
            phi = phi + sign * lam ** k * (math.factorial(nu - 1) / math.factorial(k))
        log_c = math.log(nu * constants.beta0[s]) + _log_comb(slots, b1)
        for deg, counts in profiles.items():
            c = counts[s]
            if c == 0:
                continue
            p = degrees.probs.get(deg, 0.0)
            if p == 0.0 or deg > slots:
                log_c = -math.inf
                break
            log_c += c * math.log(p) - math.lgamma(c + 1) - c * _log_comb(slots, deg)
        total = total + phi * math.exp(log_c)
    return total


def irsa_waterfall(arrival_rate, slots: int, constants: IrsaConstants):
    a0, a1, a2, a3 = constants.alpha
    g = np.asarray(arrival_rate, dtype=float) / slots
    arg = math.sqrt(slots) * (a2 - a3 * slots ** (-2.0 / 3.0) - g) / np.sqrt(a0 * a0 + g)
    return a1 * np.asarray(gaussian_q(arg))


def irsa_error_prob_approx(arrival_rate, slots: int, degrees: DegreeDistribution,
                           constants: IrsaConstants):
    """Error-floor plus waterfall approximation of the IRSA packet error, in [0, 1]."""
    lam = np.asarray(arrival_rate, dtype=float)
    if np.any(lam < 0):
        raise ValueError("arrival rate must be >= 0")
    p = irsa_error_floor(lam, slots, degrees, constants) + irsa_waterfall(lam, slots, constants)
    out = np.clip(p, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ChannelParams:
    """Downlink outage plus the uplink frame configuration."""

    p_err_dl: float
    slots: int
    degrees: DegreeDistribution = field(default_factory=DegreeDistribution.aloha)
    constants: IrsaConstants | None = None

    def __post_init__(self):
        if not 0.0 <= self.p_err_dl <= 1.0:
            raise ValueError("p_err_dl must lie in [0, 1]")
        if int(self.slots) < 1:
            raise ValueError("slots must be >= 1")
        if self.degrees.max_degree > self.slots:
            raise ValueError("maximum degree exceeds the number of slots")
        if not self.degrees.is_aloha:
            if self.constants is None:
                if self.degrees.probs == {3: 1.0}:
                    object.__setattr__(self, "constants", IRSA_X3)
                else:
                    raise ValueError("IRSA constants are required for this degree distribution")
            if max(self.constants.beta1) > self.slots:
                raise ValueError("IRSA constants mismatch: beta1 exceeds the number of slots")

    @property
    def is_aloha(self) -> bool:
        return self.degrees.is_aloha

    def uplink_error(self, arrival_rate):
        """Analytic uplink error at total rate λ.

        IRSA uses the approximation for λ < L and 1 beyond, where the
        approximation no longer holds and the frame is treated as saturated.
        """
        lam = np.asarray(arrival_rate, dtype=float)
        if self.is_aloha:
            return aloha_error_prob(lam, self.slots)
        p = np.asarray(irsa_error_prob_approx(lam, self.slots, self.degrees, self.constants))
        out = np.where(lam < self.slots, p, 1.0)
        return float(out) if out.ndim == 0 else out
