"""Continuous-time world-line Monte Carlo for the transverse-field Ising model.

A world-line stores, per spin, the sorted imaginary times in ``[0, beta)`` at
which that spin flips, and the configuration at ``tau = 0``. Spin values are
``s = +1`` (up) or ``-1`` (down); configuration index bit ``i`` set means spin
``i`` is down.

Weight convention: a world-line with ``n`` flips at times ``tau_1..tau_n`` has
weight ``Delta^n exp(-int_0^beta E(tau) dtau) dtau_1 ... dtau_n`` (each flip
carries ``Delta`` times the Lebesgue measure ``dtau``). Acceptance ratios use
this density together with the exact proposal densities.

Moves, each on a uniformly chosen spin:

* insert: ``t1`` uniform in ``[0, beta)``; ``t2 = t1 + U * ell`` where ``ell``
  is the forward distance to the spin's next flip (``beta`` if it has none).
  The segment ``[t1, t2)`` (periodic) is flipped.
* delete: pick one of the ``n`` cyclically adjacent flip pairs
  ``(f_k, f_{k+1})`` and remove the segment between them.
* shift: move one flip uniformly within the interval bounded by its two
  neighbors.
* line flip (off by default): flip the spin over the whole circle.

Random numbers come from a ``numpy`` Philox generator seeded by
``(seed, chain)``, so a chain is reproducible regardless of thread scheduling.
Numbers are handed to the compiled kernel in blocks and drawn only when a
move needs them.
"""

from dataclasses import dataclass, field
import csv
import io
import math

import numpy as np
from numba import jit

from .errors import ContractViolation, InsufficientSamplingError
from .model import as_config, config_to_index, index_to_config

__all__ = [
    "Worldline",
    "QmcParams",
    "EscapeResult",
    "init_worldline",
    "worldline_log_weight",
    "diagonal_action",
    "make_rng",
    "sweep",
    "run_sweeps",
    "support_fraction",
    "round_trip_count",
    "escape_time",
    "measure_equilibrium",
    "measure_zb_ratio",
    "trotter_couplings",
    "escape_trace_csv",
    "escape_result_csv",
]

_INSERT, _DELETE, _SHIFT, _LINE = 0, 1, 2, 3
_MAX_DRAWS = 5  # per attempt
_RAND_BLOCK = 1 << 16

# kernel status codes
_DONE, _NEED_RAND, _NEED_ROOM = 0, 1, 2
# kernel modes
_MODE_PLAIN, _MODE_MEASURE, _MODE_ESCAPE = 0, 1, 2
# per-sweep observables in measure mode (followed by sz[N], nflips[N])
_OBS_E, _OBS_POP_U, _OBS_POP_D, _OBS_N, _OBS_R0, _OBS_R1, _OBS_FIXED = 0, 1, 2, 3, 4, 5, 6


@jit(nopython=True, cache=True, inline="always")
def _draw(rand, rpos):
    r = rpos[0]
    rpos[0] = r + 1
    return rand[r]


# --- kernels -----------------------------------------------------------------

@jit(nopython=True, cache=True, inline="always")
def _upper_bound(flips, i, n, t):
    """First index k < n with flips[i, k] > t (n if none)."""
    lo = 0
    hi = n
    while lo < hi:
        mid = (lo + hi) >> 1
        if flips[i, mid] <= t:
            lo = mid + 1
        else:
            hi = mid
    return lo


@jit(nopython=True, cache=True, inline="always")
def _spin_integral(flips, nflips, base, j, a, b):
    """Integral of s_j over [a, b) with 0 <= a <= b <= beta.

    Branch-free form: with ``c_k = clamp(f_k, a, b)`` the integral is
    ``base * ((-1)^n b - a + 2 sum_k (-1)^k c_k)``.
    """
    n = nflips[j]
    acc = 0.0
    sign = 1.0
    for k in range(n):
        acc += sign * min(max(flips[j, k], a), b)
        sign = -sign
    return base[j] * (sign * b - a + 2.0 * acc)


@jit(nopython=True, cache=True, inline="always")
def _field_integral_plain(flips, nflips, base, indptr, indices, weights, fields, i, a, b):
    tot = fields[i] * (b - a)
    for p in range(indptr[i], indptr[i + 1]):
        tot += weights[p] * _spin_integral(flips, nflips, base, indices[p], a, b)
    return tot


@jit(nopython=True, cache=True, inline="always")
def _field_integral(flips, nflips, base, indptr, indices, weights, fields, i, a, b, beta):
    """Integral of h_i + sum_j J_ij s_j over [a, b), periodic, a in [-beta, beta)."""
    if a < 0.0:
        a += beta
        b += beta
    if b <= beta:
        return _field_integral_plain(flips, nflips, base, indptr, indices, weights, fields, i, a, b)
    return (_field_integral_plain(flips, nflips, base, indptr, indices, weights, fields, i, a, beta)
            + _field_integral_plain(flips, nflips, base, indptr, indices, weights, fields, i, 0.0,
                                    b - beta))


@jit(nopython=True, cache=True, inline="always")
def _insert_log_ratio(flips, nflips, base, indptr, indices, weights, fields, beta, delta,
                      p_ins, p_del, i, u1, u2, log_delta):
    """Log acceptance ratio and times ``(t1, t2)`` of an insert proposal."""
    n = nflips[i]
    t1 = u1 * beta
    if n == 0:
        ell = beta
        s = base[i]
    else:
        k = _upper_bound(flips, i, n, t1)
        nxt = flips[i, k] if k < n else flips[i, 0] + beta
        ell = nxt - t1
        s = base[i] if k % 2 == 0 else -base[i]
    t2 = t1 + u2 * ell
    if delta <= 0.0 or t2 <= t1:
        return -np.inf, t1, t2
    d_action = -2.0 * s * _field_integral(flips, nflips, base, indptr, indices, weights, fields,
                                          i, t1, t2, beta)
    log_r = (2.0 * log_delta - d_action
             + math.log(beta * ell * p_del / (p_ins * (n + 2))))
    return log_r, t1, t2


@jit(nopython=True, cache=True, inline="always")
def _apply_insert(flips, nflips, base, i, t1, t2, beta):
    n = nflips[i]
    if t2 < beta:
        k = _upper_bound(flips, i, n, t1)
        for m in range(n - 1, k - 1, -1):
            flips[i, m + 2] = flips[i, m]
        flips[i, k] = t1
        flips[i, k + 1] = t2
    else:
        for m in range(n - 1, -1, -1):
            flips[i, m + 1] = flips[i, m]
        flips[i, 0] = t2 - beta
        flips[i, n + 1] = t1
        base[i] = -base[i]
    nflips[i] = n + 2


@jit(nopython=True, cache=True, inline="always")
def _delete_log_ratio(flips, nflips, base, indptr, indices, weights, fields, beta, delta,
                      p_ins, p_del, i, k, log_delta):
    """Log acceptance ratio for removing the segment between flips ``k`` and ``k+1``."""
    n = nflips[i]
    if n < 2 or delta <= 0.0:
        return -np.inf
    a = flips[i, k]
    kn = k + 1
    b = flips[i, kn % n] + beta * (kn // n)
    k2 = k + 2
    ell = flips[i, k2 % n] + beta * (k2 // n) - a
    s = base[i] if (k + 1) % 2 == 0 else -base[i]
    d_action = -2.0 * s * _field_integral(flips, nflips, base, indptr, indices, weights, fields,
                                          i, a, b, beta)
    return -2.0 * log_delta - d_action + math.log(p_ins * n / (p_del * beta * ell))


@jit(nopython=True, cache=True, inline="always")
def _apply_delete(flips, nflips, base, i, k):
    n = nflips[i]
    if k == n - 1:
        # pair (f_{n-1}, f_0) wraps through tau = 0
        for m in range(1, n - 1):
            flips[i, m - 1] = flips[i, m]
        base[i] = -base[i]
    else:
        for m in range(k + 2, n):
            flips[i, m - 2] = flips[i, m]
    nflips[i] = n - 2


@jit(nopython=True, cache=True, inline="always")
def _shift_log_ratio(flips, nflips, base, indptr, indices, weights, fields, beta, i, k, u):
    """Log acceptance ratio and new (unwrapped) time for shifting flip ``k``."""
    n = nflips[i]
    prev = flips[i, k - 1] if k > 0 else flips[i, n - 1] - beta
    nxt = flips[i, k + 1] if k < n - 1 else flips[i, 0] + beta
    t = flips[i, k]
    t_new = prev + u * (nxt - prev)
    before = base[i] if k % 2 == 0 else -base[i]
    if t_new > t:
        s = -before
        d_action = -2.0 * s * _field_integral(flips, nflips, base, indptr, indices, weights,
                                              fields, i, t, t_new, beta)
    elif t_new < t:
        s = before
        d_action = -2.0 * s * _field_integral(flips, nflips, base, indptr, indices, weights,
                                              fields, i, t_new, t, beta)
    else:
        d_action = 0.0
    return -d_action, t_new


@jit(nopython=True, cache=True, inline="always")
def _apply_shift(flips, nflips, base, i, k, t_new, beta):
    n = nflips[i]
    if t_new < 0.0:
        for m in range(0, n - 1):
            flips[i, m] = flips[i, m + 1]
        flips[i, n - 1] = min(t_new + beta, np.nextafter(beta, 0.0))
        base[i] = -base[i]
    elif t_new >= beta:
        for m in range(n - 1, 0, -1):
            flips[i, m] = flips[i, m - 1]
        flips[i, 0] = t_new - beta
        base[i] = -base[i]
    else:
        flips[i, k] = t_new


@jit(nopython=True, cache=True, inline="always")
def _line_log_ratio(flips, nflips, base, indptr, indices, weights, fields, beta, i):
    n = nflips[i]
    d_action = 0.0
    s = base[i]
    t = 0.0
    for k in range(n):
        d_action += -2.0 * s * _field_integral(flips, nflips, base, indptr, indices, weights,
                                               fields, i, t, flips[i, k], beta)
        t = flips[i, k]
        s = -s
    d_action += -2.0 * s * _field_integral(flips, nflips, base, indptr, indices, weights,
                                           fields, i, t, beta, beta)
    return -d_action


@jit(nopython=True, cache=True)
def _check_invariants(flips, nflips, base, beta):
    for i in range(nflips.size):
        n = nflips[i]
        if n % 2 != 0:
            raise AssertionError("odd number of flips")
        if abs(base[i]) != 1:
            raise AssertionError("base spin not +-1")
        for k in range(n):
            if not (0.0 <= flips[i, k] < beta):
                raise AssertionError("flip time outside [0, beta)")
            if k > 0 and not (flips[i, k - 1] < flips[i, k]):
                raise AssertionError("flip times not strictly increasing")


@jit(nopython=True, cache=True)
def _walk(flips, nflips, base, indptr, indices, weights, fields, beta, mask_u, mask_d, out):
    """Single pass over all flips in time order.

    Fills ``out`` with ``[int E dtau, time at u, time at d, round trips]``.
    ``mask_*`` are spin arrays (+-1) of the two reference configurations.
    """
    nspin = nflips.size
    total = 0
    for j in range(nspin):
        total += nflips[j]
    times = np.empty(total)
    who = np.empty(total, dtype=np.int64)
    m = 0
    for j in range(nspin):
        for k in range(nflips[j]):
            times[m] = flips[j, k]
            who[m] = j
            m += 1
    order = np.argsort(times)
    cur = base.astype(np.float64)
    energy = 0.0
    for j in range(nspin):
        energy += fields[j] * cur[j]
        for p in range(indptr[j], indptr[j + 1]):
            if indices[p] > j:
                energy += weights[p] * cur[j] * cur[indices[p]]
    miss_u = 0
    miss_d = 0
    for j in range(nspin):
        if cur[j] != mask_u[j]:
            miss_u += 1
        if cur[j] != mask_d[j]:
            miss_d += 1
    action = 0.0
    t_u = 0.0
    t_d = 0.0
    last = -1  # last visited well: 0 = u, 1 = d
    first = -1
    changes = 0
    if miss_u == 0:
        last = 0
        first = 0
    elif miss_d == 0:
        last = 1
        first = 1
    t_prev = 0.0
    for q in range(total):
        e = order[q]
        t = times[e]
        dt = t - t_prev
        action += energy * dt
        if miss_u == 0:
            t_u += dt
        if miss_d == 0:
            t_d += dt
        j = who[e]
        loc = fields[j]
        for p in range(indptr[j], indptr[j + 1]):
            loc += weights[p] * cur[indices[p]]
        energy -= 2.0 * cur[j] * loc
        cur[j] = -cur[j]
        if cur[j] == mask_u[j]:
            miss_u -= 1
        else:
            miss_u += 1
        if cur[j] == mask_d[j]:
            miss_d -= 1
        else:
            miss_d += 1
        label = 0 if miss_u == 0 else (1 if miss_d == 0 else -1)
        if label >= 0:
            if first < 0:
                first = label
            elif label != last:
                changes += 1
            last = label
        t_prev = t
    dt = beta - t_prev
    action += energy * dt
    if miss_u == 0:
        t_u += dt
    if miss_d == 0:
        t_d += dt
    # close the circle
    if first >= 0 and last != first:
        changes += 1
    out[0] = action
    out[1] = t_u
    out[2] = t_d
    out[3] = changes // 2


@jit(nopython=True, cache=True, nogil=True)
def _drive(flips, nflips, base, indptr, indices, weights, fields, beta, delta, mix, bias,
           rand, rpos, counters, mode, mask_u, mask_d, threshold, obs, bin_size, every, check, stats):
    """Run attempts until ``counters[2]`` sweeps are complete.

    ``counters = [sweeps done, attempt within sweep, sweeps wanted, passed]``.
    Returns a status code; on ``_NEED_RAND`` / ``_NEED_ROOM`` the caller refills
    or grows and calls again, and the run resumes exactly where it stopped
    (both checks precede the attempt's first draw).
    """
    nspin = nflips.size
    cap = flips.shape[1]
    p_ins = mix[0]
    p_del = mix[1]
    c1 = mix[0]
    c2 = mix[0] + mix[1]
    c3 = mix[0] + mix[1] + mix[2] if mix[3] > 0.0 else 2.0
    walk = np.zeros(4)
    log_delta = math.log(delta) if delta > 0.0 else -np.inf
    log_bias = math.log(bias)
    maxn = 0
    for j in range(nspin):
        maxn = max(maxn, nflips[j])
    while counters[0] < counters[2]:
        while counters[1] < nspin:
            if maxn + 2 > cap:
                return _NEED_ROOM
            if rpos[0] + _MAX_DRAWS > rand.size:
                return _NEED_RAND
            i = int(_draw(rand, rpos) * nspin)
            if i >= nspin:
                i = nspin - 1
            x = _draw(rand, rpos)
            n = nflips[i]
            if x < c1:
                move = _INSERT
                log_r, t1, t2 = _insert_log_ratio(flips, nflips, base, indptr, indices, weights,
                                                  fields, beta, delta, p_ins, p_del, i,
                                                  _draw(rand, rpos), _draw(rand, rpos), log_delta)
                log_r += log_bias
                if log_r >= 0.0 or _draw(rand, rpos) < math.exp(log_r):
                    _apply_insert(flips, nflips, base, i, t1, t2, beta)
                    maxn = max(maxn, n + 2)
                    stats[2 * move + 1] += 1
            elif x < c2:
                move = _DELETE
                if n > 0:
                    k = int(_draw(rand, rpos) * n)
                    if k >= n:
                        k = n - 1
                    log_r = _delete_log_ratio(flips, nflips, base, indptr, indices, weights,
                                              fields, beta, delta, p_ins, p_del, i, k,
                                              log_delta)
                    log_r -= log_bias
                    if log_r >= 0.0 or _draw(rand, rpos) < math.exp(log_r):
                        _apply_delete(flips, nflips, base, i, k)
                        stats[2 * move + 1] += 1
            elif x < c3:
                move = _SHIFT
                if n > 0:
                    k = int(_draw(rand, rpos) * n)
                    if k >= n:
                        k = n - 1
                    log_r, t_new = _shift_log_ratio(flips, nflips, base, indptr, indices,
                                                    weights, fields, beta, i, k, _draw(rand, rpos))
                    if log_r >= 0.0 or _draw(rand, rpos) < math.exp(log_r):
                        _apply_shift(flips, nflips, base, i, k, t_new, beta)
                        stats[2 * move + 1] += 1
            else:
                move = _LINE
                log_r = _line_log_ratio(flips, nflips, base, indptr, indices, weights, fields,
                                        beta, i)
                if log_r >= 0.0 or _draw(rand, rpos) < math.exp(log_r):
                    base[i] = -base[i]
                    stats[2 * move + 1] += 1
            stats[2 * move] += 1
            if check:
                _check_invariants(flips, nflips, base, beta)
            counters[1] += 1
        counters[1] = 0
        s = counters[0]
        counters[0] += 1
        if (s + 1) % every != 0:
            continue
        if mode == _MODE_MEASURE:
            _walk(flips, nflips, base, indptr, indices, weights, fields, beta, mask_u, mask_d,
                  walk)
            b = s // bin_size
            if b < obs.shape[0]:
                ntot = 0
                for j in range(nspin):
                    ntot += nflips[j]
                w = every / bin_size
                obs[b, _OBS_E] += w * (walk[0] - ntot) / beta
                obs[b, _OBS_POP_U] += w * walk[1] / beta
                obs[b, _OBS_POP_D] += w * walk[2] / beta
                obs[b, _OBS_N] += w * ntot
                if walk[3] == 0:
                    obs[b, _OBS_R0] += w
                elif walk[3] == 1:
                    obs[b, _OBS_R1] += w
                for j in range(nspin):
                    obs[b, _OBS_FIXED + j] += w * _spin_integral(flips, nflips, base, j, 0.0,
                                                                 beta) / beta
                    obs[b, _OBS_FIXED + nspin + j] += w * nflips[j]
        elif mode == _MODE_ESCAPE:
            # support(d) <= min_j (time spin j spends at d_j); skip the full walk when the
            # bound already rules out passage and no trace is being recorded
            bound = 1.0
            for j in range(nspin):
                f = 0.5 * (1.0 + mask_d[j] * _spin_integral(flips, nflips, base, j, 0.0, beta) / beta)
                if f < bound:
                    bound = f
            if s >= obs.shape[0] and (bound <= 0.0 or bound < threshold):
                continue
            _walk(flips, nflips, base, indptr, indices, weights, fields, beta, mask_u, mask_d,
                  walk)
            frac = walk[2] / beta
            if s < obs.shape[0]:
                obs[s, 0] = frac
            if frac > 0.0 and frac >= threshold:
                counters[3] = 1
                return _DONE
    return _DONE


# --- Python API ----------------------------------------------------------------

@dataclass
class Worldline:
    """Periodic imaginary-time trajectory.

    ``flips[i, :nflips[i]]`` are the sorted flip times of spin ``i`` and
    ``base[i]`` its value (+1 up, -1 down) at ``tau = 0``.
    """

    beta: float
    flips: np.ndarray
    nflips: np.ndarray
    base: np.ndarray

    @property
    def n_spins(self):
        return self.nflips.size

    @property
    def total_flips(self):
        return int(self.nflips.sum())

    def flip_times(self, i):
        return self.flips[i, : self.nflips[i]].copy()

    def base_config(self):
        return self.base.astype(np.int8)

    def config_at(self, tau):
        """Configuration (+-1 array) at imaginary time ``tau``."""
        tau = float(tau) % self.beta
        out = np.empty(self.n_spins, dtype=np.int8)
        for i in range(self.n_spins):
            k = np.searchsorted(self.flips[i, : self.nflips[i]], tau, side="right")
            s = self.base[i] if k % 2 == 0 else -self.base[i]
            out[i] = s
        return out

    def copy(self):
        return Worldline(self.beta, self.flips.copy(), self.nflips.copy(), self.base.copy())

    def grow(self):
        cap = self.flips.shape[1]
        new = np.zeros((self.n_spins, 2 * cap))
        new[:, :cap] = self.flips
        self.flips = new

    def validate(self):
        try:
            _check_invariants(self.flips, self.nflips, self.base, self.beta)
        except AssertionError as exc:
            raise ContractViolation(f"invalid worldline: {exc}") from None

    @classmethod
    def from_flip_lists(cls, beta, base_config, flip_lists):
        """Build from a base configuration (+-1 entries) and per-spin time lists."""
        cfg = as_config(base_config)
        n = cfg.size
        if len(flip_lists) != n:
            raise ContractViolation("need one flip list per spin")
        cap = max(8, max((len(f) for f in flip_lists), default=0) + 2)
        flips = np.zeros((n, cap))
        nflips = np.zeros(n, dtype=np.int64)
        for i, f in enumerate(flip_lists):
            f = np.sort(np.asarray(f, dtype=float))
            flips[i, : f.size] = f
            nflips[i] = f.size
        wl = cls(float(beta), flips, nflips, cfg.astype(np.int64))
        wl.validate()
        return wl


@dataclass(frozen=True)
class QmcParams:
    """Sampler settings.

    ``move_mix`` gives the probabilities of insert, delete and shift; any
    remainder up to 1 goes to whole-line flips (``line_flip``), which are
    needed for ergodicity only when ``Delta = 0``. ``acceptance_bias``
    multiplies the insert ratio (and divides the delete ratio); it exists as a
    negative-control hook and must stay 1 for correct sampling.
    """

    beta: float
    sweeps: int = 100_000
    seed: int = 0
    move_mix: tuple = (0.4, 0.4, 0.2)
    line_flip: float = 0.0
    measure_every: int = 1
    thermalize: int = 1000
    check: bool = False
    acceptance_bias: float = 1.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ContractViolation("beta must be positive")
        if self.sweeps < 1 or self.measure_every < 1:
            raise ContractViolation("sweeps and measure_every must be >= 1")
        mix = tuple(float(x) for x in self.move_mix)
        if len(mix) != 3 or min(mix) < 0 or self.line_flip < 0:
            raise ContractViolation("move_mix needs three nonnegative probabilities")
        if not math.isclose(sum(mix) + self.line_flip, 1.0, abs_tol=1e-12):
            raise ContractViolation("move probabilities must sum to 1")
        if mix[0] > 0 and mix[1] == 0 or mix[1] > 0 and mix[0] == 0:
            raise ContractViolation("insert and delete must both be enabled or both disabled")
        if self.acceptance_bias <= 0:
            raise ContractViolation("acceptance_bias must be positive")
        object.__setattr__(self, "move_mix", mix)

    def mix_array(self):
        m = self.move_mix
        return np.array([m[0], m[1], m[2], self.line_flip])


@dataclass
class EscapeResult:
    """Outcome of one escape run; ``sweeps_to_passage`` is ``None`` on timeout."""

    sweeps_to_passage: int
    timed_out: bool
    seed: int
    chain: int
    support_trace: list = field(default_factory=list)


def make_rng(seed, chain=0):
    """Counter-based generator for chain ``chain`` of experiment ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(chain),))
    return np.random.Generator(np.random.Philox(ss))


def init_worldline(config, beta, capacity=16):
    """Flipless world-line sitting in ``config`` (+-1 array)."""
    cfg = as_config(config)
    if not beta > 0:
        raise ContractViolation("beta must be positive")
    n = cfg.size
    return Worldline(float(beta), np.zeros((n, capacity)), np.zeros(n, dtype=np.int64),
                     cfg.astype(np.int64))


def _arrays(problem):
    indptr, indices, weights = problem.adjacency()
    fields = problem.field_array() * problem.classical_scale
    return (np.ascontiguousarray(indptr, dtype=np.int64),
            np.ascontiguousarray(indices, dtype=np.int64),
            np.ascontiguousarray(weights, dtype=np.float64),
            np.ascontiguousarray(fields, dtype=np.float64))


def _spins(config, n):
    cfg = index_to_config(config, n) if isinstance(config, (int, np.integer)) else as_config(config)
    if cfg.size != n:
        raise ContractViolation("configuration length does not match the world-line")
    return cfg.astype(np.float64)


def diagonal_action(problem, worldline):
    """``int_0^beta E(tau) dtau`` evaluated exactly segment by segment."""
    indptr, indices, weights, fields = _arrays(problem)
    out = np.zeros(4)
    dummy = np.zeros(worldline.n_spins)
    _walk(worldline.flips, worldline.nflips, worldline.base, indptr, indices, weights, fields,
          worldline.beta, dummy, dummy, out)
    return float(out[0])


def worldline_log_weight(problem, worldline):
    """``n log(Delta) - int E dtau`` (flip density convention: ``Delta dtau`` per flip)."""
    n = worldline.total_flips
    delta = problem.transverse_field
    if n and delta <= 0:
        return -math.inf
    log_d = n * math.log(delta) if n else 0.0
    return log_d - diagonal_action(problem, worldline)


class _Run:
    """Kernel driver owning the random-number block for one chain."""

    def __init__(self, problem, worldline, params, rng):
        if worldline.n_spins != problem.n_spins:
            raise ContractViolation("world-line and problem sizes differ")
        if not math.isclose(worldline.beta, params.beta):
            raise ContractViolation("world-line beta differs from params.beta")
        self.problem = problem
        self.wl = worldline
        self.params = params
        self.rng = rng
        self.arrays = _arrays(problem)
        self.mix = params.mix_array()
        self.rand = rng.random(_RAND_BLOCK)
        self.rpos = np.zeros(1, dtype=np.int64)
        self.stats = np.zeros(8, dtype=np.int64)

    def run(self, n_sweeps, mode=_MODE_PLAIN, mask_u=None, mask_d=None, threshold=0.0,
            obs=None, bin_size=1):
        n = self.problem.n_spins
        mask_u = np.zeros(n) if mask_u is None else mask_u
        mask_d = np.zeros(n) if mask_d is None else mask_d
        obs = np.zeros((0, 1)) if obs is None else obs
        counters = np.array([0, 0, n_sweeps, 0], dtype=np.int64)
        wl = self.wl
        while True:
            status = _drive(wl.flips, wl.nflips, wl.base, *self.arrays, wl.beta,
                            self.problem.transverse_field, self.mix,
                            self.params.acceptance_bias, self.rand, self.rpos, counters, mode,
                            mask_u, mask_d, threshold, obs, bin_size, self.params.measure_every,
                            self.params.check, self.stats)
            if status == _DONE:
                return int(counters[0]), bool(counters[3])
            if status == _NEED_RAND:
                self.rand = self.rng.random(_RAND_BLOCK)
                self.rpos[0] = 0
            else:
                wl.grow()

    def acceptance(self):
        names = ("insert", "delete", "shift", "line")
        return {nm: (int(self.stats[2 * k]), int(self.stats[2 * k + 1]))
                for k, nm in enumerate(names)}


def sweep(problem, worldline, params, rng):
    """One sweep (``N`` update attempts) in place; returns ``{move: (tried, accepted)}``."""
    return run_sweeps(problem, worldline, params, rng, 1)


def run_sweeps(problem, worldline, params, rng, n_sweeps):
    """``n_sweeps`` sweeps in place; returns ``{move: (tried, accepted)}``."""
    runner = _Run(problem, worldline, params, rng)
    runner.run(int(n_sweeps))
    return runner.acceptance()


def support_fraction(worldline, config):
    """Fraction of imaginary time the instantaneous configuration equals ``config``."""
    n = worldline.n_spins
    target = _spins(config, n)
    out = np.zeros(4)
    z = np.zeros(n, dtype=np.int64)
    _walk(worldline.flips, worldline.nflips, worldline.base, np.zeros(n + 1, dtype=np.int64), z,
          np.zeros(0), np.zeros(n), worldline.beta, target, target, out)
    return float(out[1] / worldline.beta)


def round_trip_count(worldline, u, d):
    """Number of ``u <-> d`` round trips around the imaginary-time circle."""
    n = worldline.n_spins
    su, sd = _spins(u, n), _spins(d, n)
    out = np.zeros(4)
    z = np.zeros(n, dtype=np.int64)
    _walk(worldline.flips, worldline.nflips, worldline.base, np.zeros(n + 1, dtype=np.int64), z,
          np.zeros(0), np.zeros(n), worldline.beta, su, sd, out)
    return int(out[3])


def escape_time(problem, params, u, d, threshold=0.05, cap=100_000_000, chain=0,
                trace_every=0):
    """Sweeps until the world-line started at ``u`` has support ``>= threshold`` on ``d``.

    Support is measured once per sweep; passage requires strictly positive
    support, so ``threshold=0`` means the first sweep that visits ``d``.
    """
    n = problem.n_spins
    rng = make_rng(params.seed, chain)
    wl = init_worldline(index_to_config(u, n) if isinstance(u, (int, np.integer)) else u,
                        params.beta)
    runner = _Run(problem, wl, params, rng)
    mask_u, mask_d = _spins(u, n), _spins(d, n)
    done = 0
    trace = []
    chunk = 1 << 16
    while done < cap:
        todo = min(chunk, cap - done)
        obs = np.zeros((todo if trace_every else 0, 1))
        ran, passed = runner.run(todo, _MODE_ESCAPE, mask_u, mask_d, threshold, obs)
        if trace_every:
            for s in range(ran):
                if (done + s + 1) % trace_every == 0 or (passed and s == ran - 1):
                    trace.append((done + s + 1, float(obs[s, 0])))
        done += ran
        if passed:
            return EscapeResult(done, False, params.seed, chain, trace)
    return EscapeResult(None, True, params.seed, chain, trace)


DEFAULT_BINS = 50


def _bin_layout(n_sweeps, n_bins=None):
    """Few long bins: local updates can decorrelate slowly (e.g. near-degenerate
    global flips), and short bins would then underestimate the error."""
    n_bins = DEFAULT_BINS if n_bins is None else int(n_bins)
    n_bins = max(2, min(n_bins, n_sweeps))
    return n_bins, max(1, n_sweeps // n_bins)


def measure_equilibrium(problem, params, u=None, d=None, chain=0, n_bins=None):
    """Thermal averages with binned standard errors.

    Starts from ``u`` (default all up), discards ``params.thermalize`` sweeps,
    then measures after each of ``params.sweeps`` sweeps. Returns a dict with
    ``(mean, stderr)`` pairs for ``mean_energy``, ``pop_up``, ``pop_down``,
    ``n_flips``, ``p_r0``, ``p_r1`` and arrays for ``sz``, ``sx`` and
    ``sx_err``, ``sz_err``, plus the acceptance table.
    """
    n = problem.n_spins
    u = 0 if u is None else u
    d = (1 << n) - 1 if d is None else d
    rng = make_rng(params.seed, chain)
    wl = init_worldline(index_to_config(u, n) if isinstance(u, (int, np.integer)) else u,
                        params.beta)
    runner = _Run(problem, wl, params, rng)
    if params.thermalize:
        runner.run(params.thermalize)
    n_bins, bin_size = _bin_layout(params.sweeps, n_bins)
    obs = np.zeros((n_bins, _OBS_FIXED + 2 * n))
    runner.run(n_bins * bin_size, _MODE_MEASURE, _spins(u, n), _spins(d, n), 0.0, obs, bin_size)
    mean = obs.mean(axis=0)
    err = obs.std(axis=0, ddof=1) / math.sqrt(n_bins) if n_bins > 1 else np.full(mean.size, np.inf)
    beta, delta = params.beta, problem.transverse_field
    sl_z = slice(_OBS_FIXED, _OBS_FIXED + n)
    sl_x = slice(_OBS_FIXED + n, _OBS_FIXED + 2 * n)
    scale_x = 1.0 / (beta * delta) if delta > 0 else 0.0
    return {
        "mean_energy": (float(mean[_OBS_E]), float(err[_OBS_E])),
        "pop_up": (float(mean[_OBS_POP_U]), float(err[_OBS_POP_U])),
        "pop_down": (float(mean[_OBS_POP_D]), float(err[_OBS_POP_D])),
        "n_flips": (float(mean[_OBS_N]), float(err[_OBS_N])),
        "p_r0": (float(mean[_OBS_R0]), float(err[_OBS_R0])),
        "p_r1": (float(mean[_OBS_R1]), float(err[_OBS_R1])),
        "sz": mean[sl_z].copy(),
        "sz_err": err[sl_z].copy(),
        "sx": mean[sl_x] * scale_x,
        "sx_err": err[sl_x] * scale_x,
        "bins": obs,
        "acceptance": runner.acceptance(),
    }


def measure_zb_ratio(problem, params, u, d, chain=0):
    """Estimate ``Z_B / Z_0`` from the round-trip statistics of the world-line.

    Loops with ``r = 0`` live near either well, so their total weight is
    ``2 Z_0``; loops with ``r = 1`` carry ``Z_B``. Hence
    ``ratio = 2 P(r=1) / P(r=0)``; the error comes from the delta method
    on per-bin estimates.
    """
    if problem.transverse_field == 0:
        return {"p_r0": 1.0, "p_r1": 0.0, "ratio": 0.0, "stderr": 0.0}
    res = measure_equilibrium(problem, params, u, d, chain)
    bins = res["bins"]
    r0 = bins[:, _OBS_R0]
    r1 = bins[:, _OBS_R1]
    p0, p1 = float(r0.mean()), float(r1.mean())
    if p0 <= 0:
        raise InsufficientSamplingError("no r = 0 samples")
    ratio = 2.0 * p1 / p0
    m = r0.size
    # delta method: var(p1/p0) ~ var(p1 - ratio/2 * p0) / p0^2
    resid = r1 - 0.5 * ratio * r0
    stderr = 2.0 * float(resid.std(ddof=1)) / math.sqrt(m) / p0 if m > 1 else math.inf
    return {"p_r0": p0, "p_r1": p1, "ratio": ratio, "stderr": stderr}


def trotter_couplings(delta, beta, M):
    """Discrete-time mapping constants: ``gamma = beta Delta / M``,
    ``J_perp = -(M / 2 beta) ln tanh(gamma)`` and ``C = sqrt(sinh(2 gamma) / 2)``."""
    if not (delta > 0 and beta > 0 and M >= 1):
        raise ContractViolation("need delta > 0, beta > 0, M >= 1")
    gamma = beta * delta / M
    j_perp = -(M / (2.0 * beta)) * math.log(math.tanh(gamma))
    c = math.sqrt(0.5 * math.sinh(2.0 * gamma))
    return {"gamma": gamma, "j_perp": j_perp, "c_const": c}


def escape_trace_csv(results):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["chain", "seed", "sweep", "support_d"])
    for res in results:
        for sweep_idx, frac in res.support_trace:
            w.writerow([res.chain, res.seed, sweep_idx, repr(frac)])
    return buf.getvalue()


def escape_result_csv(rows):
    """Rows are ``(N, K, EscapeResult)``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["N", "K", "chain", "sweeps_to_passage", "timeout_flag"])
    for n, k, res in rows:
        w.writerow([n, k, res.chain, "" if res.timed_out else res.sweeps_to_passage,
                    int(res.timed_out)])
    return buf.getvalue()
