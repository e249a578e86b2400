"""Beamforming math for the MISO interference channel.

Every transmitter k sends with w_k = sqrt(p_k) * unit direction, where the
direction interpolates between maximum-ratio transmission (align with the
desired channel h_kk) and zero forcing (pseudo-inverse direction nulling the
interference this transmitter causes at every other receiver).

Rates, energy efficiency, and feasibility are always computed in float64,
independent of the model's training precision.
"""

from __future__ import annotations

import numpy as np

LN2 = float(np.log(2.0))
GRAM_COND_LIMIT = 1e12
DEGENERATE_NORM = 1e-12


class SingularChannelError(ValueError):
    """Gram matrix of the channel stack is numerically singular."""


class DegenerateDirectionError(ValueError):
    """MRT and ZF directions cancel; the hybrid combination has no direction."""


def zf_matrix(g_k: np.ndarray) -> np.ndarray:
    """Pseudo-inverse of the K x N_T channel stack G_k, branch by aspect ratio.

    Wide or square (N_T >= K): G^H (G G^H)^-1.  Tall (N_T < K): (G^H G)^-1 G^H.
    Both equal the Moore-Penrose pseudo-inverse on full-rank input.
    """
    g_k = np.asarray(g_k, dtype=np.complex128)
    k, n_t = g_k.shape
    if n_t >= k:
        gram = g_k @ g_k.conj().T  # K x K
        _check_gram(gram)
        # G^H gram^-1 == (gram^-1 G)^H since gram is Hermitian
        return np.linalg.solve(gram, g_k).conj().T
    gram = g_k.conj().T @ g_k  # N_T x N_T
    _check_gram(gram)
    return np.linalg.solve(gram, g_k.conj().T)


def _check_gram(gram: np.ndarray) -> None:
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > GRAM_COND_LIMIT:
        raise SingularChannelError(f"Gram matrix condition {cond:.3e} exceeds {GRAM_COND_LIMIT:.0e}")


def channel_stack(h_row: np.ndarray) -> np.ndarray:
    """G_k for transmitter k: rows are h_kj^H over receivers j (h_row = h[k])."""
    return np.conj(np.asarray(h_row, dtype=np.complex128))


def pinv_directions(h: np.ndarray) -> np.ndarray:
    """Per-transmitter ZF direction u_k: column k of the pseudo-inverse of G_k."""
    h = np.asarray(h, dtype=np.complex128)
    k = h.shape[0]
    return np.stack([zf_matrix(channel_stack(h[i]))[:, i] for i in range(k)])


def hybrid_direction(alpha_k: float, u_k: np.ndarray, h_kk: np.ndarray) -> np.ndarray:
    """Unit-norm mix alpha*ZF + (1-alpha)*MRT of the two normalized directions."""
    if not 0.0 <= alpha_k <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha_k}")
    u_k = np.asarray(u_k, dtype=np.complex128)
    h_kk = np.asarray(h_kk, dtype=np.complex128)
    nu, nh = np.linalg.norm(u_k), np.linalg.norm(h_kk)
    if nu < DEGENERATE_NORM or nh < DEGENERATE_NORM:
        raise DegenerateDirectionError("zero-norm input direction")
    if alpha_k == 0.0:
        return h_kk / nh
    if alpha_k == 1.0:
        return u_k / nu
    mix = alpha_k * (u_k / nu) + (1.0 - alpha_k) * (h_kk / nh)
    norm = np.linalg.norm(mix)
    if norm < DEGENERATE_NORM:
        raise DegenerateDirectionError(f"direction combination cancelled (norm {norm:.3e}) at alpha={alpha_k}")
    return mix / norm


def recover_beamformers(h: np.ndarray, alpha: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Beamformer rows w_k = sqrt(p_k) * hybrid direction from (alpha_k, p_k)."""
    h = np.asarray(h, dtype=np.complex128)
    alpha = np.asarray(alpha, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    u = pinv_directions(h)
    k = h.shape[0]
    w = np.empty((k, h.shape[2]), dtype=np.complex128)
    for i in range(k):
        w[i] = np.sqrt(p[i]) * hybrid_direction(alpha[i], u[i], h[i, i])
    return w


def beam_projections(h: np.ndarray, w: np.ndarray) -> np.ndarray:
    """proj[i, j] = h_ij^H w_i: transmitter i's beam projected on receiver j."""
    h = np.asarray(h, dtype=np.complex128)
    w = np.asarray(w, dtype=np.complex128)
    return np.einsum("ijn,in->ij", h.conj(), w)


def compute_rates(h: np.ndarray, w: np.ndarray, noise: float) -> np.ndarray:
    """Per-receiver achievable rates, bits/s/Hz.

    Interference at receiver k pairs channel h_ik with beamformer w_i.
    """
    gains = np.abs(beam_projections(h, w)) ** 2  # [i, j] = |h_ij^H w_i|^2
    signal = np.diag(gains).copy()
    interference = gains.sum(axis=0) - signal
    return np.log1p(signal / (interference + noise)) / LN2


def energy_efficiency(rates: np.ndarray, w: np.ndarray, p_circuit: float) -> float:
    """Sum rate over total consumed power (transmit + circuit), bits/Hz/Joule."""
    total_power = float(np.sum(np.abs(w) ** 2)) + p_circuit
    return float(np.sum(rates)) / total_power


def check_feasibility(rates: np.ndarray, w: np.ndarray, config, tol: float = 1e-6) -> bool:
    """QoS and power-budget check: R_k >= r_req - tol and ||w_k||^2 <= p_max + tol."""
    if tol < 0:
        raise ValueError(f"tol must be >= 0, got {tol}")
    powers = np.sum(np.abs(w) ** 2, axis=1)
    return bool(np.all(rates >= config.r_req - tol) and np.all(powers <= config.p_max + tol))


def effective_gains(h: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Gain matrix of unit directions: H[k, j] = |h_kj^H dir_k|^2."""
    return np.abs(beam_projections(h, directions)) ** 2


def gain_tables(h: np.ndarray):
    """Per-sample constants that make gains a closed form of alpha.

    With unit ZF direction zu_k and unit MRT direction m_k, the hybrid
    direction is (a*zu_k + (1-a)*m_k) / n_k(a) where
    n_k(a)^2 = a^2 + (1-a)^2 + 2a(1-a)*cross_k.  Returns
    (zf_proj, mrt_proj, cross): zf_proj[k, j] = h_kj^H zu_k,
    mrt_proj[k, j] = h_kj^H m_k, cross[k] = Re(zu_k^H m_k).
    The gain then is H_kj(a) = |a*zf_proj + (1-a)*mrt_proj|^2 / n_k(a)^2.
    """
    h = np.asarray(h, dtype=np.complex128)
    u = pinv_directions(h)
    u_hat = u / np.linalg.norm(u, axis=1, keepdims=True)
    hkk = h[np.arange(h.shape[0]), np.arange(h.shape[0])]
    m_hat = hkk / np.linalg.norm(hkk, axis=1, keepdims=True)
    zf_proj = np.einsum("kjn,kn->kj", h.conj(), u_hat)
    mrt_proj = np.einsum("kjn,kn->kj", h.conj(), m_hat)
    cross = np.real(np.einsum("kn,kn->k", u_hat.conj(), m_hat))
    return zf_proj, mrt_proj, cross


def gains_from_tables(alpha: np.ndarray, zf_proj: np.ndarray, mrt_proj: np.ndarray, cross: np.ndarray) -> np.ndarray:
    """Evaluate the gain matrix for a direction-parameter vector alpha (K,)."""
    a = np.asarray(alpha, dtype=np.float64)[:, None]
    mix = a * zf_proj + (1.0 - a) * mrt_proj
    norm2 = a[:, 0] ** 2 + (1.0 - a[:, 0]) ** 2 + 2.0 * a[:, 0] * (1.0 - a[:, 0]) * cross
    return (np.abs(mix) ** 2) / norm2[:, None]


def rates_from_gains(gains: np.ndarray, p: np.ndarray, noise: float) -> np.ndarray:
    """Rates from a gain matrix and power vector: the scalarized system view."""
    p = np.asarray(p, dtype=np.float64)
    weighted = p[:, None] * gains  # [i, j] = p_i H_ij
    signal = np.diag(weighted).copy()
    interference = weighted.sum(axis=0) - signal
    return np.log1p(signal / (interference + noise)) / LN2
