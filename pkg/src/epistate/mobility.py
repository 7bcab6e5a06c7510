"""Interstate travel and commuting: policy-scaled flow matrices, the net-flow
operators and the covariance algebra of Poisson flows.

Matrix convention: row = origin state, column = destination state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Country, ModelParams, PolicyMultipliers


def _square(w: np.ndarray, name: str) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {w.shape}")
    return w


def _vec(v, n: int, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (n,):
        raise ValueError(f"{name} has shape {v.shape}, expected ({n},)")
    return v


@dataclass(frozen=True)
class MobilitySpec:
    w_trav: np.ndarray
    w_com: np.ndarray

    @classmethod
    def closed(cls, n: int) -> "MobilitySpec":
        return cls(np.zeros((n, n)), np.zeros((n, n)))

    def violations(self, country: Country | None = None) -> list[str]:
        out = []
        codes = country.state_codes if country is not None else None
        for name in ("w_trav", "w_com"):
            w = np.asarray(getattr(self, name), dtype=float)
            if w.ndim != 2 or w.shape[0] != w.shape[1]:
                out.append(f"{name} is not square")
                continue
            if codes is not None and w.shape[0] != len(codes):
                out.append(f"{name} has {w.shape[0]} rows for {len(codes)} states")
                continue
            label = (lambda j: codes[j]) if codes is not None else str
            if (w < 0).any():
                out.append(f"{name} has negative entries")
            if np.any(np.diag(w) != 0):
                out.append(f"{name} diagonal must be zero")
            for j in np.flatnonzero(w.sum(axis=1) >= 1):
                out.append(f"{name} row sum for {label(j)} is >= 1")
        return out

    def permuted(self, order) -> "MobilitySpec":
        ix = np.ix_(order, order)
        return MobilitySpec(self.w_trav[ix], self.w_com[ix])


def effective_travel(w_trav, theta_t, theta_s, tau_trav: float) -> np.ndarray:
    """``tau_trav * W_trav @ diag(theta_t) @ diag(theta_s)``: inbound (column) scaling."""
    w = _square(w_trav, "w_trav")
    n = w.shape[0]
    scale = _vec(theta_t, n, "theta_t") * _vec(theta_s, n, "theta_s")
    return tau_trav * w * scale[None, :]


def effective_commute(w_com, theta_s) -> np.ndarray:
    w = _square(w_com, "w_com")
    return w * _vec(theta_s, w.shape[0], "theta_s")[None, :]


def omega_travel(w_trav_t) -> np.ndarray:
    """Net-inflow operator ``W' - diag(W 1)``; its columns sum to zero."""
    w = _square(w_trav_t, "w_trav_t")
    return w.T - np.diag(w.sum(axis=1))


def omega_commute(w_com_t, tau_com: float) -> np.ndarray:
    return tau_com * omega_travel(w_com_t)


def flow_cov(w, z, tau: float) -> np.ndarray:
    """Covariance of net Poisson flows of a compartment ``z`` along ``w``.

    ``tau**2 * (-W o (z 1') - W' o (1 z') + diag(W'z + (W 1) o z))``
    """
    w = _square(w, "w")
    z = _vec(z, w.shape[0], "z")
    out = -w * z[:, None] - w.T * z[None, :]
    out[np.diag_indices_from(out)] += w.T @ z + w.sum(axis=1) * z
    return tau**2 * out


def infection_product_cov(w_com_t, w_trav_t, s, i, tau_com: float, omega) -> np.ndarray:
    """Covariance of ``I* o S*`` where ``I*``, ``S*`` are flow-perturbed levels.

    Uses Var(X o Y) = VX o VY + VX o EY EY' + VY o EX EX' for independent X, Y.
    """
    w1 = _square(w_com_t, "w_com_t")
    n = w1.shape[0]
    s = _vec(s, n, "s")
    i = _vec(i, n, "i")
    var_i = flow_cov(w1, i, tau_com) + flow_cov(w_trav_t, i, 1.0)
    var_s = flow_cov(w1, s, tau_com) + flow_cov(w_trav_t, s, 1.0)
    a = np.eye(n) + np.asarray(omega, dtype=float)
    ms, mi = a @ s, a @ i
    return var_i * var_s + var_i * np.outer(ms, ms) + var_s * np.outer(mi, mi)


@dataclass(frozen=True)
class EffectiveMobility:
    """Policy-scaled matrices for one day plus the combined net-flow operator."""

    w_trav_t: np.ndarray
    w_com_t: np.ndarray
    omega_trav: np.ndarray
    omega_com: np.ndarray
    omega: np.ndarray
    tau_com: float

    @property
    def is_closed(self) -> bool:
        return not (self.w_trav_t.any() or self.w_com_t.any())

    @classmethod
    def build(cls, spec: MobilitySpec, theta: PolicyMultipliers, params: ModelParams) -> "EffectiveMobility":
        wt = effective_travel(spec.w_trav, theta.theta_t, theta.theta_s, params.tau_trav)
        wc = effective_commute(spec.w_com, theta.theta_s)
        ot, oc = omega_travel(wt), omega_commute(wc, params.tau_com)
        return cls(wt, wc, ot, oc, ot + oc, params.tau_com)

    @classmethod
    def closed(cls, n: int, tau_com: float = 0.36) -> "EffectiveMobility":
        z = np.zeros((n, n))
        return cls(z, z, z, z, z, tau_com)
