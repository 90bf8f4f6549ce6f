"""Two-stage sandwich covariance for the calibrated Cox fit.

Var(beta-hat) has two stacked sources of noise: the usual partial-likelihood
score variation in the main study, and the estimation error of the
measurement-error-model coefficients carried in through the calibrated
exposures.  The estimator assembled here is

    Var(beta-hat) = (1/N) I^-1 [ G + (1/N) U_a V_a U_a' ] I^-T

with I the empirical information divided by N, G the per-subject robust
score-residual outer-product mean, U_a the (unnormalized) derivative of the
Cox score with respect to the calibration coefficients, and V_a the
cluster-robust covariance of those coefficients from the validation fit.
The (1/N) U_a V_a U_a' term is exactly the delta-method propagation
(d beta / d alpha) Var(alpha-hat) (d beta / d alpha)' rescaled by N, since
d beta-hat / d alpha = (N I)^-1 U_a.

U_a is computed analytically; a finite-difference verification mode recomputes
it by central differences in alpha and reports the relative discrepancy.
"""

from dataclasses import dataclass

import numpy as np

from . import constants, coxph, linalg, mem, transforms
from .coxph import _risk_quantities, _sorted_views


@dataclass(frozen=True)
class SandwichComponents:
    i_beta: np.ndarray    # empirical information / N
    g_beta: np.ndarray    # robust score-residual outer-product mean
    u_alpha: np.ndarray   # d_beta x d_alpha, unnormalized sum over events
    v_alpha: np.ndarray   # Var(alpha-hat) from the validation fit


@dataclass(frozen=True)
class CoxFit:
    """Point estimates, Eq-style sandwich covariance, and Wald intervals."""

    params: coxph.CoxParams
    beta: np.ndarray
    covariance: np.ndarray
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    components: SandwichComponents
    report: coxph.ConvergenceReport
    term_names: tuple


def g_beta_hat(u, time, event, beta):
    """Robust score-residual outer-product mean.

    Each subject's residual is its own score contribution minus its weighted
    appearances in every earlier event's risk set:

        W_i = D_i (u_i - ubar(T_i))
              - sum_{events e: T_e <= T_i} [exp(eta_i) / S0_raw(T_e)] (u_i - ubar(T_e))

    and G = (1/N) sum_i W_i W_i'.
    """
    u_s, t_s, e_s, _ = _sorted_views(u, time, event)
    beta = np.asarray(beta, dtype=float)
    n, d = u_s.shape
    eta, w, S0, S1, first = _risk_quantities(u_s, t_s, beta)
    ev = np.flatnonzero(e_s == 1)
    if ev.size == 0:
        return np.zeros((d, d))
    idx = first[ev]
    s0_e = S0[idx]
    ubar_e = S1[idx] / s0_e[:, None]
    # Prefix sums over events in time order.
    inv_s0 = np.concatenate([[0.0], np.cumsum(1.0 / s0_e)])
    ubar_over_s0 = np.vstack([np.zeros(d), np.cumsum(ubar_e / s0_e[:, None], axis=0)])
    # Number of event times <= each subject's follow-up (ties stay in the risk set).
    cnt = np.searchsorted(t_s[ev], t_s, side="right")
    corr = w[:, None] * (u_s * inv_s0[cnt, None] - ubar_over_s0[cnt])
    resid = -corr
    resid[ev] += u_s[ev] - ubar_e
    return (resid.T @ resid) / n


def u_alpha_hat(u, time, event, beta, phi, c, b):
    """Analytic derivative of the Cox score with respect to alpha.

    The calibrated exposure enters each covariate row as mu_i = phi_i' alpha,
    so d u_i / d alpha = c_i phi_i' and d eta_i / d alpha = b_i phi_i', with
    c_i = d u_i / d mu_i and b_i = beta' c_i supplied by the caller.  The
    chain rule through both the event terms and the risk-set sums gives

        U_a = sum_events [ c_i phi_i'
                           - (1/S0) sum_R w_j (c_j + b_j u_j) phi_j'
                           + (S1 / S0^2) (x) sum_R w_j b_j phi_j' ].
    """
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    phi = np.asarray(phi, dtype=float)
    c = np.asarray(c, dtype=float)
    b = np.asarray(b, dtype=float)
    beta = np.asarray(beta, dtype=float)
    time = np.asarray(time, dtype=float)
    event = np.asarray(event)
    order = np.argsort(time, kind="stable")
    u_s, t_s, e_s = u[order], time[order], event[order]
    phi_s, c_s, b_s = phi[order], c[order], b[order]
    n, d = u_s.shape
    da = phi_s.shape[1]
    eta, w, S0, S1, first = _risk_quantities(u_s, t_s, beta)
    ev = np.flatnonzero(e_s == 1)
    if ev.size == 0:
        return np.zeros((d, da))
    # Suffix sums of w (c + b u) phi' and of w b phi.
    M = (w[:, None, None]
         * (c_s + b_s[:, None] * u_s)[:, :, None] * phi_s[:, None, :])
    SM = np.cumsum(M[::-1], axis=0)[::-1]
    q = (w * b_s)[:, None] * phi_s
    Sq = np.cumsum(q[::-1], axis=0)[::-1]
    idx = first[ev]
    s0_e = S0[idx]
    out = np.einsum("ij,ik->jk", c_s[ev], phi_s[ev])
    out -= (SM[idx] / s0_e[:, None, None]).sum(axis=0)
    ratio = S1[idx] / (s0_e ** 2)[:, None]
    out += np.einsum("ij,ik->jk", ratio, Sq[idx])
    return out


def u_alpha_fd(u_builder, time, event, beta, alpha, step=1e-6):
    """Central finite-difference derivative of the score in alpha.

    ``u_builder(alpha)`` must return the covariate rows implied by a
    coefficient vector; used to verify :func:`u_alpha_hat`.
    """
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    cols = []
    for k in range(alpha.size):
        hi, lo = alpha.copy(), alpha.copy()
        h = step * max(1.0, abs(alpha[k]))
        hi[k] += h
        lo[k] -= h
        s_hi = coxph.score(u_builder(hi), time, event, beta)
        s_lo = coxph.score(u_builder(lo), time, event, beta)
        cols.append((s_hi - s_lo) / (2.0 * h))
    return np.column_stack(cols)


def sandwich_covariance(components, n_main, n_valid):
    """Assemble the two-stage covariance from its pieces.

    ``components.v_alpha`` already carries the validation-sample scaling
    (it is the covariance of alpha-hat itself), so ``n_valid`` only enters
    through it; the argument is kept for interface symmetry and checked
    for positivity.  The result is symmetrized.
    """
    if n_valid <= 0 or n_main <= 0:
        raise ValueError("sample sizes must be positive")
    i_inv = linalg.inv_spd(components.i_beta)
    middle = components.g_beta + (
        components.u_alpha @ components.v_alpha @ components.u_alpha.T) / n_main
    cov = i_inv @ middle @ i_inv.T / n_main
    return 0.5 * (cov + cov.T)


def wald_ci(beta, covariance):
    """95% Wald intervals: beta +- z_.975 * sqrt(diag)."""
    se = np.sqrt(np.clip(np.diag(covariance), 0.0, None))
    return se, beta - constants.Z_975 * se, beta + constants.Z_975 * se


def calibration_jacobians(beta, w, interacting=None):
    """(c, b) arrays for u rows built by :func:`coxph.build_cox_rows`.

    c_i = d u_i / d mu_i = [1, 0_pw, w_i[interacting]'], b_i = beta' c_i.
    """
    w = np.asarray(w, dtype=float)
    if w.ndim == 1:
        w = w[:, None]
    n, p_w = w.shape
    which = list(range(p_w)) if interacting is None else list(interacting)
    d = 1 + p_w + len(which)
    c = np.zeros((n, d))
    c[:, 0] = 1.0
    for k, j in enumerate(which):
        c[:, 1 + p_w + k] = w[:, j]
    b = c @ np.asarray(beta, dtype=float)
    return c, b


def fit_calibrated_cox(main, memfit, interacting=None, check_derivatives=False,
                       fd_tol=1e-4):
    """Full second-stage fit: calibrate exposures, maximize, propagate variance.

    ``interacting`` selects which confounders get exposure interactions in
    the outcome model (all by default).  With ``check_derivatives`` the
    analytic alpha-derivative is verified against central finite differences.
    """
    xhat = mem.predict_mu_matrix(memfit, main.z, main.w)
    u = coxph.build_cox_rows(xhat, main.w, interacting=interacting)
    beta, report = coxph.fit(u, main.time, main.event)
    n = len(main)
    info = coxph.information(u, main.time, main.event, beta)
    i_beta = info / n
    g_beta = g_beta_hat(u, main.time, main.event, beta)
    phi = transforms.build_design_matrix(memfit.spec, memfit.transform,
                                         main.z, main.w)
    c, b = calibration_jacobians(beta, main.w, interacting=interacting)
    u_alpha = u_alpha_hat(u, main.time, main.event, beta, phi, c, b)
    if check_derivatives:
        def builder(a):
            xh = phi @ a
            return coxph.build_cox_rows(xh, main.w, interacting=interacting)
        fd = u_alpha_fd(builder, main.time, main.event, beta, memfit.alpha)
        scale = np.max(np.abs(fd)) + 1.0
        err = np.max(np.abs(u_alpha - fd)) / scale
        if err > fd_tol:
            raise ArithmeticError(
                f"analytic alpha-derivative disagrees with finite differences "
                f"(relative error {err:.3e})")
    comps = SandwichComponents(i_beta=i_beta, g_beta=g_beta,
                               u_alpha=u_alpha, v_alpha=memfit.v_alpha)
    cov = sandwich_covariance(comps, n, memfit.n_subjects)
    se, lo, hi = wald_ci(beta, cov)
    p_w = main.w.shape[1]
    which = list(range(p_w)) if interacting is None else list(interacting)
    names = (["exposure"] + list(main.confounder_names)
             + [f"exposure:{main.confounder_names[j]}" for j in which])
    params = coxph.CoxParams.from_vector(beta, p_w, len(which))
    return CoxFit(params=params, beta=beta, covariance=cov, se=se,
                  ci_lower=lo, ci_upper=hi, components=comps, report=report,
                  term_names=tuple(names))


def hazard_ratio(fit, increment, w0, interacting=None):
    """HR per exposure increment at confounder values w0, with delta-method CI.

    HR = exp(increment * (beta1 + beta3' w0[interacting])).
    """
    w0 = np.atleast_1d(np.asarray(w0, dtype=float))
    p_w = len(fit.params.beta2)
    which = list(range(p_w)) if interacting is None else list(interacting)
    grad = np.zeros(fit.beta.shape[0])
    grad[0] = 1.0
    for k, j in enumerate(which):
        grad[1 + p_w + k] = w0[j]
    g = float(grad @ fit.beta)
    var_g = float(grad @ fit.covariance @ grad)
    half = constants.Z_975 * increment * np.sqrt(max(var_g, 0.0))
    point = increment * g
    return np.exp(point), np.exp(point - half), np.exp(point + half)
