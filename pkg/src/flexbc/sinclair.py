"""Staggered fixed-point solver coupling the atomistic and harmonic problems.

Each global iteration relaxes the atomistic region with the pad frozen,
transmits the resulting interface mismatch as a compact force on the
receiving layer, and updates the harmonic solution through the boundary
element solver (or the bare Green operator for effectively infinite
problems). The transmitted force is evaluated in residual form: the
harmonic-operator rows at the receiving layer applied to the half-updated
state (minus any external load there). Without relaxation this equals the
harmonic image of the atomistic increment; with relaxation only the
residual form stays self-correcting, because a scaled update leaves a
(1 - alpha) fraction of the interface residual in the stored state, which
the next evaluation must see. The harmonic correction is applied to the
full stored field, atomistic rows included, so the stored state has an
identically vanishing continuum residual whenever alpha = 1.

Relaxation scales the transmitted force: statically by a fixed alpha, or
dynamically by minimizing the predicted next iterate difference through
the assembled operator blocks, reusing the linearized atomistic response
as a warm start for the next inner relaxation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .atomistic import (MinimizationError, energy_variation, hessian_blocks,
                        hessian_pair_blocks, minimize_atomistic, region_energy)
from .continuum import apply_block
from .dbem import dbem_solve
from .green import green_apply
from .spectral import assemble_T

DEFAULT_SCHEDULE = [(10.0**-t, 10.0**(-t - 2)) for t in range(0, 8)]


@dataclass
class SincOptions:
    use_initial_guess: bool = False
    relaxation: str = "none"          # none | static | dynamic
    alpha: float = 1.0                # static relaxation parameter
    dyn_variant: str = "freeze"       # freeze | refresh (hessian handling)
    schedule: list = field(default_factory=lambda: list(DEFAULT_SCHEDULE))
    max_iter: int = 400
    infinite: bool = False
    inner_method: str = "tn"          # tn | newton (nonlinear models)
    inner_max_iter: int = 5000

    def __post_init__(self):
        if self.relaxation == "static" and not (0.0 < self.alpha < 2.0):
            raise ValueError("static relaxation needs alpha in (0, 2)")
        tols = [t for t, _ in self.schedule]
        tols_a = [t for _, t in self.schedule]
        if any(b >= a for a, b in zip(tols, tols[1:])) or \
           any(b >= a for a, b in zip(tols_a, tols_a[1:])):
            raise ValueError("tolerance schedule must be strictly decreasing")


@dataclass
class ConvergenceReport:
    history: list = field(default_factory=list)
    status: str = "running"
    n_iter: int = 0
    n_force: int = 0
    fitted_rate: float | None = None
    fit_r2: float | None = None
    final_u: np.ndarray | None = None
    update_log: list = field(default_factory=list)

    def record(self, k, fnorm_a, fnorm_c, alpha, energy, n_force):
        self.history.append(dict(k=k, fnorm_a=fnorm_a, fnorm_c=fnorm_c,
                                 alpha=alpha, energy=energy,
                                 n_force_evals=n_force))

    def fit_rate(self, stage_start):
        """Least-squares slope of log residuals over the final stage."""
        ks = [h["k"] for h in self.history if h["k"] >= stage_start]
        rs = [h["fnorm_c"] for h in self.history if h["k"] >= stage_start]
        pairs = [(k, r) for k, r in zip(ks, rs) if r > 0]
        if len(pairs) < 3:
            self.fitted_rate, self.fit_r2 = None, None
            return
        x = np.array([p[0] for p in pairs], dtype=float)
        y = np.log([p[1] for p in pairs])
        A = np.vstack([x, np.ones_like(x)]).T
        coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
        yhat = A @ coef
        ss_res = float(np.sum((y - yhat) ** 2))
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        self.fit_r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
        self.fitted_rate = float(np.exp(coef[0]))

    def write_csv(self, path):
        cols = ["k", "fnorm_a", "fnorm_c", "alpha", "energy", "n_force_evals"]
        with open(path, "w", newline="") as fh:
            fh.write(",".join(cols) + "\n")
            for h in self.history:
                fh.write(",".join(
                    "%d" % h[c] if c in ("k", "n_force_evals")
                    else "%.17g" % h[c] for c in cols) + "\n")

    def summary(self):
        return dict(status=self.status, n_iter=self.n_iter,
                    n_force=self.n_force, fitted_rate=self.fitted_rate,
                    fit_r2=self.fit_r2,
                    final_energy=self.history[-1]["energy"] if self.history
                    else None)

    def write_summary(self, path, extra=None):
        data = self.summary()
        if extra:
            data.update(extra)
        with open(path, "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True, default=float)
            fh.write("\n")


def inhomogeneous_force(stencil, decomp, u_new, u_old):
    """Transmitted force L_h^{i+|a}[u_new - u_old] on the receiving layer."""
    du = np.asarray(u_new, dtype=float) - np.asarray(u_old, dtype=float)
    return apply_block(stencil, decomp, decomp.ip, decomp.a, du[decomp.a])


def interface_residual(stencil, decomp, u, tracked_ids, f_ext=None):
    """Residual-form transmitted force: harmonic rows at the receiving
    layer applied to the current state, minus the external load there.

    tracked_ids must cover every neighbor the receiving layer reads (the
    a/p/o sets do, since the layer sits one stencil reach inside the pad).
    """
    f = apply_block(stencil, decomp, decomp.ip, tracked_ids, u[tracked_ids])
    if f_ext is not None:
        f = f - f_ext[decomp.ip]
    return f


def min_alpha_scan(w_base, w_lin, lo=1e-3, hi=2.0, coarse=64, tol=1e-6):
    """argmin over (lo, hi] of the max-norm of w_base + alpha * w_lin."""
    b = np.asarray(w_base, dtype=float).ravel()
    m = np.asarray(w_lin, dtype=float).ravel()
    if np.abs(m).max(initial=0.0) == 0.0:
        return 1.0

    def h(a):
        return np.abs(b + a * m).max()

    alphas = np.linspace(lo, hi, coarse)
    vals = [h(a) for a in alphas]
    j = int(np.argmin(vals))
    a, bb = alphas[max(j - 1, 0)], alphas[min(j + 1, coarse - 1)]
    phi = (np.sqrt(5.0) - 1.0) / 2.0
    x1 = bb - phi * (bb - a)
    x2 = a + phi * (bb - a)
    f1, f2 = h(x1), h(x2)
    while bb - a > tol:
        if f1 <= f2:
            bb, x2, f2 = x2, x1, f1
            x1 = bb - phi * (bb - a)
            f1 = h(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + phi * (bb - a)
            f2 = h(x2)
    best = min([(vals[j], alphas[j]), (f1, x1), (f2, x2), (h(1.0), 1.0)],
               key=lambda t: (t[0], abs(t[1] - 1.0)))
    return best[1]


def dyn_relax_alpha(blocks, u_trial_p, u_prev_p, alpha_prev=1.0):
    """Dynamic relaxation parameter from the trial continuum update.

    Applies the three pad-block components to the trial iterate difference
    and minimizes the max norm of (w1 + w3) + alpha (w2 - w3); ties break
    toward alpha = 1.
    """
    delta = (np.asarray(u_trial_p) - np.asarray(u_prev_p)).ravel()
    w1 = blocks.T1[blocks.p_rows] @ delta
    w2 = blocks.T2[blocks.p_rows] @ delta
    w3 = blocks.T3[blocks.p_rows] @ delta
    return min_alpha_scan(w1 + w3, w2 - w3)


class AtomisticProblem:
    """Inner nonlinear relaxation facade over an atomistic model."""

    def __init__(self, model, decomp, method="tn", max_iter=5000):
        self.model = model
        self.decomp = decomp
        self.method = method
        self.max_iter = max_iter

    @property
    def n_force_evals(self):
        return self.model.n_force_evals

    def residual(self, u, f_ext):
        self.model.n_force_evals += 1
        ids = self.decomp.a
        g = -energy_variation(self.model, self.decomp, u, ids)
        if f_ext is not None:
            g = g + f_ext[ids]
        g[~self.decomp.active[ids]] = 0.0
        return g

    def solve(self, u, f_ext, tol_a, hess=None):
        minimize_atomistic(self.model, self.decomp, u, f_ext=f_ext,
                           tol_a=tol_a, method=self.method,
                           max_iter=self.max_iter, hess=hess)
        return u

    def energy(self, u, f_ext):
        reg = np.concatenate([self.decomp.a, self.decomp.p])
        return region_energy(self.model, self.decomp, u, reg, f_ext=f_ext)

    def linearize(self, u):
        hb = hessian_blocks(self.model, self.decomp, u)
        L_pp_p = hessian_pair_blocks(self.model, self.decomp, u,
                                     self.decomp.pp, self.decomp.p)
        return hb, L_pp_p


class LinearAtomisticProblem:
    """Inner solver for a quadratic (linearized) atomistic energy.

    L_aa, L_ap are the dense linearized blocks; the inner solve is a single
    direct solve per iteration, counted as one force evaluation.
    """

    def __init__(self, decomp, L_aa, L_ap):
        self.decomp = decomp
        self.L_aa = L_aa
        self.L_ap = L_ap
        self.n_force_evals = 0
        self._lu = None

    def residual(self, u, f_ext):
        self.n_force_evals += 1
        d = self.decomp.dim
        r = -(self.L_aa @ u[self.decomp.a].ravel()
              + self.L_ap @ u[self.decomp.p].ravel())
        if f_ext is not None:
            r = r + f_ext[self.decomp.a].ravel()
        return r.reshape(-1, d)

    def solve(self, u, f_ext, tol_a, hess=None):
        from scipy.linalg import lu_factor, lu_solve
        if self._lu is None:
            self._lu = lu_factor(self.L_aa)
        rhs = -self.L_ap @ u[self.decomp.p].ravel()
        if f_ext is not None:
            rhs = rhs + f_ext[self.decomp.a].ravel()
        self.n_force_evals += 1
        u[self.decomp.a] = lu_solve(self._lu, rhs).reshape(-1, self.decomp.dim)
        return u

    def energy(self, u, f_ext):
        ua = u[self.decomp.a].ravel()
        up = u[self.decomp.p].ravel()
        e = 0.5 * ua @ (self.L_aa @ ua) + ua @ (self.L_ap @ up)
        if f_ext is not None:
            e -= ua @ f_ext[self.decomp.a].ravel()
        return float(e)

    def linearize(self, u):
        class _HB:
            pass
        hb = _HB()
        hb.L_aa = self.L_aa
        hb.L_ap = self.L_ap
        # the p'-by-p block is the corresponding slice of L_ap
        from .spectral import _dof_positions
        pp_rows = _dof_positions(self.decomp, self.decomp.pp, self.decomp.a)
        return hb, self.L_ap[pp_rows]


def sinc_run(problem, decomp, stencil, ws, ubar_o=None, f_ext=None,
             opts=None):
    """Run the staggered coupling iteration (the bounded-domain scheme with
    optional static/dynamic relaxation and staged tolerances).

    problem: AtomisticProblem or LinearAtomisticProblem;
    ws: DbemWorkspace (its infinite flag selects the unbounded variant);
    ubar_o: Dirichlet data on the o-ring, (len(o), d) or None for zero;
    f_ext: external force field over all sites or None.

    Returns a ConvergenceReport whose final_u holds the stored field and
    whose update_log allows reconstructing the harmonic solution anywhere.
    """
    opts = opts or SincOptions()
    d = decomp.dim
    u = np.zeros((decomp.n_sites, d))
    report = ConvergenceReport()
    n0 = problem.n_force_evals

    upd_ids = np.unique(np.concatenate([decomp.a, decomp.p, decomp.o]))
    infinite = ws.infinite

    def apply_update(g_o, r_ids, r_vals, kind="dbem"):
        """Apply a harmonic correction on the tracked sites and log it."""
        if kind == "green":
            # raw Green response, no boundary correction (one-time load term)
            w = green_apply(ws.table, decomp, upd_ids, r_ids, r_vals)
        else:
            w = dbem_solve(ws, g_o, r_ids, r_vals, upd_ids)
        u[upd_ids] += w
        report.update_log.append(dict(kind=kind,
                                      g_o=None if g_o is None else np.array(g_o),
                                      r_ids=np.array(r_ids, dtype=np.int64),
                                      r_vals=np.array(r_vals, dtype=float)))

    f_ext_a_supp = np.empty(0, dtype=np.int64)
    if f_ext is not None:
        nz = np.abs(f_ext).max(axis=1) > 0
        f_ext_a_supp = decomp.a[nz[decomp.a]]

    if opts.use_initial_guess:
        r_ids, r_vals = _initial_residual_support(problem, decomp, f_ext)
        apply_update(ubar_o, r_ids, r_vals, kind="initial-guess")
    elif f_ext is not None:
        # one-time application of any continuum-supported external load
        c_supp = decomp.c[np.abs(f_ext[decomp.c]).max(axis=1) > 0]
        if len(c_supp):
            apply_update(None, c_supp, f_ext[c_supp], kind="green")

    # relaxation machinery
    alpha_static = opts.alpha if opts.relaxation == "static" else 1.0
    alpha_dyn = 1.0
    blocks = None
    frozen_hess = None
    if opts.relaxation == "dynamic":
        hb, L_pp_p = problem.linearize(u)
        blocks = assemble_T(stencil, ws.table, decomp, hb.L_aa, L_pp_p,
                            ws=None if infinite else ws)
        frozen_hess = hb
    elif opts.relaxation == "static" and opts.alpha is None:
        raise ValueError("static relaxation needs an alpha")

    stage = 0
    tol, tol_a = opts.schedule[stage]
    stage_starts = [0]
    k = 0
    status = "running"
    diverge_count = 0
    prev_fc = None
    warm_pad = None

    while True:
        if k >= opts.max_iter:
            status = "stalled"
            break
        u_prev = u.copy()
        try:
            problem.solve(u, f_ext, tol_a)
        except MinimizationError as exc:
            status = "stalled"
            break
        f_inh = interface_residual(stencil, decomp, u, upd_ids, f_ext)
        fnorm_c = float(np.linalg.norm(f_inh))

        alpha_used = alpha_static
        if opts.relaxation == "dynamic":
            if opts.dyn_variant == "refresh":
                hb, L_pp_p = problem.linearize(u)
                blocks.refresh_atomistic(hb.L_aa, L_pp_p)
                frozen_hess = hb
            g_trial = None if ubar_o is None else (ubar_o - u[decomp.o])
            w_trial = dbem_solve(ws, g_trial, decomp.ip,
                                 -alpha_dyn * f_inh, decomp.p)
            u_trial_p = u[decomp.p] + w_trial
            alpha_dyn = dyn_relax_alpha(blocks, u_trial_p, u_prev[decomp.p],
                                        alpha_dyn)
            alpha_used = alpha_dyn

        g_o = None if ubar_o is None else (ubar_o - u[decomp.o])
        apply_update(g_o, decomp.ip, -alpha_used * f_inh)

        if opts.relaxation == "dynamic" and frozen_hess is not None:
            # predictor: linearized atomistic response to the pad change
            dpad = (u[decomp.p] - u_prev[decomp.p]).ravel()
            try:
                x = np.linalg.solve(frozen_hess.L_aa, -frozen_hess.L_ap @ dpad)
                u[decomp.a] += x.reshape(-1, d)
            except np.linalg.LinAlgError:
                pass

        r_a = problem.residual(u, f_ext)
        fnorm_a = float(np.linalg.norm(r_a))
        k += 1
        energy = problem.energy(u, f_ext)
        report.record(k, fnorm_a, fnorm_c, alpha_used, energy,
                      problem.n_force_evals - n0)

        if prev_fc is not None and fnorm_c > prev_fc:
            diverge_count += 1
            if diverge_count >= 5:
                status = "diverged"
                break
        else:
            diverge_count = 0
        prev_fc = fnorm_c

        if fnorm_a < tol and fnorm_c < tol:
            if stage == len(opts.schedule) - 1:
                status = "converged"
                break
            stage += 1
            tol, tol_a = opts.schedule[stage]
            stage_starts.append(k)
            diverge_count = 0
            prev_fc = None

    report.status = status
    report.n_iter = k
    report.n_force = problem.n_force_evals - n0
    report.final_u = u
    report.fit_rate(stage_starts[-1])
    return report


def _initial_residual_support(problem, decomp, f_ext):
    """Compact residual of the zero state: external load plus defect forces."""
    u0 = np.zeros((decomp.n_sites, decomp.dim))
    r = problem.residual(u0, f_ext)
    ids = decomp.a
    nz = np.linalg.norm(r, axis=1) > 1e-14
    return ids[nz], r[nz]


def reconstruct_field(ws, report, out_ids, ubar_o=None):
    """Replay the logged harmonic updates to evaluate u on any site set."""
    decomp = ws.decomp
    out_ids = np.asarray(out_ids)
    u = np.zeros((len(out_ids), decomp.dim))
    for entry in report.update_log:
        if entry["kind"] == "green":
            u += green_apply(ws.table, decomp, out_ids, entry["r_ids"],
                             entry["r_vals"])
        else:
            u += dbem_solve(ws, entry["g_o"], entry["r_ids"],
                            entry["r_vals"], out_ids)
    if report.final_u is not None:
        # atomistic region carries the nonlinear solution, not the replay
        mask = np.isin(out_ids, np.concatenate([decomp.a, decomp.p, decomp.o]))
        u[mask] = report.final_u[out_ids[mask]]
    return u
