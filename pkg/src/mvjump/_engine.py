"""Euler scheme with exact-time jumps, plus its exact discrete derivatives.

One call advances a population of paths over a time grid.  Each step first
applies the drift from the left-node state and frozen law,
X <- X + h (b - compensator), and then applies the jumps of the step in time
order, X <- X + c(X-, u, mu).

Optional tracks follow the same discrete map:

* ``J``  = dX/dx, the state tangent;
* ``Y``  = Lions tangent at a set of pinned points, fed by per-node
  summaries of an auxiliary bank of paths;
* ``G``, ``A`` = carré du champ and generator of X on Poisson space,
  propagated with the chain rules Gamma[phi(X)] = dphi Gamma dphi^T and
  A[phi(X)] = dphi A + 1/2 d2phi : Gamma, plus the fresh bottom-space
  contributions w(u) g g^T and a[c](u) at every jump;
* ``KG``, ``KJ``, ``KY`` = Gamma[F, X_j] for F = entries of G, J, Y, needed
  by the divergence of Gamma^{-1} times a tangent.

Every recursion differentiates the map actually simulated, so the
integration-by-parts identities hold for the scheme itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import BlowUp, MissingSecondDerivative, SchemeInstability
from .jump_driver import EventFeed, LevyModel, nu_rule
from .measure_kit import EmpiricalMeasure

BLOWUP = 1e12


# ------------------------------------------------------------------ helpers

def _zeros_like_call(shape_fn):
    def f(*args):
        return np.zeros(shape_fn(args[0].shape[0]))
    return f


def resolve_second_order(cs, lm: LevyModel, mu: EmpiricalMeasure, need_lions: bool) -> dict:
    """Second-order callables, probing numerically for any that are missing."""
    d = cs.dim
    rng = np.random.default_rng(12345)
    x = rng.normal(size=(4, d))
    u = np.array([0.3, -0.7, 0.05, 0.9]) * lm.R0
    v = rng.normal(size=(4, d))
    h = 1e-5
    out = {}

    def probe(name, first, args_fn, shape):
        supplied = getattr(cs, name)
        if supplied is not None:
            out[name] = supplied
            return
        lo, hi = args_fn(-h), args_fn(h)
        fd = (first(*hi) - first(*lo)) / (2 * h)
        if np.max(np.abs(fd)) > 1e-7 * (1.0 + np.max(np.abs(first(*args_fn(0.0))))):
            raise MissingSecondDerivative(f"{name} is not supplied but the finite-difference probe is nonzero")
        out[name] = _zeros_like_call(shape)

    e0 = np.zeros((4, d))
    e0[:, 0] = 1.0
    probe("d2b_dx2", cs.db_dx, lambda s: (x + s * e0, mu), lambda n: (n, d, d, d))
    probe("d2c_dx2", cs.dc_dx, lambda s: (x + s * e0, u, mu), lambda n: (n, d, d, d))
    probe("d2c_dxdu", cs.dc_dx, lambda s: (x, u + s, mu), lambda n: (n, d, d))
    probe("d2c_du2", cs.dc_du, lambda s: (x, u + s, mu), lambda n: (n, d))
    if need_lions:
        probe("d2mu_b_dx", cs.dmu_b, lambda s: (x + s * e0, mu, v), lambda n: (n, d, d, d))
        probe("d2mu_c_dx", cs.dmu_c, lambda s: (x + s * e0, u, mu, v), lambda n: (n, d, d, d))
        probe("d2mu_c_du", cs.dmu_c, lambda s: (x, u + s, mu, v), lambda n: (n, d, d))
    return out


class Compensator:
    """Integrals against nu of c and of its derivatives, vectorized over paths."""

    def __init__(self, cs, lm: LevyModel):
        self.cs = cs
        self.zero = bool(cs.c_odd_in_u and lm.symmetric) or lm.total_rate == 0.0
        if not self.zero:
            self.rule = nu_rule(lm, breakpoints=cs.bottom.breakpoints)

    def integral(self, fn: Callable, x: np.ndarray, *extra) -> np.ndarray | float:
        if self.zero:
            return 0.0
        n, q = x.shape[0], self.rule.nodes.shape[0]
        xr = np.repeat(x, q, axis=0)
        ur = np.tile(self.rule.nodes, n)
        mu = extra[0]
        rest = tuple(np.repeat(e, q, axis=0) for e in extra[1:])
        vals = fn(xr, ur, mu, *rest)
        vals = vals.reshape((n, q) + vals.shape[1:])
        return np.tensordot(vals, self.rule.weights, axes=([1], [0]))


@dataclass
class BankSummary:
    """Primed-space inputs to the Lions tangent at each grid node.

    ``jv_mean[k, v]`` is the bank average of the state tangent of the paths
    pinned at v; ``yth_mean[k, v]`` the bank average of the Lions tangent of
    the paths started from the initial law.  The full arrays are needed only
    when the Lions derivatives depend on their last argument.
    """

    v_points: np.ndarray
    jv_mean: np.ndarray
    yth_mean: np.ndarray
    xv: Optional[np.ndarray] = None
    jv: Optional[np.ndarray] = None
    xth: Optional[np.ndarray] = None
    yth: Optional[np.ndarray] = None

    @property
    def n_v(self) -> int:
        return self.v_points.shape[0]


@dataclass
class SchemeOutput:
    grid: np.ndarray
    x0: np.ndarray
    X: np.ndarray
    record_index: np.ndarray
    X_nodes: Optional[np.ndarray] = None
    J: Optional[np.ndarray] = None
    Y: Optional[np.ndarray] = None
    G: Optional[np.ndarray] = None
    A: Optional[np.ndarray] = None
    KG: Optional[np.ndarray] = None
    KJ: Optional[np.ndarray] = None
    KY: Optional[np.ndarray] = None
    J_nodes: Optional[np.ndarray] = None
    Y_nodes: Optional[np.ndarray] = None
    J_mean_nodes: Optional[np.ndarray] = None
    Y_mean_nodes: Optional[np.ndarray] = None
    events: Optional[dict] = None
    law_nodes: Optional[list] = None
    law_times: Optional[np.ndarray] = None


# ------------------------------------------------------------------ the scheme

def run_scheme(cs, lm: LevyModel, x0: np.ndarray, grid: np.ndarray, feed: EventFeed, *,
               law_at: Optional[Callable[[float], EmpiricalMeasure]] = None,
               refresh_times: Optional[np.ndarray] = None,
               track_J: bool = False, bank: Optional[BankSummary] = None,
               track_malliavin: bool = False, track_cross: bool = True, record: str | np.ndarray = "terminal",
               record_tangents: bool = False, reduce_means: bool = False,
               record_events: bool = False) -> SchemeOutput:
    """Advance paths x0 over ``grid``.

    With ``law_at`` the measure argument is read from a frozen law flow;
    without it the population is an interacting particle system whose
    empirical measure is refreshed at ``refresh_times`` (default every node).
    """
    grid = np.asarray(grid, dtype=float)
    K = grid.shape[0] - 1
    X = np.array(x0, dtype=float, copy=True)
    n, d = X.shape
    coupled = law_at is None
    eye = np.eye(d)
    track_Y = bank is not None
    comp = Compensator(cs, lm)
    bottom = cs.bottom

    if isinstance(record, str):
        rec_idx = np.arange(K + 1) if record == "all" else np.array([K]) if record == "terminal" else np.array([], int)
    else:
        rec_idx = np.asarray(record, dtype=int)
    rec_pos = {int(k): i for i, k in enumerate(rec_idx)}
    X_nodes = np.empty((len(rec_idx), n, d)) if len(rec_idx) else None

    J = np.broadcast_to(eye, (n, d, d)).copy() if track_J else None
    nv = bank.n_v if track_Y else 0
    Y = np.zeros((n, nv, d, d)) if track_Y else None
    G = A = KG = KJ = KY = None
    if track_malliavin:
        G = np.zeros((n, d, d))
        A = np.zeros((n, d))
        if track_cross:
            KG = np.zeros((n, d, d, d))
            KJ = np.zeros((n, d, d, d)) if track_J else None
            KY = np.zeros((n, nv, d, d, d)) if track_Y else None
    J_nodes = np.empty((len(rec_idx), n, d, d)) if (record_tangents and track_J and len(rec_idx)) else None
    Y_nodes = np.empty((len(rec_idx), n, nv, d, d)) if (record_tangents and track_Y and len(rec_idx)) else None
    J_mean = np.empty((K + 1, d, d)) if (reduce_means and track_J) else None
    Y_mean = np.empty((K + 1, nv, d, d)) if (reduce_means and track_Y) else None

    ev_log = {"path": [], "time": [], "mark": [], "atom": [], "before": [], "after": [], "gamma": [], "agen": []} \
        if record_events else None

    refresh = None
    if coupled:
        refresh = grid if refresh_times is None else np.asarray(refresh_times, dtype=float)
    law_nodes, law_times = [], []
    mu = None
    second = None

    def store(k):
        if k in rec_pos:
            X_nodes[rec_pos[k]] = X
            if J_nodes is not None:
                J_nodes[rec_pos[k]] = J
            if Y_nodes is not None:
                Y_nodes[rec_pos[k]] = Y
        if J_mean is not None:
            J_mean[k] = J.mean(axis=0)
        if Y_mean is not None:
            Y_mean[k] = Y.mean(axis=0)

    store(0)
    for k in range(K):
        t_a, t_b = grid[k], grid[k + 1]
        h = t_b - t_a
        if coupled:
            if mu is None or np.any(np.abs(refresh - t_a) < 1e-12):
                mu = EmpiricalMeasure(X, np.full(n, 1.0 / n))
                law_nodes.append(mu)
                law_times.append(t_a)
        else:
            mu = law_at(t_a)
        if second is None and track_malliavin:
            second = resolve_second_order(cs, lm, mu, track_Y)

        # ---- Lions source terms from the bank (shared by drift and jumps)
        if track_Y:
            ybar = bank.jv_mean[k] + bank.yth_mean[k]  # (V, d, d)

        # ---- drift
        bt = cs.b(X, mu) - comp.integral(cs.c, X, mu)
        need_B = track_J or track_Y or track_malliavin
        if need_B:
            B = np.asarray(cs.db_dx(X, mu)) - comp.integral(cs.dc_dx, X, mu)
            P = eye + h * B
        if track_malliavin:
            H = np.asarray(second["d2b_dx2"](X, mu)) - comp.integral(second["d2c_dx2"], X, mu)
        if track_Y:
            Sb, Tb = _lions_drift_source(cs, comp, second, X, mu, bank, k, ybar, track_malliavin)

        if track_malliavin and track_cross:
            GP = np.einsum("nrq,njq->nrj", G, P)
            T1 = np.einsum("nacr,nce,nbe->nabr", H, G, P)
            dGdX = h * (T1 + T1.transpose(0, 2, 1, 3))
            KG_new = np.einsum("nac,nbd,njq,ncdq->nabj", P, P, P, KG) + np.einsum("nabr,nrj->nabj", dGdX, GP)
            if track_J:
                dJdX = h * np.einsum("nacr,ncb->nabr", H, J)
                KJ = np.einsum("nac,njq,ncbq->nabj", P, P, KJ) + np.einsum("nabr,nrj->nabj", dJdX, GP)
            if track_Y:
                dYdX = h * (np.einsum("nacr,nvcb->nvabr", H, Y) + Tb)
                KY = np.einsum("nac,njq,nvcbq->nvabj", P, P, KY) + np.einsum("nvabr,nrj->nvabj", dYdX, GP)
            KG = KG_new
        if track_malliavin:
            A = np.einsum("nij,nj->ni", P, A) + 0.5 * h * np.einsum("nijl,njl->ni", H, G)
            G = np.einsum("nac,ncd,nbd->nab", P, G, P)
        if track_Y:
            Y = np.einsum("nab,nvbc->nvac", P, Y) + h * Sb
        if track_J:
            J = np.einsum("nab,nbc->nac", P, J)
        X = X + h * bt

        # ---- jumps
        ev = feed.events(t_a, t_b)
        if ev.size:
            max_rank = int(ev.rank.max())
            for r in range(max_rank + 1):
                sel = ev.rank == r
                idx = ev.path[sel]
                u = ev.mark[sel]
                atom = ev.from_atom[sel]
                Xs = X[idx]
                cval = cs.c(Xs, u, mu)
                out = _jump_update(cs, bottom, second, Xs, u, atom, mu, idx, cval,
                                   J, Y, G, A, KG, KJ, KY, track_J, track_Y, track_malliavin,
                                   bank, k, ybar if track_Y else None)
                if track_J:
                    J[idx] = out["J"]
                if track_Y:
                    Y[idx] = out["Y"]
                if track_malliavin:
                    G[idx], A[idx] = out["G"], out["A"]
                    if KG is not None:
                        KG[idx] = out["KG"]
                    if KJ is not None:
                        KJ[idx] = out["KJ"]
                    if KY is not None:
                        KY[idx] = out["KY"]
                X[idx] = Xs + cval
                if ev_log is not None:
                    ev_log["path"].append(idx)
                    ev_log["time"].append(ev.time[sel])
                    ev_log["mark"].append(u)
                    ev_log["atom"].append(atom)
                    ev_log["before"].append(Xs)
                    ev_log["after"].append(X[idx])
                    if track_malliavin:
                        ev_log["gamma"].append(out["gam_src"])
                        ev_log["agen"].append(out["a_src"])

        amax = np.max(np.abs(X)) if X.size else 0.0
        if not np.isfinite(amax):
            raise SchemeInstability(f"non-finite state at t={t_b:.6g}")
        if amax > BLOWUP:
            raise BlowUp(f"|X| = {amax:.3e} exceeds {BLOWUP:.0e} at t={t_b:.6g}")
        store(k + 1)

    events = None
    if ev_log is not None:
        events = {}
        if not track_malliavin:
            del ev_log["gamma"], ev_log["agen"]
        for key, parts in ev_log.items():
            if parts:
                events[key] = np.concatenate(parts)
            else:
                events[key] = np.zeros({"path": (0,), "time": (0,), "mark": (0,), "atom": (0,),
                                        "gamma": (0, d, d)}.get(key, (0, d)))
        events["path"] = events["path"].astype(np.int64)
        events["atom"] = events["atom"].astype(bool)
        order = np.lexsort((events["time"], events["path"]))
        events = {key: val[order] for key, val in events.items()}

    return SchemeOutput(grid=grid, x0=np.array(x0, dtype=float), X=X, record_index=rec_idx, X_nodes=X_nodes,
                        J=J, Y=Y, G=G, A=A, KG=KG, KJ=KJ, KY=KY, J_nodes=J_nodes, Y_nodes=Y_nodes,
                        J_mean_nodes=J_mean, Y_mean_nodes=Y_mean, events=events,
                        law_nodes=law_nodes if coupled else None,
                        law_times=np.array(law_times) if coupled else None)


def _lions_pairs(fn, X, mu, bank_x, bank_t, extra=None):
    """Average over bank atoms of fn(X_i, ..., bank_x_m) @ bank_t_m for every path i."""
    n, d = X.shape
    M = bank_x.shape[0]
    xr = np.repeat(X, M, axis=0)
    vr = np.tile(bank_x, (n, 1))
    if extra is None:
        vals = fn(xr, mu, vr)
    else:
        vals = fn(xr, np.repeat(extra, M), mu, vr)
    vals = vals.reshape((n, M) + vals.shape[1:])
    return vals, bank_t


def _lions_drift_source(cs, comp, second, X, mu, bank, k, ybar, with_deriv):
    """Drift source E'[dmu_b(X, mu, X') T'] and its x-derivative, shapes (n,V,d,d) and (n,V,d,d,d)."""
    if cs.lions_v_free:
        D = np.asarray(cs.dmu_b(X, mu, X)) - comp.integral(lambda x, u, m, v: cs.dmu_c(x, u, m, v), X, mu, X)
        Sb = np.einsum("nab,vbc->nvac", D, ybar)
        Tb = None
        if with_deriv:
            D2 = np.asarray(second["d2mu_b_dx"](X, mu, X)) - comp.integral(
                lambda x, u, m, v: second["d2mu_c_dx"](x, u, m, v), X, mu, X)
            Tb = np.einsum("nacr,vcb->nvabr", D2, ybar)
        return Sb, Tb
    if bank.xv is None:
        raise ValueError("bank arrays are required when Lions derivatives depend on their last argument")
    n = X.shape[0]
    V = bank.n_v
    d = X.shape[1]
    Sb = np.zeros((n, V, d, d))
    Tb = np.zeros((n, V, d, d, d)) if with_deriv else None
    for v in range(V):
        for bx, bt in ((bank.xv[k, v], bank.jv[k, v]), (bank.xth[k], bank.yth[k, v])):
            M = bx.shape[0]
            xr = np.repeat(X, M, axis=0)
            vr = np.tile(bx, (n, 1))
            D = np.asarray(cs.dmu_b(xr, mu, vr)).reshape(n, M, d, d)
            Sb[:, v] += np.einsum("nmab,mbc->nac", D, bt) / M
            if with_deriv:
                D2 = np.asarray(second["d2mu_b_dx"](xr, mu, vr)).reshape(n, M, d, d, d)
                Tb[:, v] += np.einsum("nmacr,mcb->nabr", D2, bt) / M
    if not comp.zero:
        raise NotImplementedError("compensated Lions terms with point-dependent derivatives are not supported")
    return Sb, Tb


def _lions_jump_source(cs, second, X, u, mu, bank, k, ybar, with_deriv):
    if cs.lions_v_free:
        D = np.asarray(cs.dmu_c(X, u, mu, X))
        Sc = np.einsum("nab,vbc->nvac", D, ybar)
        Tx = Tu = None
        if with_deriv:
            Tx = np.einsum("nacr,vcb->nvabr", np.asarray(second["d2mu_c_dx"](X, u, mu, X)), ybar)
            Tu = np.einsum("nac,vcb->nvab", np.asarray(second["d2mu_c_du"](X, u, mu, X)), ybar)
        return Sc, Tx, Tu
    n, d = X.shape
    V = bank.n_v
    Sc = np.zeros((n, V, d, d))
    Tx = np.zeros((n, V, d, d, d)) if with_deriv else None
    Tu = np.zeros((n, V, d, d)) if with_deriv else None
    for v in range(V):
        for bx, bt in ((bank.xv[k, v], bank.jv[k, v]), (bank.xth[k], bank.yth[k, v])):
            M = bx.shape[0]
            xr = np.repeat(X, M, axis=0)
            ur = np.repeat(u, M)
            vr = np.tile(bx, (n, 1))
            D = np.asarray(cs.dmu_c(xr, ur, mu, vr)).reshape(n, M, d, d)
            Sc[:, v] += np.einsum("nmab,mbc->nac", D, bt) / M
            if with_deriv:
                D2 = np.asarray(second["d2mu_c_dx"](xr, ur, mu, vr)).reshape(n, M, d, d, d)
                Tx[:, v] += np.einsum("nmacr,mcb->nabr", D2, bt) / M
                D3 = np.asarray(second["d2mu_c_du"](xr, ur, mu, vr)).reshape(n, M, d, d)
                Tu[:, v] += np.einsum("nmac,mcb->nab", D3, bt) / M
    return Sc, Tx, Tu


def _jump_update(cs, bottom, second, Xs, u, atom, mu, idx, cval, J, Y, G, A, KG, KJ, KY,
                 track_J, track_Y, track_malliavin, bank, k, ybar):
    m, d = Xs.shape
    out = {}
    need_Q = track_J or track_Y or track_malliavin
    if need_Q:
        Q = np.eye(d) + np.asarray(cs.dc_dx(Xs, u, mu))
    if track_Y:
        Sc, Tx, Tu = _lions_jump_source(cs, second, Xs, u, mu, bank, k, ybar, track_malliavin)
    if track_malliavin:
        diffuse = ~atom
        g = np.asarray(cs.dc_du(Xs, u, mu))
        w = np.where(diffuse, bottom.weight(u), 0.0)
        dw = np.where(diffuse, bottom.dweight(u), 0.0)
        gam_src = np.where(diffuse[:, None, None], np.asarray(cs.gamma_c(Xs, u, mu)), 0.0)
        a_src = np.where(diffuse[:, None], np.asarray(cs.a_c(Xs, u, mu)), 0.0)
        C2 = np.asarray(second["d2c_dx2"](Xs, u, mu))
        Guc = np.asarray(second["d2c_dxdu"](Xs, u, mu))
        g2 = np.asarray(second["d2c_du2"](Xs, u, mu))
        Gs = G[idx]
    if track_malliavin and KG is not None:
        GQ = np.einsum("nrq,njq->nrj", Gs, Q)
        T1 = np.einsum("nacr,nce,nbe->nabr", C2, Gs, Q)
        fresh_x = w[:, None, None, None] * (Guc[:, :, None, :] * g[:, None, :, None]
                                            + g[:, :, None, None] * Guc[:, None, :, :])
        dGdX = T1 + T1.transpose(0, 2, 1, 3) + fresh_x
        T2 = np.einsum("nac,nce,nbe->nab", Guc, Gs, Q)
        dGdu = (T2 + T2.transpose(0, 2, 1) + dw[:, None, None] * g[:, :, None] * g[:, None, :]
                + w[:, None, None] * (g2[:, :, None] * g[:, None, :] + g[:, :, None] * g2[:, None, :]))
        out["KG"] = (np.einsum("nac,nbd,njq,ncdq->nabj", Q, Q, Q, KG[idx])
                     + np.einsum("nabr,nrj->nabj", dGdX, GQ)
                     + w[:, None, None, None] * dGdu[:, :, :, None] * g[:, None, None, :])
        if KJ is not None:
            Js = J[idx]
            out["KJ"] = (np.einsum("nac,njq,ncbq->nabj", Q, Q, KJ[idx])
                         + np.einsum("nacr,ncb,nrj->nabj", C2, Js, GQ)
                         + w[:, None, None, None] * np.einsum("nac,ncb->nab", Guc, Js)[:, :, :, None]
                         * g[:, None, None, :])
        if KY is not None:
            Ys = Y[idx]
            dYdX = np.einsum("nacr,nvcb->nvabr", C2, Ys) + Tx
            dYdu = np.einsum("nac,nvcb->nvab", Guc, Ys) + Tu
            out["KY"] = (np.einsum("nac,njq,nvcbq->nvabj", Q, Q, KY[idx])
                         + np.einsum("nvabr,nrj->nvabj", dYdX, GQ)
                         + w[:, None, None, None, None] * dYdu[..., None] * g[:, None, None, None, :])
    if track_malliavin:
        out["A"] = np.einsum("nij,nj->ni", Q, A[idx]) + 0.5 * np.einsum("nijl,njl->ni", C2, Gs) + a_src
        out["G"] = np.einsum("nac,ncd,nbd->nab", Q, Gs, Q) + gam_src
        out["gam_src"] = gam_src
        out["a_src"] = a_src
    if track_J:
        out["J"] = np.einsum("nab,nbc->nac", Q, J[idx])
    if track_Y:
        out["Y"] = np.einsum("nab,nvbc->nvac", Q, Y[idx]) + Sc
    return out
