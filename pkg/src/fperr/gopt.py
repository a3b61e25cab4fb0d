"""Rigorous interval branch-and-bound maximization of SymExprs.

A query expression is compiled into a small register program that evaluates
a whole batch of boxes at once with the outward-rounded numpy kernels of
:mod:`fperr.interval`.  The program can also carry interval gradients
(forward mode), which drive a monotonicity test: when the objective is
certainly monotone in a variable over a box, that axis collapses to the
maximizing face.  This is what keeps high-dimensional linear error
coefficients cheap.

Boxes are kept in a max-heap on their upper bound.  Each round splits the
best boxes on their widest axis, evaluates children and their midpoints,
and discards boxes whose upper bound cannot beat the certified lower bound
(or, in prune mode, whose guard is certainly false).
"""

from __future__ import annotations

import hashlib
import heapq
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

import numpy as np

from . import interval as ia
from . import predicate as P
from .interval import DomainViolation, Interval
from .symbolic import Atom, SymExpr, sym_abs, var_atom

_U = 2.0**-53


@dataclass
class OptConfig:
    tolerance: float = 1e-2  # relative gap between upper and certified lower
    abs_tolerance: float = 1e-300
    max_subdivisions: int = 20000
    timeout: float = 10.0
    constraint_mode: str = "ignore"  # or "prune"
    workers: int = 1
    batch: int = 16
    monotonicity: bool = True
    use_cache: bool = True

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.constraint_mode not in ("ignore", "prune"):
            raise ValueError(f"unknown constraint mode {self.constraint_mode!r}")


@dataclass
class OptResult:
    upper_bound: float
    certified_lower: float
    queries: int = 0
    cache_hits: int = 0
    status: str = "converged"
    argmax: dict | None = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# coefficient intervals


def coeff_interval(c) -> tuple[float, float]:
    if isinstance(c, int) and abs(c) <= 2**53:
        f = float(c)
        return f, f
    c = Fraction(c)
    f = float(c)
    g = Fraction(f)
    if g == c:
        return f, f
    if g < c:
        return f, math.nextafter(f, math.inf)
    return math.nextafter(f, -math.inf), f


def _sum_rows(lo, hi):
    """Outward-rounded sum over axis 0 of interval rows."""
    m = lo.shape[0]
    if m == 0:
        z = np.zeros(lo.shape[1:])
        return z, z.copy()
    if m <= 4:
        slo, shi = lo[0], hi[0]
        for i in range(1, m):
            slo, shi = ia.iadd(slo, shi, lo[i], hi[i])
        return slo, shi
    with np.errstate(invalid="ignore", over="ignore"):
        slo = lo.sum(axis=0)
        shi = hi.sum(axis=0)
        err_lo = np.abs(lo).sum(axis=0) * (m * _U * 1.01)
        err_hi = np.abs(hi).sum(axis=0) * (m * _U * 1.01)
        rlo = np.nextafter(slo - err_lo, -np.inf)
        rhi = np.nextafter(shi + err_hi, np.inf)
    rlo, rhi = _sign_clamp(rlo, rhi, lo, hi)
    return ia._clean(rlo, rhi)


def _lin_eval(vi, c, c0, lo, hi):
    """Enclosure of c0 + sum c_i x_i; products and the sum share one allowance."""
    xl, xh = lo[vi], hi[vi]
    if len(vi) <= 4:
        # few terms: directed operations, exact whenever the result is
        slo = shi = None
        for i in range(len(vi)):
            ci = np.full(xl.shape[1], float(c[i, 0]))
            pl, ph = ia.imul(ci, ci, xl[i], xh[i])
            slo, shi = (pl, ph) if slo is None else ia.iadd(slo, shi, pl, ph)
        if c0:
            k = np.full(xl.shape[1], c0)
            slo, shi = ia.iadd(slo, shi, k, k)
        return slo, shi
    with np.errstate(invalid="ignore", over="ignore"):
        tl = np.where(c >= 0, c * xl, c * xh)
        th = np.where(c >= 0, c * xh, c * xl)
        m = len(vi) + 2
        slo, shi = tl.sum(axis=0) + c0, th.sum(axis=0) + c0
        err_lo = (np.abs(tl).sum(axis=0) + abs(c0)) * (m * _U * 1.01)
        err_hi = (np.abs(th).sum(axis=0) + abs(c0)) * (m * _U * 1.01)
        rlo = np.nextafter(slo - err_lo, -np.inf)
        rhi = np.nextafter(shi + err_hi, np.inf)
    if c0 == 0:
        # rounded products keep their sign, so the sum does too
        rlo = np.where((tl >= 0).all(axis=0), np.maximum(rlo, 0.0), rlo)
        rhi = np.where((th <= 0).all(axis=0), np.minimum(rhi, 0.0), rhi)
    return ia._clean(rlo, rhi)


def _sign_clamp(rlo, rhi, lo, hi):
    # a sum of nonnegative rows is at least its largest row (and symmetrically)
    with np.errstate(invalid="ignore"):
        nonneg = (lo >= 0).all(axis=0)
        nonpos = (hi <= 0).all(axis=0)
        rlo = np.where(nonneg, np.maximum(rlo, lo.max(axis=0, initial=0.0)), rlo)
        rhi = np.where(nonpos, np.minimum(rhi, hi.min(axis=0, initial=0.0)), rhi)
    return rlo, rhi


def _widen_sum(lo, hi, absum, n, minlo=None, maxhi=None):
    """Account for float summation of n terms with absolute sum absum.

    ``minlo``/``maxhi`` (smallest lower and largest upper endpoint among the
    summands) keep the sign of sums whose terms all share one sign.
    """
    err = absum * (n * _U * 1.01)
    rlo, rhi = np.nextafter(lo - err, -np.inf), np.nextafter(hi + err, np.inf)
    if minlo is not None:
        rlo = np.where(minlo >= 0, np.maximum(rlo, 0.0), rlo)
        rhi = np.where(maxhi <= 0, np.minimum(rhi, 0.0), rhi)
    return rlo, rhi


# ---------------------------------------------------------------------------
# compiled programs


class _Poly:
    __slots__ = ("atoms", "pairs_by_k", "npairs", "fidx", "clo", "chi", "M", "F",
                 "dk_groups", "ent_m", "ent_f", "ent_pair", "ent_order", "ent_atom_starts",
                 "ent_atoms", "support", "var_atoms", "var_pos", "kern_atoms", "kern_pos")


class Program:
    """Register program for a set of SymExprs over ordered variables."""

    def __init__(self, varnames: list[str], want_grad: bool):
        self.varnames = list(varnames)
        self.vindex = {v: i for i, v in enumerate(self.varnames)}
        self.want_grad = want_grad
        self.instrs: list[tuple] = []
        self.support: list[np.ndarray] = []
        self._reg: dict = {}

    # -- compilation ------------------------------------------------------
    def _new(self, key, instr, support) -> int:
        self.instrs.append(instr)
        self.support.append(support)
        r = len(self.instrs) - 1
        self._reg[key] = r
        return r

    def reg_atom(self, a: Atom) -> int:
        r = self._reg.get(("a", a.key))
        if r is not None:
            return r
        if a.kind == "var":
            vi = self.vindex[a.name]
            return self._new(("a", a.key), ("var", vi), np.array([vi]))
        if a.kind == "fac":
            ra, rb = self.reg_expr(a.args[0]), self.reg_expr(a.args[1])
            sup = np.union1d(self.support[ra], self.support[rb])
            return self._new(("a", a.key), ("fac", ra, rb), sup)
        ra = self.reg_expr(a.args[0])
        return self._new(("a", a.key), ("kern", a.kind, ra), self.support[ra])

    def reg_expr(self, e: SymExpr) -> int:
        r = self._reg.get(("e", e.key))
        if r is not None:
            return r
        # a bare atom with coefficient 1 is just that atom
        if len(e.terms) == 1:
            (m, c), = e.terms.items()
            if c == 1 and len(m) == 1 and m[0][1] == 1:
                r = self.reg_atom(m[0][0])
                self._reg[("e", e.key)] = r
                return r
        lin = self._linear(e)
        if lin is not None:
            return lin
        atoms: list[Atom] = sorted({a for m in e.terms for a, _ in m}, key=lambda a: a.key)
        aregs = [self.reg_atom(a) for a in atoms]
        aloc = {a: i for i, a in enumerate(atoms)}
        p = _Poly()
        p.atoms = np.array(aregs, dtype=np.int64)
        pair_id: dict[tuple[int, int], int] = {}
        mons = list(e.terms.items())
        p.M = len(mons)
        p.F = max((len(m) for m, _ in mons), default=0)
        rows = []
        clo = np.empty(p.M)
        chi = np.empty(p.M)
        for mi, (m, c) in enumerate(mons):
            clo[mi], chi[mi] = coeff_interval(c)
            row = []
            for a, k in m:
                key = (aloc[a], k)
                if key not in pair_id:
                    pair_id[key] = len(pair_id)
                row.append(pair_id[key])
            rows.append(row)
        p.npairs = len(pair_id)
        fidx = np.full((p.M, max(p.F, 1)), p.npairs, dtype=np.int64)
        for mi, row in enumerate(rows):
            fidx[mi, : len(row)] = row
        p.fidx = fidx
        p.clo, p.chi = clo[:, None], chi[:, None]
        groups: dict[int, list] = {}
        dgroups: dict[int, list] = {}
        for (ai, k), pid in pair_id.items():
            groups.setdefault(k, []).append((pid, ai))
            dgroups.setdefault(k - 1, []).append((pid, ai, k))
        p.pairs_by_k = [(k, np.array([g[0] for g in v]), np.array([g[1] for g in v])) for k, v in sorted(groups.items())]
        p.dk_groups = [(k, np.array([g[0] for g in v]), np.array([g[1] for g in v]),
                        np.array([float(g[2]) for g in v])[:, None]) for k, v in sorted(dgroups.items())]
        sup = np.unique(np.concatenate([self.support[r] for r in aregs])) if aregs else np.array([], dtype=np.int64)
        p.support = sup
        if self.want_grad and len(sup):
            ent = [(mi, f, pid) for mi, row in enumerate(rows) for f, pid in enumerate(row)]
            pair_atom = np.empty(p.npairs, dtype=np.int64)
            for (ai, _k), pid in pair_id.items():
                pair_atom[pid] = ai
            ent_m = np.array([t[0] for t in ent], dtype=np.int64)
            ent_f = np.array([t[1] for t in ent], dtype=np.int64)
            ent_pair = np.array([t[2] for t in ent], dtype=np.int64)
            ent_atom = pair_atom[ent_pair]
            order = np.argsort(ent_atom, kind="stable")
            p.ent_m, p.ent_f, p.ent_pair, p.ent_order = ent_m, ent_f, ent_pair, order
            sa = ent_atom[order]
            starts = np.flatnonzero(np.r_[True, sa[1:] != sa[:-1]]) if len(sa) else np.array([], dtype=np.int64)
            p.ent_atom_starts = starts
            p.ent_atoms = sa[starts]
            var_atoms, var_pos, kern_atoms, kern_pos = [], [], [], []
            for li in p.ent_atoms:
                r = aregs[li]
                ins = self.instrs[r]
                if ins[0] == "var":
                    var_atoms.append(li)
                    var_pos.append(int(np.searchsorted(sup, ins[1])))
                elif len(self.support[r]):
                    kern_atoms.append(li)
                    kern_pos.append(np.searchsorted(sup, self.support[r]))
            p.var_atoms = np.array(var_atoms, dtype=np.int64)
            p.var_pos = np.array(var_pos, dtype=np.int64)
            p.kern_atoms = kern_atoms
            p.kern_pos = kern_pos
        return self._new(("e", e.key), ("poly", p), sup)

    def _linear(self, e: SymExpr) -> int | None:
        """Fast path for c0 + sum c_i x_i with float-exact coefficients."""
        c0 = 0.0
        idx, cs = [], []
        for m, c in e.terms.items():
            lo, hi = coeff_interval(c)
            if lo != hi:
                return None
            if not m:
                c0 = lo
                continue
            if len(m) != 1 or m[0][1] != 1 or m[0][0].kind != "var":
                return None
            idx.append(self.vindex[m[0][0].name])
            cs.append(lo)
        if not idx:
            return None
        order = np.argsort(idx)
        vi = np.array(idx, dtype=np.int64)[order]
        c = np.array(cs)[order][:, None]
        return self._new(("e", e.key), ("lin", vi, c, c0), vi)

    # -- evaluation -------------------------------------------------------
    def run(self, lo: np.ndarray, hi: np.ndarray, grad_regs: set[int] | None = None):
        """Evaluate on boxes given as (nvars, B) endpoint arrays.

        Returns per-register lists of (lo, hi), bad flags and gradients
        (only for registers in ``grad_regs`` and their dependencies).
        """
        B = lo.shape[1]
        n = len(self.instrs)
        vlo: list = [None] * n
        vhi: list = [None] * n
        bad: list = [None] * n
        grad: list = [None] * n
        need = self._grad_closure(grad_regs) if (grad_regs and self.want_grad) else set()
        nobad = np.zeros(B, dtype=bool)
        for r, ins in enumerate(self.instrs):
            kind = ins[0]
            if kind == "var":
                vi = ins[1]
                vlo[r], vhi[r], bad[r] = lo[vi], hi[vi], nobad
                if r in need:
                    one = np.ones((1, B))
                    grad[r] = (one, one.copy())
            elif kind == "lin":
                _, vi, c, c0 = ins
                vlo[r], vhi[r] = _lin_eval(vi, c, c0, lo, hi)
                bad[r] = nobad
                if r in need:
                    g = np.broadcast_to(c, (len(vi), B))
                    grad[r] = (g, g)
            elif kind == "poly":
                self._run_poly(r, ins[1], vlo, vhi, bad, grad, r in need, B)
            elif kind == "fac":
                ra, rb = ins[1], ins[2]
                vlo[r], vhi[r] = ia.imul(vlo[ra], vhi[ra], vlo[rb], vhi[rb])
                bad[r] = bad[ra] | bad[rb]
                if r in need:
                    grad[r] = self._fac_grad(r, ra, rb, vlo, vhi, grad)
            else:
                _, kk, ra = ins
                l, h, b = ia.apply_batched(kk, [(vlo[ra], vhi[ra])])
                vlo[r], vhi[r], bad[r] = l, h, b | bad[ra]
                if r in need:
                    grad[r] = self._kern_grad(kk, ra, l, h, vlo, vhi, grad)
        return vlo, vhi, bad, grad

    def _grad_closure(self, regs) -> set[int]:
        need: set[int] = set()
        stack = [r for r in regs if len(self.support[r])]
        while stack:
            r = stack.pop()
            if r in need:
                continue
            need.add(r)
            ins = self.instrs[r]
            if ins[0] == "poly":
                deps = ins[1].atoms
            elif ins[0] == "fac":
                deps = ins[1:]
            elif ins[0] == "kern":
                deps = (ins[2],)
            else:
                deps = ()
            stack.extend(int(d) for d in deps if len(self.support[int(d)]))
        return need

    def _run_poly(self, r, p: _Poly, vlo, vhi, bad, grad, want, B):
        na = len(p.atoms)
        if na:
            Alo = np.stack([vlo[a] for a in p.atoms])
            Ahi = np.stack([vhi[a] for a in p.atoms])
            abad = np.logical_or.reduce([bad[a] for a in p.atoms])
        else:
            Alo = Ahi = np.zeros((0, B))
            abad = np.zeros(B, dtype=bool)
        Plo = np.empty((p.npairs + 1, B))
        Phi = np.empty((p.npairs + 1, B))
        Plo[p.npairs] = 1.0
        Phi[p.npairs] = 1.0
        for k, pids, ais in p.pairs_by_k:
            l, h, b = ia.ipow(Alo[ais], Ahi[ais], k)
            Plo[pids], Phi[pids] = l, h
            if b.any():
                abad = abad | b.any(axis=0)
        Tlo = np.broadcast_to(p.clo, (p.M, B))
        Thi = np.broadcast_to(p.chi, (p.M, B))
        if want:
            pre = [(Tlo, Thi)]
        for f in range(p.F):
            idx = p.fidx[:, f]
            Tlo, Thi = ia.imul(Tlo, Thi, Plo[idx], Phi[idx])
            if want:
                pre.append((Tlo, Thi))
        vlo[r], vhi[r] = _sum_rows(Tlo, Thi)
        bad[r] = abad
        if want:
            grad[r] = self._poly_grad(p, pre, Plo, Phi, Alo, Ahi, grad, B)

    def _poly_grad(self, p: _Poly, pre, Plo, Phi, Alo, Ahi, grad, B):
        k = len(p.support)
        if k == 0 or len(p.ent_m) == 0:
            return (np.zeros((k, B)), np.zeros((k, B)))
        # derivative of each pair: k * a^(k-1)
        DPlo = np.empty((p.npairs, B))
        DPhi = np.empty((p.npairs, B))
        for km1, pids, ais, kk in p.dk_groups:
            l, h, _ = ia.ipow(Alo[ais], Ahi[ais], km1)
            l, h = ia.imul(l, h, kk, kk)
            DPlo[pids], DPhi[pids] = l, h
        # suffix products over factor columns
        F = p.F
        suf = [None] * (F + 1)
        one = np.ones((p.M, B))
        suf[F] = (one, one)
        for f in range(F - 1, -1, -1):
            idx = p.fidx[:, f]
            suf[f] = ia.imul(Plo[idx], Phi[idx], *suf[f + 1])
        # entries (m, f): pre[f][m] * dpair * suf[f+1][m]
        Elo = np.empty((len(p.ent_m), B))
        Ehi = np.empty((len(p.ent_m), B))
        for f in range(F):
            sel = np.flatnonzero(p.ent_f == f)
            if not len(sel):
                continue
            ms = p.ent_m[sel]
            l, h = ia.imul(pre[f][0][ms], pre[f][1][ms], DPlo[p.ent_pair[sel]], DPhi[p.ent_pair[sel]])
            l, h = ia.imul(l, h, suf[f + 1][0][ms], suf[f + 1][1][ms])
            Elo[sel], Ehi[sel] = l, h
        Elo, Ehi = Elo[p.ent_order], Ehi[p.ent_order]
        with np.errstate(invalid="ignore", over="ignore"):
            Dlo = np.add.reduceat(Elo, p.ent_atom_starts, axis=0)
            Dhi = np.add.reduceat(Ehi, p.ent_atom_starts, axis=0)
            Dabs = np.add.reduceat(np.maximum(np.abs(Elo), np.abs(Ehi)), p.ent_atom_starts, axis=0)
            cnt = np.diff(np.r_[p.ent_atom_starts, len(Elo)])[:, None]
            Dlo, Dhi = _widen_sum(Dlo, Dhi, Dabs, cnt, np.minimum.reduceat(Elo, p.ent_atom_starts, axis=0),
                                  np.maximum.reduceat(Ehi, p.ent_atom_starts, axis=0))
        # chain into variables
        loc = {int(a): i for i, a in enumerate(p.ent_atoms)}
        Glo = np.zeros((k, B))
        Ghi = np.zeros((k, B))
        Gabs = np.zeros((k, B))
        Gcnt = np.zeros((k, 1))
        Gmin = np.full((k, B), np.inf)
        Gmax = np.full((k, B), -np.inf)
        if len(p.var_atoms):
            rows = [loc[int(a)] for a in p.var_atoms]
            Glo[p.var_pos] += Dlo[rows]
            Ghi[p.var_pos] += Dhi[rows]
            Gabs[p.var_pos] += np.maximum(np.abs(Dlo[rows]), np.abs(Dhi[rows]))
            Gcnt[p.var_pos] += 1
            Gmin[p.var_pos] = Dlo[rows]
            Gmax[p.var_pos] = Dhi[rows]
        for a, pos in zip(p.kern_atoms, p.kern_pos):
            i = loc[int(a)]
            g = grad[int(p.atoms[a])]
            l, h = ia.imul(Dlo[i][None, :], Dhi[i][None, :], g[0], g[1])
            Glo[pos] += l
            Ghi[pos] += h
            Gabs[pos] += np.maximum(np.abs(l), np.abs(h))
            Gcnt[pos] += 1
            Gmin[pos] = np.minimum(Gmin[pos], l)
            Gmax[pos] = np.maximum(Gmax[pos], h)
        with np.errstate(invalid="ignore", over="ignore"):
            return _widen_sum(Glo, Ghi, Gabs, np.maximum(Gcnt, 1), Gmin, Gmax)

    def _fac_grad(self, r, ra, rb, vlo, vhi, grad):
        sup = self.support[r]
        B = vlo[ra].shape[0]
        Glo = np.zeros((len(sup), B))
        Ghi = np.zeros((len(sup), B))
        Gabs = np.zeros((len(sup), B))
        Gmin = np.full((len(sup), B), np.inf)
        Gmax = np.full((len(sup), B), -np.inf)
        for x, y in ((ra, rb), (rb, ra)):
            if grad[x] is None:
                continue
            pos = np.searchsorted(sup, self.support[x])
            l, h = ia.imul(grad[x][0], grad[x][1], vlo[y][None, :], vhi[y][None, :])
            Glo[pos] += l
            Ghi[pos] += h
            Gabs[pos] += np.maximum(np.abs(l), np.abs(h))
            Gmin[pos] = np.minimum(Gmin[pos], l)
            Gmax[pos] = np.maximum(Gmax[pos], h)
        with np.errstate(invalid="ignore", over="ignore"):
            return _widen_sum(Glo, Ghi, Gabs, 2, Gmin, Gmax)

    def _kern_grad(self, kind, ra, l, h, vlo, vhi, grad):
        g = grad[ra]
        if g is None:
            return None
        glo, ghi = g
        xl, xh = vlo[ra], vhi[ra]
        if kind == "abs":
            pos = (xl >= 0)[None, :]
            neg = (xh <= 0)[None, :]
            m = np.maximum(np.abs(glo), np.abs(ghi))
            return (np.where(pos, glo, np.where(neg, -ghi, -m)),
                    np.where(pos, ghi, np.where(neg, -glo, m)))
        if kind == "inv":
            dl, dh, _ = ia.ipow(l, h, 2)
            dl, dh = -dh, -dl
        elif kind == "sqrt":
            with np.errstate(divide="ignore"):
                dl, dh, _ = ia.iinv(*ia.imul(l, h, np.full_like(l, 2.0), np.full_like(h, 2.0)))
        elif kind == "exp":
            dl, dh = l, h
        elif kind == "log":
            dl, dh, _ = ia.iinv(xl, xh)
        elif kind == "sin":
            dl, dh = ia.icos(xl, xh)
        elif kind == "cos":
            sl, sh = ia.isin(xl, xh)
            dl, dh = -sh, -sl
        else:
            return None
        return ia.imul(dl[None, :], dh[None, :], glo, ghi)


# ---------------------------------------------------------------------------
# guards on boxes


def _literal_threshold(c: P.Cmp, positive: bool) -> tuple[SymExpr, str, float]:
    """Literal as ``d rel t`` with d = lhs - rhs (atoms normalized to < / <=)."""
    n = c.normalized()
    d = n.lhs - n.rhs
    s = n.slack
    slack = 0.0 if s is None else math.nextafter(float(s[0]) + float(s[1]), math.inf)
    if positive:
        return d, n.op, slack
    rel = ">=" if n.op == "<" else ">"
    if slack > 0:
        rel = ">="
    return d, rel, -slack


class _GuardProg:
    """Tri-state evaluation of an NNF guard over boxes."""

    def __init__(self, guard, prog: Program):
        self.prog = prog
        self.tree = self._compile(guard, True)
        self.regs = sorted(self._regs(self.tree))

    def _compile(self, g, positive):
        if isinstance(g, P.Cmp):
            d, rel, t = _literal_threshold(g, positive)
            return ("lit", self.prog.reg_expr(d), rel, t)
        if isinstance(g, P.Not):
            return self._compile(g.arg, not positive)
        kind = "and" if isinstance(g, P.And) == positive else "or"
        return (kind, [self._compile(a, positive) for a in g.args])

    def _regs(self, t):
        if t[0] == "lit":
            return {t[1]}
        out = set()
        for s in t[1]:
            out |= self._regs(s)
        return out

    def eval(self, vlo, vhi, bad):
        """Returns (can_be_true, can_be_false) boolean arrays."""
        return self._eval(self.tree, vlo, vhi, bad)

    def _eval(self, t, vlo, vhi, bad):
        if t[0] == "lit":
            _, r, rel, th = t
            lo, hi, b = vlo[r], vhi[r], bad[r]
            if rel == "<":
                ct, cf = lo < th, hi >= th
            elif rel == "<=":
                ct, cf = lo <= th, hi > th
            elif rel == ">":
                ct, cf = hi > th, lo <= th
            else:
                ct, cf = hi >= th, lo < th
            return ct | b, cf | b
        parts = [self._eval(s, vlo, vhi, bad) for s in t[1]]
        if not parts:
            B = next(iter(x for x in vlo if x is not None)).shape[0] if any(x is not None for x in vlo) else 1
            v = t[0] == "and"
            return np.full(B, v), np.full(B, not v)
        cts = np.array([p[0] for p in parts])
        cfs = np.array([p[1] for p in parts])
        if t[0] == "and":
            return cts.all(axis=0), cfs.any(axis=0)
        return cts.any(axis=0), cfs.all(axis=0)


def _is_true(g) -> bool:
    return isinstance(g, P.And) and not g.args


# ---------------------------------------------------------------------------
# memo cache


class QueryCache:
    """Process-global result cache keyed by query signature."""

    def __init__(self, path: str | None = None):
        self._d: dict[str, tuple[float, float, str]] = {}
        self._lock = threading.Lock()
        self.path = path
        self.hits = 0
        if path and os.path.exists(path):
            with open(path, encoding="utf-8") as f:
                for line in f:
                    parts = line.rstrip("\n").split("\t")
                    if len(parts) >= 3:
                        self._d[parts[0]] = (float(parts[1]), float(parts[2]), "converged")

    def get(self, key):
        with self._lock:
            v = self._d.get(key)
            if v is not None:
                self.hits += 1
            return v

    def put(self, key, res: OptResult):
        with self._lock:
            if key in self._d:
                return
            self._d[key] = (res.upper_bound, res.certified_lower, res.status)
            if self.path and res.status == "converged":
                with open(self.path, "a", encoding="utf-8") as f:
                    f.write(f"{key}\t{res.upper_bound!r}\t{res.certified_lower!r}\n")

    def clear(self):
        with self._lock:
            self._d.clear()
            self.hits = 0

    def __len__(self):
        return len(self._d)


_CACHE: QueryCache | None = None
_CACHE_LOCK = threading.Lock()


def get_cache() -> QueryCache:
    global _CACHE
    with _CACHE_LOCK:
        if _CACHE is None:
            _CACHE = QueryCache(os.environ.get("FPERR_CACHE"))
        return _CACHE


def set_cache(cache: QueryCache | None):
    global _CACHE
    with _CACHE_LOCK:
        _CACHE = cache


_IDENT = re.compile(r"\b([A-Za-z_]\w*)\b(?!\()")


def _guard_text(g) -> str:
    def name(x):
        return x.key if isinstance(x, SymExpr) else str(x)

    def lit(c: P.Cmp):
        s = "" if c.slack is None else f"~({c.slack[0]!r},{c.slack[1]!r})"
        return f"[{name(c.lhs)} {c.op} {name(c.rhs)}{s}]"

    def go(q):
        if isinstance(q, P.Cmp):
            return lit(q)
        if isinstance(q, P.Not):
            return f"!{go(q.arg)}"
        sep = " & " if isinstance(q, P.And) else " | "
        return ("T" if isinstance(q, P.And) else "F") if not q.args else "{" + sep.join(go(a) for a in q.args) + "}"

    return go(g)


def query_signature(e: SymExpr, domain: Mapping[str, Interval], guard=P.TRUE, extra: str = "") -> str:
    """Digest of the query modulo variable renaming."""
    text = e.key + " || " + _guard_text(guard)
    order: dict[str, str] = {}

    def ren(m):
        name = m.group(1)
        if name not in domain:
            return name
        if name not in order:
            order[name] = f"v{len(order)}"
        return order[name]

    renamed = _IDENT.sub(ren, text)
    dom = ";".join(f"{order[v]}=[{domain[v].lo!r},{domain[v].hi!r}]" for v in order)
    h = hashlib.blake2b(digest_size=20)
    h.update(f"{renamed}##{dom}##{extra}".encode())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# branch and bound


def _vars_of(e: SymExpr, guard) -> list[str]:
    vs = set(e.variables())
    for a in P.atoms(guard):
        for x in (a.lhs, a.rhs):
            if isinstance(x, SymExpr):
                vs |= x.variables()
    return sorted(vs)


def maximize_upper(e: SymExpr, domain: Mapping[str, Interval], guard=P.TRUE,
                   cfg: OptConfig | None = None, cache: QueryCache | None = None) -> OptResult:
    """Sound upper bound on max of e over {x in domain : guard(x)}."""
    cfg = cfg or OptConfig()
    if cfg.constraint_mode == "ignore":
        guard = P.TRUE
    extra = f"{cfg.tolerance!r}/{cfg.max_subdivisions}/{cfg.timeout!r}/{cfg.constraint_mode}/{cfg.monotonicity}"
    key = None
    if cfg.use_cache:
        cache = get_cache() if cache is None else cache
        key = query_signature(e, domain, guard, extra)
        hit = cache.get(key)
        if hit is not None:
            return OptResult(hit[0], hit[1], 0, 1, hit[2])
    res = _bnb(e, domain, guard, cfg)
    if key is not None and res.status != "domain-violation":
        cache.put(key, res)
    return res


def _bnb(e: SymExpr, domain, guard, cfg: OptConfig) -> OptResult:
    t0 = time.perf_counter()
    varnames = _vars_of(e, guard)
    missing = [v for v in varnames if v not in domain]
    if missing:
        raise KeyError(f"no domain for {missing}")
    use_guard = not _is_true(guard)
    prog = Program(varnames, want_grad=cfg.monotonicity)
    obj = prog.reg_expr(e)
    gprog = _GuardProg(guard, prog) if use_guard else None
    nv = len(varnames)
    dlo = np.array([domain[v].lo for v in varnames], dtype=np.float64)
    dhi = np.array([domain[v].hi for v in varnames], dtype=np.float64)
    obj_support = set(prog.support[obj].tolist())
    free_axes = np.array([i not in obj_support for i in range(nv)], dtype=bool)
    queries = 0

    def evaluate(lo, hi, with_grad):
        nonlocal queries
        queries += lo.shape[1]
        vlo, vhi, bad, grad = prog.run(lo, hi, {obj} if with_grad else None)
        up = np.where(bad[obj], np.inf, vhi[obj])
        low = np.where(bad[obj], -np.inf, vlo[obj])
        if gprog is not None:
            ct, cf = gprog.eval(vlo, vhi, bad)
        else:
            ct = np.ones(lo.shape[1], dtype=bool)
            cf = np.zeros(lo.shape[1], dtype=bool)
        return up, low, bad[obj], ct, cf, grad[obj] if with_grad else None

    def reduce_monotone(lo, hi, g, ok):
        """Collapse axes where the objective is certainly monotone."""
        changed = np.zeros(lo.shape[1], dtype=bool)
        if g is None:
            return changed
        sup = prog.support[obj]
        glo, ghi = g
        inc = (glo >= 0) & ok[None, :]
        dec = (ghi <= 0) & ok[None, :] & ~inc
        L, H = lo[sup], hi[sup]
        w = H > L
        ci = inc & w
        cd = dec & w
        lo[sup] = np.where(ci, H, L)
        hi[sup] = np.where(cd, L, H)
        changed |= (ci | cd).any(axis=0)
        return changed

    def midpoints(lo, hi):
        return np.where(hi > lo, 0.5 * lo + 0.5 * hi, lo)

    best_lower = -np.inf
    best_point = None
    heap: list = []
    seq = 0
    status = "converged"
    # variables that do not influence the objective only matter through the guard
    if not use_guard:
        mid = midpoints(dlo, dhi)
        dlo = np.where(free_axes, mid, dlo)
        dhi = np.where(free_axes, mid, dhi)

    pending_lo = dlo[:, None].copy()
    pending_hi = dhi[:, None].copy()
    splits = 0
    while True:
        # evaluate pending boxes (with midpoints), refine monotone ones
        for _round in range(3):
            B = pending_lo.shape[1]
            if B == 0:
                break
            mlo = midpoints(pending_lo, pending_hi)
            alllo = np.concatenate([pending_lo, mlo], axis=1)
            allhi = np.concatenate([pending_hi, mlo], axis=1)
            up, low, bad, ct, cf, g = evaluate(alllo, allhi, cfg.monotonicity)
            pu, pbad, pct, pcf = up[:B], bad[:B], ct[:B], cf[:B]
            mlow, mbad, mcf = low[B:], bad[B:], cf[B:]
            cert = ~mbad & ~mcf
            if cert.any():
                i = int(np.argmax(np.where(cert, mlow, -np.inf)))
                if mlow[i] > best_lower:
                    best_lower = float(mlow[i])
                    best_point = mlo[:, i].copy()
            width = pending_hi - pending_lo
            # domain violations that cannot be split further
            tiny = pbad & (width.max(axis=0, initial=0.0) < 1e-12)
            if tiny.any():
                return OptResult(np.inf, best_lower, queries, 0, "domain-violation")
            changed = np.zeros(B, dtype=bool)
            if cfg.monotonicity and g is not None and _round < 2:
                gsl = (g[0][:, :B], g[1][:, :B])
                ok = ~pbad & (~pcf)
                changed = reduce_monotone(pending_lo, pending_hi, gsl, ok)
            keep = (pu > best_lower) & pct & ~changed
            for j in np.flatnonzero(keep):
                seq += 1
                heapq.heappush(heap, (-float(pu[j]), seq, pending_lo[:, j].copy(), pending_hi[:, j].copy()))
            # re-evaluate boxes that shrank
            sel = np.flatnonzero(changed & pct)
            pending_lo, pending_hi = pending_lo[:, sel], pending_hi[:, sel]
        else:
            # boxes still changing after the last round: keep them
            for j in range(pending_lo.shape[1]):
                seq += 1
                heapq.heappush(heap, (-np.inf, seq, pending_lo[:, j].copy(), pending_hi[:, j].copy()))

        # drop dominated boxes
        while heap and -heap[0][0] <= best_lower:
            heap = [h for h in heap if -h[0] > best_lower]
            heapq.heapify(heap)
        if not heap:
            break
        top = -heap[0][0]
        gap = top - best_lower
        converged = gap <= cfg.tolerance * max(abs(top), abs(best_lower)) or gap <= cfg.abs_tolerance
        if converged and np.isfinite(best_lower) and np.isfinite(top):
            break
        if splits >= cfg.max_subdivisions or time.perf_counter() - t0 > cfg.timeout:
            status = "budget-exhausted"
            break
        # split the best boxes on their widest axis
        kids_lo, kids_hi = [], []
        stuck = []
        for _ in range(min(cfg.batch, len(heap))):
            negu, s, blo, bhi = heapq.heappop(heap)
            w = bhi - blo
            ax = int(np.argmax(w))
            if w[ax] <= 0:
                stuck.append((negu, s, blo, bhi))
                continue
            m = 0.5 * blo[ax] + 0.5 * bhi[ax]
            m = min(max(m, blo[ax]), bhi[ax])
            l1, h1 = blo.copy(), bhi.copy()
            h1[ax] = m
            l2, h2 = blo.copy(), bhi.copy()
            l2[ax] = m
            kids_lo += [l1, l2]
            kids_hi += [h1, h2]
            splits += 1
        for item in stuck:
            heapq.heappush(heap, item)
        if not kids_lo:
            # only degenerate boxes remain; their point enclosures are final
            break
        pending_lo = np.stack(kids_lo, axis=1)
        pending_hi = np.stack(kids_hi, axis=1)

    upper = max(-heap[0][0], best_lower) if heap else best_lower
    if not heap and best_lower == -np.inf:
        upper = -np.inf  # empty feasible set
    argmax = None if best_point is None else dict(zip(varnames, best_point.tolist()))
    return OptResult(float(upper), float(best_lower), queries, 0, status, argmax)


def range_of(e: SymExpr, domain, cfg: OptConfig | None = None, guard=P.TRUE) -> Interval:
    """Enclosure [-max(-e), max(e)] of e over the domain."""
    if e.is_const:
        lo, hi = coeff_interval(e.const_value)
        return Interval(lo, hi)
    up = maximize_upper(e, domain, guard, cfg)
    dn = maximize_upper(-e, domain, guard, cfg)
    for r in (up, dn):
        if r.status == "domain-violation":
            raise DomainViolation("range", e.key[:200])
    return Interval(-dn.upper_bound, up.upper_bound)


def min_abs_lower(e: SymExpr, domain, cfg: OptConfig | None = None) -> float:
    """Sound lower bound on min |e| over the domain (0 if the range meets 0)."""
    r = range_of(e, domain, cfg)
    if r.lo <= 0 <= r.hi:
        return 0.0
    res = maximize_upper(-sym_abs(e), domain, P.TRUE, cfg)
    if res.status == "domain-violation":
        raise DomainViolation("min_abs_lower", e.key[:200])
    return max(0.0, -res.upper_bound)


def interval_eval(e: SymExpr, domain: Mapping[str, Interval]) -> Interval:
    """Single interval evaluation of a SymExpr over a box (no subdivision)."""
    varnames = sorted(e.variables())
    prog = Program(varnames, want_grad=False)
    r = prog.reg_expr(e)
    lo = np.array([[domain[v].lo] for v in varnames]).reshape(len(varnames), 1)
    hi = np.array([[domain[v].hi] for v in varnames]).reshape(len(varnames), 1)
    vlo, vhi, bad, _ = prog.run(lo, hi)
    if bad[r][0]:
        raise DomainViolation("eval", e.key[:200])
    return Interval(float(vlo[r][0]), float(vhi[r][0]))
