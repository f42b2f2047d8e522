"""Consumer value models.

A :class:`ValueModel` describes the joint law of the value vector ``v`` over
``[0, v_max]^N``. Besides sampling it answers the handful of integrals the
market code needs in closed form or by piecewise Gauss-Legendre quadrature:
the expected best net surplus for a subset of firms, each firm's sales and
gross value under price competition, and joint tail quantities.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .distributions import Reflected, TypeDistribution, distribution_from_dict
from .quadrature import (Integrator, chunks, exact_order, gauss_legendre, midpoints,
                         warn_fallback)

MODES = ("independent", "comonotone", "antithetic", "sampler")
TIE_TOL = 1e-12


def mask_members(mask: int, n: int) -> list[int]:
    return [i for i in range(n) if (mask >> i) & 1]


def _nodes(breaks: np.ndarray, order: int,
           clustered: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on each piece of each row.

    With ``clustered`` the rule is mapped through ``lo + h * y**2``, which
    turns algebraic endpoint behaviour ``(v - lo) ** (k / 2)`` into a
    polynomial in ``y``. Power-law CDFs only lose smoothness at the left end
    of a piece, so this keeps fixed-order rules accurate there.
    """
    z, w = gauss_legendre(order)
    lo = breaks[:, :-1, None]
    width = breaks[:, 1:, None] - lo
    if not clustered:
        return lo + width * (z + 1.0) / 2.0, width * w / 2.0
    y = (z + 1.0) / 2.0
    return lo + width * y**2, width * y * w


def _sorted_breaks(parts: list[np.ndarray], lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Row-wise sorted breakpoints clipped to ``[lo, hi]``; parts are (M, k)."""
    b = np.concatenate([lo[:, None], hi[:, None]] + parts, axis=1)
    b = np.clip(b, lo[:, None], np.maximum(hi, lo)[:, None])
    return np.sort(b, axis=1)


@dataclass(frozen=True)
class ValueModel:
    mode: str
    dimension: int
    marginals: tuple[TypeDistribution, ...]
    v_max: float
    sampler_fn: Callable[[np.random.Generator, int], np.ndarray] | None = field(
        default=None, compare=False)
    sampler_draws: int = 100_000
    sampler_seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"value mode must be one of {MODES}, got {self.mode!r}")
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        if self.mode == "antithetic" and self.dimension != 2:
            raise ValueError("antithetic values need exactly two firms")
        if self.mode == "independent" and len(self.marginals) != self.dimension:
            raise ValueError("independent mode needs one marginal per firm")
        if self.mode in ("comonotone", "antithetic") and len(self.marginals) != 1:
            raise ValueError(f"{self.mode} mode takes one common marginal")
        if self.mode == "sampler" and self.sampler_fn is None:
            raise ValueError("sampler mode requires a sampling function")
        for m in self.marginals:
            if m.upper > self.v_max + 1e-12:
                raise ValueError("marginal support exceeds v_max")

    @classmethod
    def independent(cls, marginals: Sequence[TypeDistribution], v_max: float | None = None):
        marginals = tuple(marginals)
        vm = max(m.upper for m in marginals) if v_max is None else float(v_max)
        return cls("independent", len(marginals), marginals, vm)

    @classmethod
    def comonotone(cls, marginal: TypeDistribution, n: int, v_max: float | None = None):
        return cls("comonotone", n, (marginal,), marginal.upper if v_max is None else float(v_max))

    @classmethod
    def antithetic(cls, marginal: TypeDistribution, v_max: float | None = None):
        """v_2 = v_max - v_1 with v_1 drawn from ``marginal``."""
        return cls("antithetic", 2, (marginal,), marginal.upper if v_max is None else float(v_max))

    @classmethod
    def from_sampler(cls, fn, n: int, v_max: float, draws: int = 100_000, seed: int = 0):
        return cls("sampler", n, (), float(v_max), fn, draws, seed)

    # ------------------------------------------------------------------ basics
    @functools.cached_property
    def _draws(self) -> np.ndarray:
        v = np.asarray(self.sampler_fn(np.random.default_rng(self.sampler_seed), self.sampler_draws),
                       dtype=float)
        if v.shape != (self.sampler_draws, self.dimension):
            raise ValueError("sampler returned an array of the wrong shape")
        if np.any(v < 0) or np.any(v > self.v_max):
            raise ValueError("sampler produced values outside [0, v_max]")
        v.setflags(write=False)
        return v

    def marginal(self, i: int) -> TypeDistribution | None:
        if self.mode == "independent":
            return self.marginals[i]
        if self.mode == "comonotone":
            return self.marginals[0]
        if self.mode == "antithetic":
            return self.marginals[0] if i == 0 else Reflected(self.marginals[0], self.v_max)
        return None

    def survival(self, i: int, p):
        m = self.marginal(i)
        if m is not None:
            return m.survival(p)
        p = np.asarray(p, dtype=float)
        return np.mean(self._draws[:, i] >= p[..., None], axis=-1)

    def partial_moment(self, i: int, p):
        """E[v_i 1{v_i >= p}]."""
        m = self.marginal(i)
        if m is not None:
            return m.partial_moment(p)
        p = np.asarray(p, dtype=float)
        col = self._draws[:, i]
        return np.mean(np.where(col >= p[..., None], col, 0.0), axis=-1)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.mode == "independent":
            return np.column_stack([m.sample(rng, size) for m in self.marginals])
        if self.mode == "comonotone":
            v = self.marginals[0].sample(rng, size)
            return np.repeat(v[:, None], self.dimension, axis=1)
        if self.mode == "antithetic":
            v = self.marginals[0].sample(rng, size)
            return np.column_stack([v, self.v_max - v])
        return np.asarray(self.sampler_fn(rng, size), dtype=float)

    def quadrature_points(self, nodes: int) -> tuple[np.ndarray, np.ndarray] | None:
        """Tensor midpoint rule in quantile coordinates, if supported."""
        u = midpoints(nodes)
        if self.mode == "independent" and self.dimension <= 2:
            axes = [m.quantile(u) for m in self.marginals]
            grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.dimension)
            return grid, np.full(len(grid), 1.0 / len(grid))
        if self.mode == "comonotone":
            v = self.marginals[0].quantile(u)
            return np.repeat(v[:, None], self.dimension, axis=1), np.full(nodes, 1.0 / nodes)
        if self.mode == "antithetic":
            v = self.marginals[0].quantile(u)
            return np.column_stack([v, self.v_max - v]), np.full(nodes, 1.0 / nodes)
        return None

    # --------------------------------------------------------------- surplus
    def _rows(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.dimension:
            raise ValueError(f"offsets must have {self.dimension} columns")
        return x, single

    def max_surplus(self, x, mask: int, order: int = 24):
        """E[max_{i in mask} (v_i - x_i)^+] for each row of ``x``."""
        x, single = self._rows(x)
        members = mask_members(mask, self.dimension)
        if not members:
            out = np.zeros(len(x))
        elif self.mode == "independent":
            out = self._indep_surplus(x, members, order)
        elif self.mode == "sampler":
            out = self._sampled(x, members)[0]
        else:
            a, b = self.shares(x, mask, order)
            out = np.sum(b - x * a, axis=1)
        return out[0] if single else out

    def shares(self, x, mask: int, order: int = 24):
        """Expected sales and gross value per firm under price competition.

        Returns ``(sales, gross)`` of shape (M, N): ``sales[:, i]`` is the mass
        of consumers buying from firm i when only the firms in ``mask`` are
        active and post offsets ``x``; ``gross[:, i]`` is the value those
        consumers receive. Ties are split equally.
        """
        x, single = self._rows(x)
        members = mask_members(mask, self.dimension)
        a = np.zeros_like(x)
        b = np.zeros_like(x)
        if members:
            if self.mode == "independent":
                self._indep_shares(x, members, order, a, b)
            elif self.mode == "comonotone":
                self._comonotone_shares(x, members, a, b)
            elif self.mode == "antithetic":
                self._antithetic_shares(x, members, a, b)
            else:
                _, a, b = self._sampled(x, members)
        return (a[0], b[0]) if single else (a, b)

    def shares_by_mask(self, x, masks, order: int = 24):
        """Like :meth:`shares` with a per-row active set."""
        x, _ = self._rows(x)
        masks = np.asarray(masks, dtype=np.int64)
        a = np.zeros_like(x)
        b = np.zeros_like(x)
        for m in np.unique(masks):
            rows = masks == m
            if m == 0:
                continue
            a[rows], b[rows] = self.shares(x[rows], int(m), order)
        return a, b

    def _indep_surplus(self, x, members, order):
        margs = [self.marginals[i] for i in members]
        xs = x[:, members]
        if len(members) == 1:
            m, xi = margs[0], xs[:, 0]
            return m.partial_moment(xi) - xi * m.survival(xi)
        highs = np.array([m.upper for m in margs])
        top = np.max(np.maximum(highs - xs, 0.0), axis=1)
        cand = [m.breakpoints[None, :] - xs[:, j:j + 1] for j, m in enumerate(margs)]
        breaks = _sorted_breaks(cand, np.zeros(len(x)), top)
        degs = [m.poly_degree for m in margs]
        deg = None if any(d is None for d in degs) else sum(degs)
        t, w = _nodes(breaks, exact_order(deg, order), clustered=deg is None)
        prod = np.ones_like(t)
        for j, m in enumerate(margs):
            prod *= m.cdf(xs[:, j, None, None] + t)
        return np.sum((1.0 - prod) * w, axis=(1, 2))

    def _indep_shares(self, x, members, order, a, b):
        for i in members:
            mi = self.marginals[i]
            xi = x[:, i]
            others = [j for j in members if j != i]
            if not others:
                a[:, i] = mi.survival(xi)
                b[:, i] = mi.partial_moment(xi)
                continue
            lo = np.maximum(xi, mi.lower)
            hi = np.full(len(x), mi.upper)
            shift = {j: xi - x[:, j] for j in others}
            cand = [np.broadcast_to(mi.breakpoints, (len(x), len(mi.breakpoints)))]
            cand += [self.marginals[j].breakpoints[None, :] + shift[j][:, None] for j in others]
            breaks = _sorted_breaks(cand, lo, hi)
            if mi.singular_density:
                u, w = _nodes(mi.cdf(breaks), order, clustered=True)
                v = mi.quantile(u)
                dens = 1.0
            else:
                degs = [mi.poly_degree] + [self.marginals[j].poly_degree for j in others]
                deg = None if any(d is None for d in degs) else sum(degs)
                v, w = _nodes(breaks, exact_order(deg, order), clustered=deg is None)
                dens = mi.pdf(v)
            prod = np.ones_like(v) * dens
            for j in others:
                prod = prod * self.marginals[j].cdf(v - shift[j][:, None, None])
            a[:, i] = np.sum(prod * w, axis=(1, 2))
            b[:, i] = np.sum(prod * v * w, axis=(1, 2))

    def _comonotone_shares(self, x, members, a, b):
        m = self.marginals[0]
        xs = x[:, members]
        low = xs.min(axis=1)
        win = xs <= low[:, None] + TIE_TOL * np.maximum(1.0, np.abs(low[:, None]))
        k = win.sum(axis=1)
        sa = m.survival(low) / k
        sb = m.partial_moment(low) / k
        for c, i in enumerate(members):
            a[:, i] = np.where(win[:, c], sa, 0.0)
            b[:, i] = np.where(win[:, c], sb, 0.0)

    def _antithetic_shares(self, x, members, a, b):
        m, total = self.marginals[0], self.v_max
        mean = m.mean

        def below(p):  # (P(v <= p), E[v 1{v <= p}])
            return m.cdf(p), mean - m.partial_moment(p)

        if members == [0]:
            a[:, 0], b[:, 0] = m.survival(x[:, 0]), m.partial_moment(x[:, 0])
            return
        if members == [1]:
            cut = total - x[:, 1]
        else:
            mid = (total + x[:, 0] - x[:, 1]) / 2.0
            p1 = np.maximum(x[:, 0], mid)
            a[:, 0], b[:, 0] = m.survival(p1), m.partial_moment(p1)
            cut = np.minimum(total - x[:, 1], mid)
        prob, part = below(cut)
        a[:, 1] = prob
        b[:, 1] = total * prob - part

    def _sampled(self, x, members, block: int = 4_000_000):
        v = self._draws
        n_draw = len(v)
        surplus = np.zeros(len(x))
        a = np.zeros_like(x)
        b = np.zeros_like(x)
        step = max(1, block // (n_draw * len(members)))
        vm = v[:, members]
        for sl in chunks(len(x), step):
            net = vm[None, :, :] - x[sl, None, :][:, :, members]
            best = net.max(axis=2)
            surplus[sl] = np.mean(np.maximum(best, 0.0), axis=1)
            win = (net >= best[:, :, None] - TIE_TOL) & (net >= 0)
            share = win / np.maximum(win.sum(axis=2, keepdims=True), 1)
            a[sl, members] = share.mean(axis=1)
            b[sl, members] = np.mean(share * vm[None], axis=1)
        return surplus, a, b

    # ------------------------------------------------------- joint tails
    def joint_survival(self, p):
        """P(v_j >= p for every j)."""
        p = np.asarray(p, dtype=float)
        if self.mode == "independent":
            out = np.ones_like(p)
            for m in self.marginals:
                out = out * m.survival(p)
            return out
        if self.mode == "comonotone":
            return self.marginals[0].survival(p)
        if self.mode == "antithetic":
            m = self.marginals[0]
            return np.maximum(m.cdf(self.v_max - p) - m.cdf(p), 0.0)
        return np.mean(np.all(self._draws >= p[..., None, None], axis=-1), axis=-1)

    def joint_partial(self, p):
        """E[v_i 1{v_j >= p for every j}] stacked along the last axis."""
        p = np.asarray(p, dtype=float)
        if self.mode == "independent":
            return self._indep_joint_partial(p)
        if self.mode == "comonotone":
            val = self.marginals[0].partial_moment(p)
            return np.repeat(val[..., None], self.dimension, axis=-1)
        if self.mode == "antithetic":
            m = self.marginals[0]
            hi = self.v_max - p
            prob = np.maximum(m.cdf(hi) - m.cdf(p), 0.0)
            first = np.where(hi > p, m.partial_moment(p) - m.partial_moment(hi), 0.0)
            return np.stack([first, self.v_max * prob - first], axis=-1)
        ok = np.all(self._draws >= p[..., None, None], axis=-1)
        return np.mean(ok[..., None] * self._draws, axis=-2)

    def _indep_joint_partial(self, p):
        surv = np.stack([m.survival(p) for m in self.marginals], axis=-1)
        part = np.stack([m.partial_moment(p) for m in self.marginals], axis=-1)
        out = np.empty_like(part)
        for i in range(self.dimension):
            rest = np.prod(np.delete(surv, i, axis=-1), axis=-1)
            out[..., i] = part[..., i] * rest
        return out

    def to_dict(self) -> dict[str, Any]:
        if self.mode == "sampler":
            raise ValueError("sampler value models are not serializable")
        params: dict[str, Any]
        if self.mode == "independent":
            params = {"marginals": [m.to_dict() for m in self.marginals]}
        else:
            params = {"marginal": self.marginals[0].to_dict()}
        return {"mode": self.mode, "params": params, "v_max": self.v_max}


def value_model_from_dict(spec: Mapping[str, Any], n: int) -> ValueModel:
    mode = spec.get("mode", "independent")
    params = spec.get("params", {})
    v_max = spec.get("v_max")
    if mode == "independent":
        margs = params.get("marginals")
        if margs is None:
            margs = [params["marginal"]] * n
        if len(margs) != n:
            raise ValueError(f"expected {n} marginals, got {len(margs)}")
        return ValueModel.independent([distribution_from_dict(m) for m in margs], v_max)
    if mode == "comonotone":
        return ValueModel.comonotone(distribution_from_dict(params["marginal"]), n, v_max)
    if mode == "antithetic":
        if n != 2:
            raise ValueError("antithetic values need exactly two firms")
        return ValueModel.antithetic(distribution_from_dict(params["marginal"]), v_max)
    if mode == "sampler":
        raise ValueError("sampler mode is only available programmatically")
    raise ValueError(f"unknown value mode {mode!r}")


def expect_with_error(model: ValueModel, integrand: Callable[[np.ndarray], np.ndarray],
                      integrator: Integrator = Integrator(), chunk: int = 1 << 20):
    """Return ``(estimate, standard_error)``; the error is 0 for quadrature."""
    if integrator.method != "monte-carlo":
        pts = model.quadrature_points(integrator.nodes)
        if pts is not None:
            grid, w = pts
            total = 0.0
            for sl in chunks(len(grid), chunk):
                total += float(np.dot(w[sl], integrand(grid[sl])))
            return total, 0.0
        if integrator.method == "quadrature":
            warn_fallback(f"no tensor rule for {model.mode} values in dimension {model.dimension}")
    rng = np.random.default_rng(integrator.seed)
    vals = np.asarray(integrand(model.sample(rng, integrator.draws)), dtype=float)
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals)))


def expect(model: ValueModel, integrand, integrator: Integrator = Integrator()) -> float:
    """Expectation of ``integrand(v)`` under the value model."""
    return expect_with_error(model, integrand, integrator)[0]


def expect_max_surplus(model: ValueModel, offsets, subset, integrator: Integrator = Integrator()):
    """E[max_{i in subset} (v_i - offsets_i)^+]; ``subset`` holds 0-based indices."""
    mask = 0
    for i in subset:
        mask |= 1 << int(i)
    return model.max_surplus(offsets, mask, integrator.order)
