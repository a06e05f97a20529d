"""Analytic gradients against central finite differences in float64.

Each configuration draws a random chain  fetch -> kernel -> decoders ->
compositing -> MSE  and checks sampled entries of every parameter tensor.
"""

import time

import numpy as np
import pytest

from gpf.features import FetchAggregatorParams, FetchInputs, fetch_backward, fetch_forward
from gpf.kernel import KernelConfig, KernelParameters, kernel_backward, kernel_forward
from gpf.render import composite, composite_backward, mse_loss, sample_deltas

N_CONFIGS = 100
TOL = 1e-4


def rel_err(fd, an):
    return abs(fd - an) / max(abs(fd), abs(an), 1e-7)


def fd_check(loss, perturb, an, h0):
    """Smallest central-difference error over steps h0, h0/10, h0/100.

    ReLU units make the loss piecewise smooth; a step that straddles a kink
    gives a meaningless difference, while a shorter step does not. A wrong
    analytic gradient fails at every step.
    """
    best = np.inf
    for h in (h0, h0 / 10, h0 / 100):
        best = min(best, rel_err((loss(perturb(h)) - loss(perturb(-h))) / (2 * h), an))
        if best < TOL:
            break
    return best


def _random_frame(g):
    q, _ = np.linalg.qr(g.normal(size=(3, 3)))
    return q * np.sign(np.linalg.det(q)), g.normal(size=3)


class Chain:
    """A random small problem: R rays x S samples, each with K neighbors among U points."""

    def __init__(self, seed, aggregator, fetch):
        g = np.random.default_rng(seed)
        self.aggregator, self.fetch = aggregator, fetch
        self.R, self.S, self.K = 3, 4, int(g.integers(1, 5))
        U = 10
        self.cfg = KernelConfig(k=8, search_radius=0.3, density_unit=0.5, position_scale=2.0)
        w = KernelParameters.init(seed, aggregator).weights
        if fetch:
            w.update(FetchAggregatorParams.init(seed + 1).weights)
        # non-zero biases so every term is exercised
        self.w = {k: v + (0.1 * g.normal(size=v.shape) if ".b" in k else 0.0) for k, v in w.items()}
        k = 3
        self.inp = FetchInputs(np.tile(np.arange(k), (U, 1)), g.random((U, k)) * (g.random((U, k)) > 0.2),
                               g.random((U, k, 3)), g.normal(size=(U, k, 8)), g.normal(size=(U, k, 32)))
        self.features = g.normal(size=(U, 43)) * 0.5
        self.points = g.normal(size=(U, 3)) * 0.2
        M = self.R * self.S
        self.query = g.normal(size=(M, 3)) * 0.2
        self.idx = g.integers(0, U, size=(M, self.K))
        self.mask = g.random((M, self.K)) < 0.8
        self.mask[:, 0] = True
        rot, tr = _random_frame(g)
        self.rot, self.trans = np.broadcast_to(rot, (M, 3, 3)).copy(), np.broadcast_to(tr, (M, 3)).copy()
        self.t = np.sort(g.random((self.R, self.S)) * 2, axis=1)
        self.deltas = sample_deltas(self.t, np.full(self.R, 2.5))
        self.gt = g.random((self.R, 3))

    def forward(self, w):
        fetch_cache = None
        if self.fetch:
            fu, fetch_cache = fetch_forward(w, self.inp)
        else:
            fu = self.features
        sig, col, kc = kernel_forward(w, self.aggregator, self.query, self.points[self.idx], fu[self.idx],
                                      self.mask, self.rot, self.trans, self.cfg)
        sigma = (sig / self.cfg.density_unit).reshape(self.R, self.S)
        rgb, _, _, cc = composite(sigma, col.reshape(self.R, self.S, 3), self.t, self.deltas)
        loss, drgb = mse_loss(rgb, self.gt)
        return loss, (fetch_cache, kc, cc, drgb)

    def loss(self, w):
        return self.forward(w)[0]

    def grads(self):
        _, (fetch_cache, kc, cc, drgb) = self.forward(self.w)
        g = {}
        dsig, dcol = composite_backward(cc, drgb)
        dfeats, _ = kernel_backward(self.w, self.aggregator, kc, dsig.ravel() / self.cfg.density_unit,
                                    dcol.reshape(-1, 3), g)
        if self.fetch:
            dfu = np.zeros((len(self.features), 43))
            np.add.at(dfu, self.idx[self.mask], dfeats[self.mask])
            fetch_backward(self.w, fetch_cache, dfu, g)
        return g


def _check_chain(seed, aggregator, fetch, entries=2):
    ch = Chain(seed, aggregator, fetch)
    g = ch.grads()
    rng = np.random.default_rng(seed + 99)
    worst = 0.0
    assert set(g) == set(ch.w), "every parameter tensor receives a gradient"
    for name, val in ch.w.items():
        for _ in range(entries):
            i = tuple(int(rng.integers(0, s)) for s in val.shape)

            def perturb(h, name=name, i=i, val=val):
                w = dict(ch.w)
                w[name] = val.copy()
                w[name][i] += h
                return w

            e = fd_check(ch.loss, perturb, g[name][i], 1e-4 * max(1.0, abs(val[i])))
            worst = max(worst, e)
            assert e < TOL, (seed, aggregator, fetch, name, i, g[name][i])
    return worst


def test_parameter_gradients_100_configs():
    t0 = time.perf_counter()
    modes = [("learned", False), ("learned", True), ("idw", False), ("idw", True)]
    worst = max(_check_chain(s, *modes[s % 4]) for s in range(N_CONFIGS))
    assert worst < TOL
    assert time.perf_counter() - t0 < 120


@pytest.mark.parametrize("aggregator", ["learned", "idw"])
def test_point_feature_and_position_gradients(aggregator):
    """Per-point feature and position gradients through the full ray pipeline."""
    from gpf.depth import DepthEstimationConfig
    from gpf.render import Model, render_backward, render_forward, trace
    from gpf.synth import synth_scene
    from gpf.training import RayPool, build_scene

    s = synth_scene("sphere", 300, 2, 12, seed=1)
    r = s.suggested_radius() * 1.5
    sc = build_scene(s.field, s.views, KernelConfig(search_radius=r), depth_cfg=DepthEstimationConfig(search_radius=r))
    pool = RayPool.from_scene(sc)
    rng = np.random.default_rng(0)
    ids = rng.choice(len(pool), 20, replace=False)
    rays, gt = pool.rays.take(ids), pool.colors[ids]
    m = Model.init(3, aggregator)
    tr = trace(sc, rays, "uni64")
    # random features: an all-zero block puts every decoder ReLU exactly at its kink
    F, P = rng.normal(size=sc.field.features.shape) * 0.5, sc.field.positions.copy()

    def L(feats, pos):
        rgb = render_forward(sc, m, rays, tr, features=feats, positions=pos)[0]
        return mse_loss(rgb, gt)[0]

    rgb, _, _, c = render_forward(sc, m, rays, tr, features=F, positions=P)
    d = mse_loss(rgb, gt)[1]
    u, dfu, dpu = render_backward(sc, m, tr, c, d, {}, need_features=True, need_positions=True)
    assert len(u) > 0
    for _ in range(6):
        j = int(rng.integers(len(u)))
        p, ch, a = u[j], int(rng.integers(43)), int(rng.integers(3))

        def feat(h):
            out = F.copy()
            out[p, ch] += h
            return out

        def pos(h):
            out = P.copy()
            out[p, a] += h
            return out

        assert fd_check(lambda x: L(x, P), feat, dfu[j, ch], 1e-4) < TOL
        assert fd_check(lambda x: L(F, x), pos, dpu[j, a], 1e-4) < TOL
