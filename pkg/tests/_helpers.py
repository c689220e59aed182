"""Small instance builders shared by the test modules."""

import numpy as np

from evdro.model import CityModel, FleetState, TransitionKernel
from evdro.uncertainty import MomentUncertaintySet


def line_city(N=2, sigma=(0,), horizon=1, limit=10.0, **kw):
    """Regions on a line with unit spacing; costs are distances."""
    pos = np.arange(N, dtype=float)
    W = np.abs(pos[:, None] - pos[None])
    return CityModel(n_regions=N, horizon=horizon, charging_regions=sigma, vacant_cost=W, lowbatt_cost=W.copy(),
                     move_limit_vacant=limit, move_limit_lowbatt=limit, **kw)


def random_kernel(rng, N, K=1):
    """Row-stochastic kernel stacks with all five blocks populated."""
    vac = rng.dirichlet(np.ones(3 * N), size=(K, N))
    occ = rng.dirichlet(np.ones(2 * N), size=(K, N))
    return TransitionKernel(vac[..., :N], vac[..., N:2 * N], vac[..., 2 * N:], occ[..., :N], occ[..., N:])


def random_instance(seed, N=3, tau=2, omega=0.3, gamma=1.5, fleet=40):
    """City, kernel, state and two moment sets for a small balancing problem."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 5, size=(N, 2))
    W = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    n_sig = max(1, N // 2)
    sigma = tuple(sorted(rng.choice(N, size=n_sig, replace=False).tolist()))
    city = CityModel(n_regions=N, horizon=tau, charging_regions=sigma, vacant_cost=W, lowbatt_cost=W.copy(),
                     move_limit_vacant=10.0, move_limit_lowbatt=10.0)
    kernel = random_kernel(rng, N, K=tau)
    share = rng.dirichlet(np.ones(N) * 2)
    V = np.round(share * fleet * 0.6)
    O = np.round(share * fleet * 0.3)
    L = np.round(rng.dirichlet(np.ones(N)) * fleet * 0.1) + 1.0
    state = FleetState(V, O, L, np.zeros(N))
    d = N * tau
    G = rng.standard_normal((d, d))
    r_hat = rng.uniform(2, 8, size=d)
    c_hat = rng.uniform(0.5, 2, size=d)
    dset = MomentUncertaintySet(r_hat, G @ G.T / d + 0.5 * np.eye(d), omega, gamma)
    G = rng.standard_normal((d, d))
    cset = MomentUncertaintySet(c_hat, 0.2 * (G @ G.T / d + 0.5 * np.eye(d)), omega, gamma)
    return city, kernel, state, dset, cset
