"""Seeded synthetic bank panels with known, nonlinear target dynamics.

Macro indicators follow a stationary AR(1). Every bank has a latent risk
sensitivity ``k`` in [0, 1] that shows up in its RW density. Over each year
the growth rates, cost of risk and RW density respond to a common stress
index built from the target-year macro values, with responses that are
products of ``k`` and saturating / threshold functions of the stress. Capital
follows the annual roll-forward exactly (plus small noise), so projected and
actual CAR live on the same accounting identity.
"""

from __future__ import annotations

import numpy as np

from .panel import HORIZON, MACRO_NAMES, BankQuarter, MacroQuarter, Quarter

# stationary means and quarterly AR(1) innovation sd of each macro series
_MACRO_MEAN = dict(gdp=0.02, export=0.03, govcredit=0.04, debt=0.9, govexp=0.02, inflat=0.02,
                   rre=0.03, unr=0.065, yield10y=0.03, stocks=0.05)
_MACRO_SD = dict(gdp=0.025, export=0.05, govcredit=0.03, debt=0.05, govexp=0.02, inflat=0.01,
                 rre=0.05, unr=0.02, yield10y=0.01, stocks=0.15)


def macro_path(n_quarters: int, rng, start: Quarter = Quarter(2010, 1), rho: float = 0.3):
    """Common macro series; gdp and unemployment share one business-cycle factor."""
    cycle = np.zeros(n_quarters)
    idio = np.zeros((n_quarters, len(MACRO_NAMES)))
    c = rng.standard_normal()
    z = rng.standard_normal(len(MACRO_NAMES))
    for q in range(n_quarters):
        c = rho * c + np.sqrt(1 - rho ** 2) * rng.standard_normal()
        z = rho * z + np.sqrt(1 - rho ** 2) * rng.standard_normal(len(MACRO_NAMES))
        cycle[q] = c
        idio[q] = z
    out = {}
    for q in range(n_quarters):
        vals = {}
        for j, name in enumerate(MACRO_NAMES):
            shock = idio[q, j]
            if name == "gdp":
                shock = 0.8 * cycle[q] + 0.6 * shock
            elif name == "unr":
                shock = -0.8 * cycle[q] + 0.6 * shock
            vals[name] = _MACRO_MEAN[name] + _MACRO_SD[name] * shock
        vals["unr"] = float(np.clip(vals["unr"], 0.02, 0.25))
        quarter = start.shift(q)
        out[quarter] = MacroQuarter(quarter, **vals)
    return out


def stress_index(m: MacroQuarter) -> float:
    """Standardised downturn measure (positive = stress)."""
    return 0.5 * (-(m.gdp - _MACRO_MEAN["gdp"]) / _MACRO_SD["gdp"]
                  + (m.unr - _MACRO_MEAN["unr"]) / _MACRO_SD["unr"])


def annual_targets(k, d0, l0, mu, m: MacroQuarter, rng, noise: float = 1.0) -> dict:
    """True one-year responses to target-year macro ``m``.

    ``k`` is the bank's risk sensitivity, ``d0`` / ``l0`` its baseline RW
    density and loss rate and ``mu`` its trend balance-sheet growth.
    """
    s = stress_index(m)
    n = np.shape(k)
    e = lambda sd: noise * sd * rng.standard_normal(n)  # noqa: E731
    up = np.maximum(s, 0.0)
    swing = np.tanh(1.5 * s)
    g_loan = mu + 0.005 - 0.2 * k * swing + e(0.01)
    g_asset = mu - 0.16 * k * swing + e(0.008)
    g_easset = g_asset - 0.01 * k * up + e(0.004)
    g_dep = mu - 0.005 + 0.05 * (1 - k) * np.tanh(s) + e(0.008)
    density = d0 * (1.0 + 0.2 * k * up ** 2 / (1.0 + up)) + e(0.004)
    cost = l0 * (1.0 + 1.5 * k * up ** 2 / (1.0 + up)) + e(0.0005)
    yea = 0.04 + 0.6 * (m.yield10y - _MACRO_MEAN["yield10y"]) + 0.01 * k + e(0.001)
    cfd = 0.008 + 0.4 * (m.yield10y - _MACRO_MEAN["yield10y"]) + 0.003 * np.abs(swing) + e(0.0005)
    nfia = 0.005 + 0.004 * np.tanh(m.stocks / 0.15) * (1 - k) + e(0.0005)
    return dict(g_loan=g_loan, g_asset=g_asset, g_easset=g_easset, g_dep=g_dep,
                density=np.clip(density, 0.05, 4.5), cost=np.maximum(cost, 0.0), yea=yea,
                cfd=np.maximum(cfd, 0.0), nfia=nfia)


def synthetic_panel(n_banks: int = 300, n_quarters: int = 24, seed: int = 0,
                    start: Quarter = Quarter(2010, 1), failed_banks: int = 0,
                    capital_noise: float = 0.0005, target_noise: float = 1.0):
    """Generate ``(records, macro)`` for a synthetic panel.

    Balances evolve year over year (quarter q from quarter q - 4); the first
    four quarters seed four interleaved annual chains. Bank ids are
    ``B0000``... and ``failed_banks`` extra banks are flagged as failed.
    Asset sizes are log-uniform between 1e8 and 1e12 so that a share of
    banks exceeds the 200bn large-bank threshold. Each bank draws a trend
    growth ``mu`` uniform on [-0.05, 0.25] and a risk sensitivity ``k``;
    responses to the macro stress index are nonlinear (tanh and convex
    loss terms) and scale with ``k``.
    """
    if n_quarters < HORIZON + 1:
        raise ValueError("need more than one year of quarters")
    rng = np.random.default_rng(seed)
    macro = macro_path(n_quarters, rng, start)
    quarters = [start.shift(q) for q in range(n_quarters)]
    nb = n_banks + failed_banks
    k = rng.uniform(0.0, 1.0, nb)
    d0 = 0.35 + 0.55 * k
    l0 = rng.uniform(0.005, 0.02, nb) * (1.0 + k)
    mu = rng.uniform(-0.05, 0.25, nb)
    assets0 = 10.0 ** rng.uniform(8.0, 12.0, nb)
    loan_share = rng.uniform(0.5, 0.75, nb)
    ea_share = rng.uniform(0.85, 0.95, nb)
    dep_share = rng.uniform(0.7, 0.85, nb)
    car0 = rng.uniform(0.10, 0.20, nb)

    A = np.zeros((n_quarters, nb))
    L = np.zeros_like(A)
    EA = np.zeros_like(A)
    D = np.zeros_like(A)
    dens = np.zeros_like(A)
    cost = np.zeros_like(A)
    yea = np.zeros_like(A)
    cfd = np.zeros_like(A)
    nfia = np.zeros_like(A)
    cap = np.zeros_like(A)
    for q in range(n_quarters):
        if q < HORIZON:
            drift = (1.0 + 0.01 * rng.standard_normal(nb)) * (1.0 + 0.008) ** q
            A[q] = assets0 * drift
            L[q] = A[q] * loan_share
            EA[q] = A[q] * ea_share
            D[q] = A[q] * dep_share
            t = annual_targets(k, d0, l0, mu, macro[quarters[q]], rng, target_noise)
            dens[q], cost[q], yea[q], cfd[q], nfia[q] = t["density"], t["cost"], t["yea"], t["cfd"], t["nfia"]
            cap[q] = car0 * dens[q] * A[q]
            continue
        p = q - HORIZON
        t = annual_targets(k, d0, l0, mu, macro[quarters[q]], rng, target_noise)
        A[q] = A[p] * (1.0 + t["g_asset"])
        L[q] = L[p] * (1.0 + t["g_loan"])
        EA[q] = EA[p] * (1.0 + t["g_easset"])
        D[q] = D[p] * (1.0 + t["g_dep"])
        dens[q], cost[q], yea[q], cfd[q], nfia[q] = t["density"], t["cost"], t["yea"], t["cfd"], t["nfia"]
        cap[q] = (cap[p] + yea[q] * EA[p] - cost[q] * L[p] + nfia[q] * A[p] - cfd[q] * D[p]
                  + capital_noise * A[p] * rng.standard_normal(nb))
    # keep capital inside the domain invariants (non-negative CAR)
    cap = np.maximum(cap, 0.0)
    rwa = dens * A

    records = []
    for i in range(nb):
        bank = f"B{i:04d}"
        failed = i >= n_banks
        for q, quarter in enumerate(quarters):
            records.append(BankQuarter(
                bank_id=bank, quarter=quarter,
                net_loans=float(L[q, i] * (1.0 - cost[q, i])),
                deposits_total=float(D[q, i]), deposits_domestic=float(0.9 * D[q, i]),
                assets_avg=float(A[q, i]), earning_assets_avg=float(EA[q, i]),
                equity_avg=float(cap[q, i]), loans_avg=float(L[q, i]),
                cfd=float(cfd[q, i]), yea=float(yea[q, i]), nfia=float(nfia[q, i]),
                rw_density=float(dens[q, i]), loss_loan=float(cost[q, i]),
                rwa_total=float(rwa[q, i]), car=float(cap[q, i] / rwa[q, i]), failed=failed,
            ))
    return records, macro
