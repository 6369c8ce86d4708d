"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``criterion N PASS|FAIL`` line (also collected into the
pytest terminal summary). Statistical criteria use the fixed master seed 7.
"""

import os
import subprocess
import sys
import time
from collections import deque

import numpy as np
import pytest

from conftest import (check_conservative_instance, ias_against_oracles, predicted_top_block_error,
                      random_window)
from hetfuse.cf2 import exchange
from hetfuse.cli import accounting_table
from hetfuse.ginfo import marginalize, rel_err
from hetfuse.metrics import (global_min_eig, nees_fraction_in_bounds, rmse_per_agent,
                             table2_topology)
from hetfuse.simnet import build_network, fusion_round, monte_carlo, preset, run_step, simulate_run

MASTER_SEED = 7


def agrees_printed(value, text, step=None):
    """True if ``value`` prints as ``text`` under round-half-up or truncation."""
    shown = float(text)
    if step is None:
        step = 10.0 ** -(len(text.split(".")[1]) if "." in text else 0)
    tol = 1e-9 * step
    return abs(value - shown) <= step / 2 + tol or -tol <= value - shown < step


# -- 1 --------------------------------------------------------------------

# size: CF kilobytes (text, last-digit step), %CF for BDF-CF and HS-CF, states HS vs CF
CHAIN_TABLE = {
    "small": (("2.4", None), "42.7", "9.2", 10, 16),
    "medium": (("801", None), "33.7", "0.25", 14, 104),
    "large": (("24300", 100.0), "33.2", "0.02", 18, 354),
}


def test_chain_accounting_table(criterion):
    with criterion(1, "chain-network communication and complexity table") as info:
        t0 = time.perf_counter()
        tables = {s: accounting_table(table2_topology(s)) for s in CHAIN_TABLE}
        elapsed = time.perf_counter() - t0
        info["seconds"] = f"{elapsed:.3f}"
        bad = []
        for size, ((kb, step), bdf, hs, hs_states, cf_states) in CHAIN_TABLE.items():
            t = tables[size]
            checks = [
                (t["cf"]["kilobytes"], kb, step),
                (t["bdf"]["pct_cf"], bdf, None),
                (t["abdf"]["pct_cf"], hs, None),
                (t["hscf"]["pct_cf"], hs, None),
            ]
            for value, text, st in checks:
                if not agrees_printed(value, text, st):
                    bad.append(f"{size}: {value:.4f} vs {text}")
            if (t["hscf"]["max_local_states"], t["cf"]["max_local_states"]) != (hs_states, cf_states):
                bad.append(f"{size}: states {t['hscf']['max_local_states']}/{t['cf']['max_local_states']}")
        info["cf_bytes"] = "/".join(str(tables[s]["cf"]["bytes"]) for s in CHAIN_TABLE)
        info["mismatches"] = len(bad)
        assert not bad, bad
        assert elapsed < 1.0


# -- 2 --------------------------------------------------------------------

def test_scenario_accounting(criterion):
    with criterion(2, "scenario communication/computation savings") as info:
        t0 = time.perf_counter()
        st = accounting_table(preset("static-5x6").topology)
        dy = accounting_table(preset("dynamic-4x5").topology)
        elapsed = time.perf_counter() - t0
        vals = {
            "static bdf %CF": (st["bdf"]["pct_cf"], "38"),
            "static hscf %CF": (st["hscf"]["pct_cf"], "2.6"),
            "dynamic bdf comm saving": (dy["bdf"]["comm_saving_pct"], "58"),
            "dynamic hscf comm saving": (dy["hscf"]["comm_saving_pct"], "94.5"),
            "dynamic hscf compute saving": (dy["hscf"]["compute_saving_pct"], "87.5"),
        }
        for k, (v, text) in vals.items():
            info[k] = f"{v:.4f}"
        bad = [k for k, (v, text) in vals.items() if not agrees_printed(v, text)]
        assert not bad, bad
        assert elapsed < 1.0


# -- 3 --------------------------------------------------------------------

def hop_distances(edges, src):
    adj = {}
    for a, b in edges:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    dist, queue = {src: 0}, deque([src])
    while queue:
        a = queue.popleft()
        for b in adj.get(a, []):
            if b not in dist:
                dist[b] = dist[a] + 1
                queue.append(b)
    return dist


class DenseBatch:
    """Static full-state batch posterior built directly from the measurement equations.

    Layout: targets 1..T (2 states each) then one 2-state bias per agent in
    ascending id. Contributions are cached cumulatively per agent and step so
    any delayed subset of the data is a sum of prefix totals.
    """

    def __init__(self, cfg, measurements):
        self.cfg = cfg
        agents = sorted(cfg.agents)
        T = cfg.n_targets
        n = 2 * T + 2 * len(agents)
        self.n = n
        self.ids = [f"x{t}" for t in range(1, T + 1)] + [f"s{a}" for a in agents]
        bpos = {a: 2 * T + 2 * r for r, a in enumerate(agents)}
        mean = np.zeros(n)
        var = np.empty(n)
        for t in range(1, T + 1):
            mean[2 * t - 2: 2 * t] = cfg.spacing * np.array([t, 0.5 * t])
            var[2 * t - 2: 2 * t] = cfg.target_var
        for a in agents:
            var[bpos[a]: bpos[a] + 2] = cfg.bias_var
        self.prior_lam = np.diag(1.0 / var)
        self.prior_zeta = mean / var
        self.cum = {}
        for a in agents:
            agent = cfg.agents[a]
            r1, r2 = np.linalg.inv(agent.R1), np.linalg.inv(agent.R2)
            lam = np.zeros((len(measurements) + 1, n, n))
            zeta = np.zeros((len(measurements) + 1, n))
            for s, meas in enumerate(measurements, start=1):
                L, z = lam[s - 1].copy(), zeta[s - 1].copy()
                m = meas[a]
                for t, y in m.targets.items():
                    H = np.zeros((2, n))
                    H[:, 2 * t - 2: 2 * t] = np.eye(2)
                    H[:, bpos[a]: bpos[a] + 2] = np.eye(2)
                    L += H.T @ r1 @ H
                    z += H.T @ r1 @ y
                H = np.zeros((2, n))
                H[:, bpos[a]: bpos[a] + 2] = np.eye(2)
                L += H.T @ r2 @ H
                z += H.T @ r2 @ m.landmark
                lam[s], zeta[s] = L, z
            self.cum[a] = (lam, zeta)

    def posterior(self, observer, step, delayed=True):
        dist = hop_distances(self.cfg.edges, observer)
        lam, zeta = self.prior_lam.copy(), self.prior_zeta.copy()
        for a, (L, z) in self.cum.items():
            last = step - max(dist[a] - 1, 0) if delayed else step
            if last > 0:
                lam += L[last]
                zeta += z[last]
        return lam, zeta


def test_static_exactness(criterion):
    cfg = preset("static-5x6")
    with criterion(3, "static CF/F-CF/BDF-CF equal the centralized batch") as info:
        t0 = time.perf_counter()
        data = simulate_run(cfg, np.random.default_rng(MASTER_SEED))
        oracle = DenseBatch(cfg, data.measurements)
        diameter = max(max(hop_distances(cfg.edges, a).values()) for a in cfg.agents)
        worst = {}
        for method in ("cf", "fcf", "bdf"):
            net = build_network(cfg, method)
            w = 0.0
            for k in range(1, cfg.steps + 1):
                run_step(net, data.measurements[k - 1], k)
                for a, st in net.agents.items():
                    assert [v.id for v in st.local.vars] == oracle.ids
                    lam, zeta = oracle.posterior(a, k)
                    w = max(w, rel_err(st.local.lam, lam), rel_err(st.local.zeta, zeta))
            # once in-flight data has drained every agent holds the full batch
            for _ in range(diameter - 1):
                fusion_round(net)
            for a, st in net.agents.items():
                lam, zeta = oracle.posterior(a, cfg.steps, delayed=False)
                w = max(w, rel_err(st.local.lam, lam), rel_err(st.local.zeta, zeta))
            worst[method] = w
            info[method] = f"{w:.1e}"
        elapsed = time.perf_counter() - t0
        info["seconds"] = f"{elapsed:.1f}"
        assert max(worst.values()) <= 1e-8
        assert elapsed < 10.0


def dense_marginal(lam, zeta, ids, keep):
    pos = {v: 2 * i for i, v in enumerate(ids)}
    k = [pos[v] + d for v in keep for d in (0, 1)]
    o = [i for i in range(len(zeta)) if i not in k]
    gain = lam[np.ix_(k, o)] @ np.linalg.inv(lam[np.ix_(o, o)])
    return lam[np.ix_(k, k)] - gain @ lam[np.ix_(o, k)], zeta[k] - gain @ zeta[o]


def test_static_hs_agents_hold_exact_marginals():
    """Static HS-CF equals the delayed batch posterior marginalized to each task set,
    so its per-agent NEES is exactly chi-square distributed."""
    cfg = preset("static-5x6")
    data = simulate_run(cfg, np.random.default_rng(MASTER_SEED))
    oracle = DenseBatch(cfg, data.measurements)
    net = build_network(cfg, "hscf")
    worst = 0.0
    for k in range(1, cfg.steps + 1):
        run_step(net, data.measurements[k - 1], k)
        for a, st in net.agents.items():
            lam, zeta = dense_marginal(*oracle.posterior(a, k), oracle.ids, [v.id for v in st.local.vars])
            worst = max(worst, rel_err(st.local.lam, lam), rel_err(st.local.zeta, zeta))
    assert worst <= 1e-8


# -- 4 --------------------------------------------------------------------

def hs_agreement(cfg, window, seed):
    """Worst relative disagreements over a run of HS-CF.

    ``edge``: each endpoint's fused marginal for the link (the value fed into its
    channel update) against the independent sum ``m_ij + m_ji - common``.
    ``local``: largest gap between neighbors' local marginals over the link.
    """
    data = simulate_run(cfg, np.random.default_rng(seed))
    net = build_network(cfg, "hscf", window)
    edge = local = 0.0
    for k in range(1, cfg.steps + 1):
        run_step(net, data.measurements[k - 1], k, fuse=False)
        before = {(a, b): ch.common for a, st in net.agents.items() for b, ch in st.channels.items()}
        msgs = exchange(net.agents, k)
        for a, st in net.agents.items():
            for b, ch in st.channels.items():
                expect = msgs[(a, b)].payload + msgs[(b, a)].payload - before[(a, b)]
                edge = max(edge, rel_err(ch.common.lam, expect.lam),
                           rel_err(ch.common.zeta, expect.zeta))
                if b > a:
                    x = marginalize(st.local, ch.common.vars)
                    y = marginalize(net.agents[b].local, ch.common.vars)
                    local = max(local, rel_err(x.lam, y.lam), rel_err(x.zeta, y.zeta))
    return edge, local, net


def test_hs_marginal_agreement(criterion):
    with criterion(4, "HS-CF neighbors agree on shared marginals after each exchange") as info:
        cases = [("static-2x1", "full"), ("dynamic-2x1", "full"), ("dynamic-2x1", "cons1"),
                 ("dynamic-2x1", "plain1"), ("static-5x6", "full"), ("dynamic-4x5", "cons1"),
                 ("dynamic-4x5", "plain1")]
        worst_edge = 0.0
        for name, window in cases:
            cfg = preset(name)
            edge, local, net = hs_agreement(cfg, window, MASTER_SEED)
            worst_edge = max(worst_edge, edge)
            assert edge <= 1e-10, (name, window, edge)
            if cfg.topology.n_agents == 2:
                # endpoints with no other neighbors: local marginals are the fused ones
                info[f"{name}/{window} local"] = f"{local:.1e}"
                assert local <= 1e-10, (name, window, local)
            elif not cfg.dynamic:
                for _ in range(3):
                    fusion_round(net)
                gap = 0.0
                for a, st in net.agents.items():
                    for b, ch in st.channels.items():
                        x = marginalize(st.local, ch.common.vars)
                        y = marginalize(net.agents[b].local, ch.common.vars)
                        gap = max(gap, rel_err(x.lam, y.lam), rel_err(x.zeta, y.zeta))
                info[f"{name} after flush"] = f"{gap:.1e}"
                assert gap <= 1e-10
        info["fused edge marginals"] = f"{worst_edge:.1e}"


# -- 5 --------------------------------------------------------------------

def test_ias_matches_augmented_state_oracle(criterion):
    with criterion(5, "iAS equals the covariance augmented-state oracle and a KF") as info:
        rng = np.random.default_rng(MASTER_SEED)
        worst = dict.fromkeys(("mean", "cov", "kf_mean", "kf_cov"), 0.0)
        for _ in range(50):
            m = int(rng.integers(1, 13))
            p = int(rng.integers(1, m + 1))
            for key, val in ias_against_oracles(rng, m, p, steps=20).items():
                worst[key] = max(worst[key], val)
        v11 = max(predicted_top_block_error(rng, int(rng.integers(1, 13))) for _ in range(50))
        info.update({k: f"{v:.1e}" for k, v in worst.items()})
        info["new_block_vs_Qinv"] = f"{v11:.1e}"
        assert max(worst.values()) <= 1e-8
        assert v11 <= 1e-10


# -- 6 --------------------------------------------------------------------

def test_conservative_filtering_invariants(criterion):
    with criterion(6, "conservative filtering invariants on random instances") as info:
        rng = np.random.default_rng(MASTER_SEED)
        done = rejected = 0
        worst = {"domination": 0.0, "mean": 0.0, "idempotent": 0.0, "moment_gap": 0.0}
        while done < 1000:
            res = check_conservative_instance(*random_window(rng))
            if res is None:
                rejected += 1
                continue
            done += 1
            assert res["pattern_zero"] and res["ray_maximal"]
            worst["domination"] = min(worst["domination"], res["domination"])
            worst["moment_gap"] = min(worst["moment_gap"], res["moment_gap"])
            worst["mean"] = max(worst["mean"], res["mean"])
            worst["idempotent"] = max(worst["idempotent"], res["idempotent"])
        info["instances"] = done
        info["rejected_not_pd"] = rejected
        info.update({k: f"{v:.1e}" for k, v in worst.items()})
        assert worst["domination"] >= -1e-9
        assert worst["mean"] <= 1e-9
        assert worst["idempotent"] <= 1e-12
        assert worst["moment_gap"] >= -1e-9


# -- 7 --------------------------------------------------------------------

def test_static_consistency(criterion):
    with criterion(7, "static 500-run NEES consistency and conservativeness") as info:
        t0 = time.perf_counter()
        res = monte_carlo(preset("static-5x6"), 500, seed=MASTER_SEED, methods=["bdf", "hscf"])
        elapsed = time.perf_counter() - t0
        fracs, eigs = {}, {}
        for m, recs in res.items():
            assert all(r.ok for r in recs), m
            fracs[m] = nees_fraction_in_bounds(recs)
            info[f"{m} nees"] = " ".join(f"{v:.2f}" for v in fracs[m].values())
        for m in ("bdf", "hscf"):
            eigs[m] = global_min_eig(res[m])
            info[f"{m} min eig"] = f"{eigs[m]:.1e}"
        info["seconds"] = f"{elapsed:.0f}"
        assert min(eigs.values()) >= -1e-9
        assert elapsed < 300
        low = {m: f for m, f in fracs.items() if min(f.values()) < 0.9}
        assert not low, low


# -- 8 --------------------------------------------------------------------

@pytest.fixture(scope="module")
def two_agent_batches():
    cfg = preset("dynamic-2x1")
    t0 = time.perf_counter()
    full = monte_carlo(cfg, 75, seed=MASTER_SEED, methods=["bdf", "hscf"], window="full")
    cons = monte_carlo(cfg, 75, seed=MASTER_SEED, methods=["bdf", "hscf"], window="cons1")
    return full, cons, time.perf_counter() - t0


def test_dynamic_two_agent_sign_pattern(criterion, two_agent_batches):
    full, cons, elapsed = two_agent_batches
    with criterion(8, "dynamic 2-agent conservativeness signs and RMSE ordering") as info:
        for batch in (full, cons):
            for m, recs in batch.items():
                assert all(r.ok for r in recs), m
        bdf_c = global_min_eig(cons["bdf"])
        hs_plain = global_min_eig(cons["hscf"])
        bdf_f = global_min_eig(full["bdf"])
        hs_f = global_min_eig(full["hscf"])
        info["bdf cons1"] = f"{bdf_c:.1e}"
        info["hscf window-1"] = f"{hs_plain:.3f}"
        info["bdf full"] = f"{bdf_f:.1e}"
        info["hscf full"] = f"{hs_f:.1e}"
        # full-history (smoothed) RMSE of each step against the filtered estimate
        margins = {}
        for m in ("bdf", "hscf"):
            gap = rmse_per_agent(cons[m]) - rmse_per_agent(full[m], smoothed=True)
            margins[m] = float(gap.min())
        info["rmse margin bdf"] = f"{margins['bdf']:.4f}"
        info["rmse margin hscf"] = f"{margins['hscf']:.4f}"
        info["seconds"] = f"{elapsed:.0f}"
        assert bdf_c >= -1e-6
        assert hs_plain < 0
        assert abs(bdf_f) < 0.05 and abs(hs_f) < 0.05
        assert min(margins.values()) >= 0.0, margins


# -- 9 --------------------------------------------------------------------

def test_dynamic_four_agent_batch(criterion):
    with criterion(9, "dynamic 4-agent 500-run conservativeness and central NEES") as info:
        t0 = time.perf_counter()
        res = monte_carlo(preset("dynamic-4x5"), 500, seed=MASTER_SEED, methods=["bdf", "hscf"],
                          window="cons1")
        elapsed = time.perf_counter() - t0
        for m, recs in res.items():
            assert all(r.ok for r in recs), m
        bdf = global_min_eig(res["bdf"])
        hs = global_min_eig(res["hscf"])
        frac = nees_fraction_in_bounds(res["central"])[0]
        info["bdf min eig"] = f"{bdf:.1e}"
        info["hscf min eig"] = f"{hs:.3f}"
        info["central nees"] = f"{frac:.2f}"
        info["seconds"] = f"{elapsed:.0f}"
        assert bdf >= -1e-6
        assert hs < 0
        assert frac >= 0.9
        assert elapsed < 900


# -- 10 -------------------------------------------------------------------

def cli_run(out, hashseed, threads, *args):
    env = dict(os.environ, PYTHONHASHSEED=str(hashseed), HETFUSE_THREADS=str(threads))
    subprocess.run([sys.executable, "-m", "hetfuse.cli", "run", *args, "--out", str(out)],
                   env=env, check=True, capture_output=True)
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


def test_rerun_is_byte_identical(criterion, tmp_path):
    with criterion(10, "identical config and seed give byte-identical outputs") as info:
        cases = {
            "static": ("--scenario", "static-5x6", "--methods", "cf,fcf,bdf,abdf,hscf",
                       "--runs", "3", "--seed", "1", "--steps", "8"),
            "dynamic": ("--scenario", "dynamic-2x1", "--methods", "bdf,hscf", "--runs", "3",
                        "--seed", "1", "--steps", "8", "--window", "full"),
        }
        for name, args in cases.items():
            a = cli_run(tmp_path / f"{name}-a", 1, 1, *args)
            b = cli_run(tmp_path / f"{name}-b", 2, 2, *args)
            assert sorted(a) == sorted(b) and len(a) >= 3
            diff = [f for f in a if a[f] != b[f]]
            info[name] = f"{len(a)} files, {len(diff)} differ"
            assert not diff, diff
